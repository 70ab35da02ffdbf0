//! Every differentiable tape op against central finite differences, plus the
//! kernel identities the ops rely on.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use roar3d_core::numerics::tape::Segment;
use roar3d_core::numerics::{grad_check, layer_norm, rms_norm, softmax, GradCheckOptions, Tape, Tensor, Var};
use roar3d_core::Result;

const SEEDS: u64 = 100;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

/// Squared error against a random target turns any output into a scalar
/// whose gradient touches every entry.
fn check_op<F>(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = inputs(&mut rng);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
            let out = op(&mut tape, &vars).unwrap();
            tape.value(out).shape().to_vec()
        };
        let target = randn(&mut rng, &probe);
        let objective = |tape: &mut Tape, vars: &[Var]| {
            let out = op(tape, vars)?;
            tape.mse_const(out, &target)
        };
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check(objective, &params, &opts).unwrap();
        assert!(report.passed(), "{name}, seed {seed}: {report:?}");
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    let pair = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
    check_op("add", pair, |t, v| t.add(v[0], v[1]));
    check_op("sub", pair, |t, v| t.sub(v[0], v[1]));
    check_op("mul", pair, |t, v| t.mul(v[0], v[1]));
    let one = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4])];
    check_op("scale", one, |t, v| Ok(t.scale(v[0], -1.7)));
    check_op("add_scalar", one, |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check_op("silu", one, |t, v| Ok(t.silu(v[0])));
    check_op("gelu", one, |t, v| Ok(t.gelu(v[0])));
    check_op("mean", one, |t, v| Ok(t.mean(v[0])));
    let row = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4]), randn(r, &[4])];
    check_op("add_row", row, |t, v| t.add_row(v[0], v[1]));
    check_op("mul_row", row, |t, v| t.mul_row(v[0], v[1]));
    let col = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4]), randn(r, &[3])];
    check_op("scale_rows", col, |t, v| t.scale_rows(v[0], v[1]));
}

#[test]
fn linear_and_shape_ops() {
    check_op("matmul", |r| vec![randn(r, &[3, 5]), randn(r, &[5, 2])], |t, v| t.matmul(v[0], v[1]));
    let one = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4])];
    check_op("reshape", one, |t, v| t.reshape(v[0], &[2, 6]));
    check_op("slice_cols", one, |t, v| t.slice_cols(v[0], 1, 2));
    check_op(
        "concat_rows",
        |r| vec![randn(r, &[2, 3]), randn(r, &[1, 3]), randn(r, &[3, 3])],
        |t, v| t.concat_rows(v),
    );
}

#[test]
fn normalization_and_softmax_ops() {
    check_op("softmax", |r| vec![randn(r, &[3, 5])], |t, v| Ok(t.softmax(v[0])));
    check_op(
        "layer_norm",
        |r| vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    );
    check_op("rms_norm", |r| vec![randn(r, &[3, 6]), randn(r, &[6])], |t, v| t.rms_norm(v[0], v[1]));
}

#[test]
fn attention_and_routing_ops() {
    // Ragged segments over 5 keys, two heads of width 2.
    let segments = vec![
        Segment { start: 0, len: 2 },
        Segment { start: 2, len: 3 },
        Segment { start: 1, len: 4 },
    ];
    check_op(
        "attention",
        |r| vec![randn(r, &[3, 4]), randn(r, &[5, 4]), randn(r, &[5, 4])],
        |t, v| t.attention("test", v[0], v[1], v[2], 2, segments.clone()),
    );
    check_op(
        "head_scores",
        |r| vec![randn(r, &[3, 4]), randn(r, &[2, 4]), randn(r, &[2])],
        |t, v| t.head_scores(v[0], v[1], v[2], 2),
    );
    // The anchored gate is the smooth form of the straight-through gate; the
    // anchor is the soft weight at the unperturbed input.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[4, 3]);
        let hard: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let soft0 = softmax(&x);
        let anchor: Vec<f64> = hard.iter().enumerate().map(|(i, &h)| soft0.at(i, h)).collect();
        let target = randn(&mut rng, &[4]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.softmax(v[0]);
            let g = t.ste_gate_anchored(s, &hard, &anchor)?;
            t.mse_const(g, &target)
        };
        let report = grad_check(f, std::slice::from_ref(&x), &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "ste gate seed {seed}: {report:?}");
        // The plain gate has the same gradient and a forward value of exactly 1.
        let mut tape = Tape::new();
        let xa = tape.param(x.clone());
        let s = tape.softmax(xa);
        let plain = tape.ste_gate(s, &hard).unwrap();
        assert!(tape.value(plain).data().iter().all(|&y| y == 1.0));
        let loss = tape.mse_const(plain, &target).unwrap();
        let g_plain = tape.backward(loss).unwrap().get_or_zeros(xa, &x);
        let mut tape2 = Tape::new();
        let xb = tape2.param(x.clone());
        let s2 = tape2.softmax(xb);
        let anch = tape2.ste_gate_anchored(s2, &hard, &anchor).unwrap();
        let loss2 = tape2.mse_const(anch, &target).unwrap();
        let g_anch = tape2.backward(loss2).unwrap().get_or_zeros(xb, &x);
        assert!(g_plain.max_abs_diff(&g_anch) < 1e-15, "seed {seed}");
    }
}

#[test]
fn attention_counts_keys_per_query() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = tape.constant(randn(&mut rng, &[2, 4]));
    let k = tape.constant(randn(&mut rng, &[6, 4]));
    let segs = vec![Segment { start: 0, len: 6 }, Segment { start: 4, len: 2 }];
    tape.attention("probe", q, k, k, 2, segs).unwrap();
    let rec: Vec<_> = tape.counters().calls_labeled("probe").collect();
    assert_eq!(rec.len(), 1);
    assert_eq!(rec[0].keys_per_query, vec![6, 2]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.param(randn(&mut rng, &[4, 6]));
        let w = tape.param(randn(&mut rng, &[6, 6]));
        let g = tape.param(randn(&mut rng, &[6]));
        let b = tape.param(randn(&mut rng, &[6]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.layer_norm(h, g, b).unwrap();
        let h = tape.gelu(h);
        let segs = vec![Segment { start: 0, len: 4 }; 4];
        let a = tape.attention("det", h, h, h, 2, segs).unwrap();
        let target = randn(&mut rng, &[4, 6]);
        let loss = tape.mse_const(a, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        [x, w, g, b]
            .iter()
            .flat_map(|&v| grads.get(v).unwrap().iter().map(|f| f.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(4, 7, 30.0), c in -50.0f64..50.0) {
        let y = softmax(&x);
        for i in 0..4 {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        let shifted = softmax(&x.map(|v| v + c));
        prop_assert!(y.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn norms_are_scale_invariant_far_above_epsilon(
        x in matrix(3, 8, 1.0),
        alpha in 0.5f64..4.0,
    ) {
        // Spread rows to variance ≥ 1e4 so ε/σ² stays below 1e-8.
        let x = Tensor::new(vec![3, 8], x.data().iter().enumerate()
            .map(|(i, v)| 200.0 * v + if i % 2 == 0 { 150.0 } else { -150.0 }).collect()).unwrap();
        let gain = vec![1.3; 8];
        let bias = vec![-0.2; 8];
        let scaled = x.map(|v| alpha * v);
        prop_assert!(layer_norm(&x, &gain, &bias).max_abs_diff(&layer_norm(&scaled, &gain, &bias)) <= 1e-8);
        prop_assert!(rms_norm(&x, &gain).max_abs_diff(&rms_norm(&scaled, &gain)) <= 1e-8);
    }
}
