use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use roar3d_core::numerics::Tensor;
use roar3d_core::rng::GumbelKey;
use roar3d_core::router::{gumbel_select, RouterParams, RoutingMode};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

fn router(rng: &mut ChaCha8Rng, dim: usize, feat: usize, heads: usize, d: usize) -> RouterParams {
    RouterParams {
        w_q: randn(rng, &[dim, heads * d]),
        w_k: randn(rng, &[feat, heads * d]),
        w_agg: randn(rng, &[heads]),
        ln_gain: randn(rng, &[dim]),
        ln_bias: randn(rng, &[dim]),
        q_rms_gain: randn(rng, &[d]),
        k_rms_gain: randn(rng, &[d]),
        heads,
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| perm.iter().map(|&p| t.at(i, p)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn permutation(v: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..v).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    /// New view `j` is old view `perm[j]`; noise is permuted the same way.
    #[test]
    fn selection_is_equivariant_under_view_permutation(seed in any::<u64>(), perm in permutation(5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = router(&mut rng, 6, 4, 2, 3);
        let z = randn(&mut rng, &[7, 6]);
        let pooled = randn(&mut rng, &[5, 4]);
        let logits = p.routing_logits(&z, &pooled).unwrap();
        let logits_p = p.routing_logits(&z, &permute_rows(&pooled, &perm)).unwrap();
        prop_assert!(logits_p.max_abs_diff(&permute_cols(&logits, &perm)) <= 1e-12);

        let key = GumbelKey::new(seed, 1, 2, 3);
        let train = gumbel_select(&logits, 1.0, RoutingMode::Train, Some(key)).unwrap();
        // A train-mode decision is the noise-free decision on logits + g.
        let noisy = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().zip(train.noise().data()).map(|(a, b)| a + b).collect(),
        ).unwrap();
        let as_inference = gumbel_select(&noisy, 1.0, RoutingMode::Inference, None).unwrap();
        prop_assert_eq!(&as_inference.hard_index, &train.hard_index);
        prop_assert!(as_inference.y_soft.max_abs_diff(&train.y_soft) <= 1e-15);

        let permuted = gumbel_select(&permute_cols(&noisy, &perm), 1.0, RoutingMode::Inference, None).unwrap();
        for (i, &h) in permuted.hard_index.iter().enumerate() {
            prop_assert_eq!(perm[h], train.hard_index[i]);
        }
        prop_assert!(permuted.y_soft.max_abs_diff(&permute_cols(&train.y_soft, &perm)) <= 1e-15);

        let inf = gumbel_select(&logits, 1.0, RoutingMode::Inference, None).unwrap();
        let inf_p = gumbel_select(&logits_p, 1.0, RoutingMode::Inference, None).unwrap();
        for (i, &h) in inf_p.hard_index.iter().enumerate() {
            prop_assert_eq!(perm[h], inf.hard_index[i]);
        }
    }

    #[test]
    fn straight_through_forward_is_one_hot(seed in any::<u64>(), tau in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = randn(&mut rng, &[6, 4]);
        let d = gumbel_select(&logits, tau, RoutingMode::Train, Some(GumbelKey::new(seed, 0, 0, 0))).unwrap();
        let y = d.straight_through();
        for i in 0..6 {
            let row = y.row(i);
            prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(row[d.hard_index[i]], 1.0);
        }
    }
}
