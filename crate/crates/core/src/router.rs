//! Token-wise view routing.
//!
//! For token `i` and view `v` the router scores
//! `r[i, v] = Σ_h w_agg[h] · ⟨q[i, h], k[v, h]⟩ / √d` with
//! `q = RMSNorm(LN(z) · W_q)` and `k = RMSNorm(mean_s(F_v) · W_k)`, then picks
//! one view per token by hard Gumbel-Softmax. The forward pass uses the
//! one-hot choice; gradients flow through `softmax((r + g) / τ)`.
//!
//! Weights are stored input-major (`x · W`), i.e. the transpose of the
//! `W · z` convention.

use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::rng::GumbelKey;
use crate::world::ViewFeatureSet;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Gumbel noise added before the argmax.
    Train,
    /// Noise-free, deterministic argmax.
    Inference,
}

/// Mean over patches: row `v` is `(1/S) Σ_s F_v[s]`.
pub fn pool_view_keys(views: &ViewFeatureSet) -> Tensor {
    let d = views.feat_dim();
    let mut out = Vec::with_capacity(views.len() * d);
    for f in &views.features {
        let s = f.rows();
        let mut acc = vec![0.0; d];
        for r in 0..s {
            for (a, x) in acc.iter_mut().zip(f.row(r)) {
                *a += x;
            }
        }
        out.extend(acc.into_iter().map(|a| a / s as f64));
    }
    Tensor::new(vec![views.len(), d], out).expect("pooled shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `[D, H·d]`
    pub w_q: Tensor,
    /// `[D_key, H·d]`
    pub w_k: Tensor,
    /// `[H]`
    pub w_agg: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `[d]`, shared by all heads.
    pub q_rms_gain: Tensor,
    pub k_rms_gain: Tensor,
    pub heads: usize,
}

impl RouterParams {
    pub fn head_dim(&self) -> usize {
        self.w_q.shape()[1] / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.w_q.shape().get(1).copied().unwrap_or(0);
        if self.heads == 0 || width % self.heads != 0 {
            return Err(Error::shape(format!("{} heads do not divide width {width}", self.heads)));
        }
        let d = width / self.heads;
        let ok = self.w_q.rank() == 2
            && self.w_k.rank() == 2
            && self.w_k.shape()[1] == width
            && self.w_agg.len() == self.heads
            && self.ln_gain.len() == self.w_q.shape()[0]
            && self.ln_bias.len() == self.w_q.shape()[0]
            && self.q_rms_gain.len() == d
            && self.k_rms_gain.len() == d;
        if !ok {
            return Err(Error::shape("router parameter shapes are inconsistent"));
        }
        if !self.w_agg.is_finite() {
            return Err(Error::NonFinite("w_agg".into()));
        }
        Ok(())
    }

    /// `[N, V]` routing logits for latent rows `z` (`[N, D]`, before the
    /// router's layer norm) and pooled keys (`[V, D_key]`).
    pub fn routing_logits(&self, z: &Tensor, pooled: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let mut tape = Tape::new();
        let vars = RouterVars::constants(&mut tape, self);
        let z = tape.constant(z.clone());
        let pooled = tape.constant(pooled.clone());
        let r = routing_logits_on(&mut tape, &vars, z, pooled)?;
        Ok(tape.value(r).clone())
    }
}

/// Router parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_agg: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub q_rms_gain: Var,
    pub k_rms_gain: Var,
    pub heads: usize,
}

impl RouterVars {
    pub fn constants(tape: &mut Tape, p: &RouterParams) -> Self {
        Self {
            w_q: tape.constant(p.w_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            w_agg: tape.constant(p.w_agg.clone()),
            ln_gain: tape.constant(p.ln_gain.clone()),
            ln_bias: tape.constant(p.ln_bias.clone()),
            q_rms_gain: tape.constant(p.q_rms_gain.clone()),
            k_rms_gain: tape.constant(p.k_rms_gain.clone()),
            heads: p.heads,
        }
    }
}

pub fn routing_logits_on(tape: &mut Tape, p: &RouterVars, z: Var, pooled: Var) -> Result<Var> {
    let zn = tape.layer_norm(z, p.ln_gain, p.ln_bias)?;
    let q = tape.matmul(zn, p.w_q)?;
    let q = tape.rms_norm(q, p.q_rms_gain)?;
    let k = tape.matmul(pooled, p.w_k)?;
    let k = tape.rms_norm(k, p.k_rms_gain)?;
    tape.head_scores(q, k, p.w_agg, p.heads)
}

/// Hard per-token view choice with its soft weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub hard_index: Vec<usize>,
    /// `softmax((logits + g) / τ)`, `[N, V]`.
    pub y_soft: Tensor,
    pub logits: Tensor,
    /// Provenance of the Gumbel draws; `None` in inference mode.
    pub gumbel_key: Option<GumbelKey>,
    pub mode: RoutingMode,
    pub tau: f64,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.hard_index.len()
    }

    pub fn views(&self) -> usize {
        self.logits.last_dim()
    }

    /// The Gumbel draws that produced this decision (zeros in inference mode).
    pub fn noise(&self) -> Tensor {
        gumbel_noise(self.tokens(), self.views(), self.gumbel_key.as_ref())
    }

    /// Forward value of `y = y_hard − sg(y_soft) + y_soft`. Evaluated as
    /// `y_hard + (y_soft − y_soft)`, which is exactly the one-hot.
    pub fn straight_through(&self) -> Tensor {
        let v = self.views();
        let mut out = self.y_soft.clone();
        for (i, row) in out.data_mut().chunks_mut(v).enumerate() {
            for (j, y) in row.iter_mut().enumerate() {
                let hard = if j == self.hard_index[i] { 1.0 } else { 0.0 };
                *y = hard + (*y - *y);
            }
        }
        out
    }

    /// Soft weight at the chosen view, `y_soft[i, v*_i]`.
    pub fn chosen_soft(&self) -> Vec<f64> {
        self.hard_index
            .iter()
            .enumerate()
            .map(|(i, &h)| self.y_soft.at(i, h))
            .collect()
    }

    /// Mean entropy (nats) of the soft routing distributions.
    pub fn mean_entropy(&self) -> f64 {
        let v = self.views();
        let rows = self.y_soft.data().chunks(v);
        let n = self.tokens().max(1) as f64;
        rows.map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / n
    }
}

pub fn gumbel_noise(n: usize, v: usize, key: Option<&GumbelKey>) -> Tensor {
    let mut g = Tensor::zeros(&[n, v]);
    if let Some(k) = key {
        for i in 0..n {
            for j in 0..v {
                g.data_mut()[i * v + j] = k.gumbel(i, j);
            }
        }
    }
    g
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Adds Gumbel noise (train mode), takes the argmax and records the soft
/// weights on `tape`. Returns the decision and the `y_soft` node.
pub fn gumbel_select_on(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    mode: RoutingMode,
    key: Option<GumbelKey>,
) -> Result<(RoutingDecision, Var)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let key = match mode {
        RoutingMode::Train => Some(key.ok_or_else(|| Error::invalid("train-mode routing needs a Gumbel key"))?),
        RoutingMode::Inference => None,
    };
    let r = tape.value(logits).clone();
    let (n, v) = (r.rows(), r.last_dim());
    let noise = gumbel_noise(n, v, key.as_ref());
    let g = tape.constant(noise);
    let perturbed = tape.add(logits, g)?;
    let hard_index = (0..n).map(|i| argmax_lowest(tape.value(perturbed).row(i))).collect();
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let y_soft = tape.softmax(scaled);
    let decision = RoutingDecision {
        hard_index,
        y_soft: tape.value(y_soft).clone(),
        logits: r,
        gumbel_key: key,
        mode,
        tau,
    };
    Ok((decision, y_soft))
}

/// Tape-free hard Gumbel-Softmax selection over `[N, V]` logits.
pub fn gumbel_select(logits: &Tensor, tau: f64, mode: RoutingMode, key: Option<GumbelKey>) -> Result<RoutingDecision> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    Ok(gumbel_select_on(&mut tape, l, tau, mode, key)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Camera;

    fn params(d_model: usize, d_key: usize, heads: usize, head_dim: usize, seed: u64) -> RouterParams {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
        };
        let w = heads * head_dim;
        RouterParams {
            w_q: randn(&[d_model, w]),
            w_k: randn(&[d_key, w]),
            w_agg: randn(&[heads]),
            ln_gain: randn(&[d_model]),
            ln_bias: randn(&[d_model]),
            q_rms_gain: randn(&[head_dim]),
            k_rms_gain: randn(&[head_dim]),
            heads,
        }
    }

    fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        params(1, rows, cols, 1, seed).w_k
    }

    #[test]
    fn pooling_constant_and_zero_views() {
        let c = Tensor::new(vec![3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let z = Tensor::zeros(&[3, 2]);
        let cams = vec![Camera::new(0.0, 0.0); 2];
        let views = ViewFeatureSet::new(vec![c, z], cams, Some(0)).unwrap();
        let pooled = pool_view_keys(&views);
        assert_eq!(pooled.data(), &[1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn orthogonal_query_and_key_give_zero_logit() {
        // Identity projections, H = 1, d = 2: LN maps (1, -1) to ≈(1, -1),
        // RMS then gives q ∝ (1, -1)/|..| while k ∝ (1, 1), which are orthogonal.
        let p = RouterParams {
            w_q: Tensor::eye(2),
            w_k: Tensor::eye(2),
            w_agg: Tensor::new(vec![1], vec![1.0]).unwrap(),
            ln_gain: Tensor::ones(&[2]),
            ln_bias: Tensor::zeros(&[2]),
            q_rms_gain: Tensor::ones(&[2]),
            k_rms_gain: Tensor::ones(&[2]),
            heads: 1,
        };
        let z = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![3.0, 3.0]).unwrap();
        let r = p.routing_logits(&z, &k).unwrap();
        assert!(r.data()[0].abs() < 1e-15);
    }

    #[test]
    fn identical_keys_give_identical_columns() {
        let p = params(6, 5, 2, 3, 1);
        let z = matrix(4, 6, 2); // any [4, 6] matrix
        let key = Tensor::new(vec![1, 5], vec![0.3, -0.1, 0.8, 0.0, 2.0]).unwrap();
        let pooled = Tensor::vstack(&[&key, &key, &key]).unwrap();
        let r = p.routing_logits(&z, &pooled).unwrap();
        for i in 0..4 {
            assert_eq!(r.at(i, 0), r.at(i, 1));
            assert_eq!(r.at(i, 0), r.at(i, 2));
        }
    }

    #[test]
    fn single_view_always_selected() {
        let logits = Tensor::new(vec![3, 1], vec![0.2, -5.0, 9.0]).unwrap();
        for (mode, key) in [
            (RoutingMode::Inference, None),
            (RoutingMode::Train, Some(GumbelKey::new(1, 0, 0, 0))),
        ] {
            let d = gumbel_select(&logits, 1.0, mode, key).unwrap();
            assert_eq!(d.hard_index, vec![0, 0, 0]);
            assert_eq!(d.y_soft.data(), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn inference_softmax_values_and_tie_break() {
        let logits = Tensor::new(vec![2, 3], vec![2.0, 1.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let d = gumbel_select(&logits, 1.0, RoutingMode::Inference, None).unwrap();
        assert_eq!(d.hard_index, vec![0, 0]);
        let e = std::f64::consts::E;
        let expected = [e / (e + 2.0), 1.0 / (e + 2.0)];
        assert!((d.y_soft.at(0, 0) - expected[0]).abs() < 1e-15);
        assert!((d.y_soft.at(0, 1) - expected[1]).abs() < 1e-15);
        assert!((d.y_soft.at(0, 0) - 0.576).abs() < 5e-4);
        assert!((d.y_soft.at(0, 2) - 0.212).abs() < 5e-4);
        let tie = gumbel_select(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), 1.0, RoutingMode::Inference, None)
            .unwrap();
        assert_eq!(tie.hard_index, vec![0]);
    }

    #[test]
    fn straight_through_forward_is_exact_one_hot() {
        let logits = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let d = gumbel_select(&logits, 1.0, RoutingMode::Train, Some(GumbelKey::new(3, 1, 0, 2))).unwrap();
        let y = d.straight_through();
        for i in 0..4 {
            let row = y.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            for (j, &x) in row.iter().enumerate() {
                assert_eq!(x, if j == d.hard_index[i] { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn train_mode_argmax_matches_recorded_noise() {
        let logits = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).cos()).collect()).unwrap();
        let key = GumbelKey::new(8, 2, 1, 0);
        let d = gumbel_select(&logits, 1.0, RoutingMode::Train, Some(key)).unwrap();
        let g = d.noise();
        for i in 0..5 {
            let row: Vec<f64> = (0..4).map(|j| logits.at(i, j) + g.at(i, j)).collect();
            assert_eq!(d.hard_index[i], argmax_lowest(&row));
            assert!((d.y_soft.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(gumbel_select(&logits, 1.0, RoutingMode::Train, None).is_err());
        assert!(gumbel_select(&logits, 0.0, RoutingMode::Inference, None).is_err());
    }

    #[test]
    fn uniform_logits_select_each_view_equally() {
        let n = 100_000;
        let v = 4;
        let logits = Tensor::zeros(&[n, v]);
        let d = gumbel_select(&logits, 1.0, RoutingMode::Train, Some(GumbelKey::new(21, 0, 0, 0))).unwrap();
        let mut counts = vec![0usize; v];
        for &h in &d.hard_index {
            counts[h] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 0.01);
        }
    }

    #[test]
    fn random_micro_case_matches_per_head_oracle() {
        // Direct evaluation of the routing formula with explicit loops.
        let (n, v, h, d, dm, dk) = (3, 2, 2, 4, 5, 6);
        let p = params(dm, dk, h, d, 9);
        let z = matrix(n, dm, 10);
        let pooled = matrix(v, dk, 11);
        let r = p.routing_logits(&z, &pooled).unwrap();

        let ln = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
            x.iter()
                .enumerate()
                .map(|(j, a)| (a - m) / (var + 1e-5).sqrt() * p.ln_gain.data()[j] + p.ln_bias.data()[j])
                .collect()
        };
        let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.shape()[1]).map(|c| (0..x.len()).map(|r| x[r] * w.at(r, c)).sum()).collect()
        };
        let rms_heads = |x: Vec<f64>, g: &Tensor| -> Vec<f64> {
            x.chunks(d)
                .flat_map(|c| {
                    let ms = c.iter().map(|a| a * a).sum::<f64>() / d as f64;
                    let s = 1.0 / (ms + 1e-6).sqrt();
                    c.iter().enumerate().map(move |(j, a)| a * s * g.data()[j]).collect::<Vec<_>>()
                })
                .collect()
        };
        for i in 0..n {
            let q = rms_heads(proj(&ln(z.row(i)), &p.w_q), &p.q_rms_gain);
            for j in 0..v {
                let k = rms_heads(proj(pooled.row(j), &p.w_k), &p.k_rms_gain);
                let mut expect = 0.0;
                for hh in 0..h {
                    let dot: f64 = (0..d).map(|e| q[hh * d + e] * k[hh * d + e]).sum();
                    expect += p.w_agg.data()[hh] * dot / (d as f64).sqrt();
                }
                let got = r.at(i, j);
                assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0), "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn inference_decisions_are_bit_reproducible() {
        let p = params(6, 5, 2, 3, 4);
        let z = matrix(7, 6, 5);
        let pooled = matrix(3, 5, 6);
        let r1 = p.routing_logits(&z, &pooled).unwrap();
        let r2 = p.routing_logits(&z, &pooled).unwrap();
        let a = gumbel_select(&r1, 1.0, RoutingMode::Inference, None).unwrap();
        let b = gumbel_select(&r2, 1.0, RoutingMode::Inference, None).unwrap();
        assert_eq!(a, b);
    }
}
