//! Euler integration of the learned velocity field from noise (`t = 1`) to
//! data (`t = 0`) with deterministic routing.

use rand_distr::{Distribution, StandardNormal};

use super::{ForwardOptions, LatentTokens, Model};
use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::world::ViewFeatureSet;
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub latent: LatentTokens,
    /// Hard view choices indexed `[step][block][token]`; empty for models
    /// without a router.
    pub routing: Vec<Vec<Vec<usize>>>,
}

/// Standard-normal starting latent drawn from the noise stream of `seed`.
pub fn initial_noise(model: &Model, seed: u64) -> Tensor {
    let (n, c) = (model.config.tokens(), model.config.channels());
    let mut rng = stream_rng(seed, Stream::Noise, &[0x5a3e]);
    let data = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, c], data).expect("latent shape")
}

/// `z ← z − Δt · v(z, t)` for `t = 1, 1 − Δt, ..., Δt`.
pub fn sample_latent(model: &Model, views: &ViewFeatureSet, seed: u64, steps: usize) -> Result<SampleOutput> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let opts = ForwardOptions::inference();
    let dt = 1.0 / steps as f64;
    let mut z = initial_noise(model, seed);
    let mut routing = Vec::new();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let (v, decisions) = model.predict(&z, t, views, &opts)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
        if !decisions.is_empty() {
            routing.push(decisions.into_iter().map(|d| d.hard_index).collect());
        }
    }
    Ok(SampleOutput {
        latent: LatentTokens::new(z, 0.0)?,
        routing,
    })
}
