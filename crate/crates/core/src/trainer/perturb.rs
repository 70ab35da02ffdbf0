//! Orientation perturbation: rotate the latent by a quarter turn that keeps
//! it out of every input view's azimuth bin and drop the primary view.

use rand::Rng;

use super::TrainingSample;
use crate::model::{rotate_latent, CodecConfig};
use crate::world::camera::{azimuth_bin, BIN_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbOutcome {
    /// Rotated by this many quarter turns.
    Perturbed(usize),
    /// Every rotation collides with a view bin; the sample is unchanged.
    Skipped,
}

/// Quarter turns `q` for which `azimuth_tag + 90°·q` falls outside every
/// occupied view bin.
pub fn surviving_rotations(azimuth_tag: f64, view_bins: &[usize]) -> Vec<usize> {
    (0..BIN_COUNT)
        .filter(|&q| !view_bins.contains(&azimuth_bin(azimuth_tag + 90.0 * q as f64)))
        .collect()
}

pub fn build_perturbed_sample<R: Rng + ?Sized>(
    base: &TrainingSample,
    rng: &mut R,
    codec: &CodecConfig,
) -> (TrainingSample, PerturbOutcome) {
    let survivors = surviving_rotations(base.latent.azimuth_tag, &base.views.bins());
    if survivors.is_empty() {
        return (base.clone(), PerturbOutcome::Skipped);
    }
    let q = survivors[rng.random_range(0..survivors.len())];
    let mut views = base.views.clone();
    views.primary = None;
    let sample = TrainingSample {
        latent: rotate_latent(&base.latent, q, codec),
        views,
        perturbed: true,
        primary_present: false,
    };
    (sample, PerturbOutcome::Perturbed(q))
}

/// The perturbed-sample contract: no primary and an orientation outside
/// every view's bin.
pub fn perturbation_invariant_holds(s: &TrainingSample) -> bool {
    if !s.perturbed {
        return true;
    }
    !s.primary_present
        && s.views.primary.is_none()
        && !s.views.bins().contains(&azimuth_bin(s.latent.azimuth_tag))
}
