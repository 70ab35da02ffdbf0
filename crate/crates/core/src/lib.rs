//! Multi-view conditioning for a miniature flow-matching 3D generator.
//!
//! Each 3D latent token picks exactly one input view per transformer block
//! (hard Gumbel-Softmax with a straight-through gradient), then attends only to
//! that view's patch tokens through either the primary or the auxiliary
//! cross-attention stream. Training upgrades a single-view checkpoint by weight
//! copying and mixes in orientation-perturbed samples that update only the
//! auxiliary stream.
//!
//! Module map:
//! - [`numerics`]: dense f64 tensors, a reverse-mode tape, gradient checking and
//!   the binary checkpoint format.
//! - [`world`]: procedural shapes, cameras and the synthetic view encoder.
//! - [`router`]: pooled view keys, multi-head routing logits, Gumbel selection.
//! - [`model`]: the latent codec, dual-stream DiT and the Euler sampler.
//! - [`trainer`]: flow-matching loss, perturbation sampler, freezing, phases.
//! - [`evaluation`]: Chamfer / F-score, held-out evaluation, routing consistency.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod router;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
