//! Resolved run configuration: every field has a default, file values
//! override defaults and command-line flags override file values.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{sampler, ModelConfig, ParamGroup};
use crate::world::{ShapeClass, WorldConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub classes: Vec<ShapeClass>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 400,
            val: 50,
            test: 50,
            classes: ShapeClass::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine decay to `lr_min` after `warmup` steps.
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Probability that a multi-view sample is orientation-perturbed.
    pub p_pert: f64,
    /// Inclusive range of auxiliary views per multi-view sample.
    pub aux_views: [usize; 2],
    /// Groups never updated in this phase.
    pub freeze: Vec<ParamGroup>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 3e-4,
            lr_min: 3e-5,
            warmup: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            p_pert: 0.2,
            aux_views: [1, 4],
            freeze: Vec::new(),
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_pert) {
            return Err(Error::invalid(format!("p_pert = {} outside [0, 1]", self.p_pert)));
        }
        if self.aux_views[0] > self.aux_views[1] {
            return Err(Error::invalid("aux_views range is empty"));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::invalid("need 0 ≤ lr_min ≤ lr and lr > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid optimizer moments"));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub view_counts: Vec<usize>,
    pub sampler_steps: usize,
    /// Use at most this many test shapes; `0` means all.
    pub max_shapes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            view_counts: vec![1, 2, 4],
            sampler_steps: sampler::DEFAULT_STEPS,
            max_shapes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    /// Single-view pretraining phase.
    pub single: TrainConfig,
    /// Multi-view finetuning phase.
    pub multi: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.single.validate()?;
        self.multi.validate()?;
        if self.model.patches != self.world.encoder.patches() || self.model.feat_dim != self.world.encoder.feat_dim {
            return Err(Error::invalid(format!(
                "model expects {} patches × {} features, encoder produces {} × {}",
                self.model.patches,
                self.model.feat_dim,
                self.world.encoder.patches(),
                self.world.encoder.feat_dim
            )));
        }
        if self.data.classes.is_empty() {
            return Err(Error::invalid("data.classes is empty"));
        }
        if self.eval.view_counts.iter().any(|&k| k == 0) || self.eval.sampler_steps == 0 {
            return Err(Error::invalid("eval view counts and sampler steps must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
