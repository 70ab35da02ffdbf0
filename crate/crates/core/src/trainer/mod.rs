//! Flow-matching training: sample construction, loss and gradients, the
//! perturbation freeze and the optimizer loop shared by both phases.

pub mod optim;
pub mod perturb;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::AdamW;
pub use perturb::{build_perturbed_sample, perturbation_invariant_holds, surviving_rotations, PerturbOutcome};

use crate::config::TrainConfig;
use crate::model::{
    latent_encode, Binding, CodecConfig, Conditioning, ForwardOptions, FrozenRouting, GumbelBase, LatentTokens, Model,
    ParamGrads, ParamGroup, RoutingOverride,
};
use crate::numerics::{compare_with_finite_differences, GradCheckOptions, GradCheckReport, Tape, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::router::RoutingDecision;
use crate::world::{camera, PointCloud, ShapeRecord, ViewEncoder, ViewFeatureSet, WorldConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub latent: LatentTokens,
    pub views: ViewFeatureSet,
    pub perturbed: bool,
    pub primary_present: bool,
}

impl TrainingSample {
    pub fn new(latent: LatentTokens, views: ViewFeatureSet) -> Self {
        let primary_present = views.primary.is_some();
        Self {
            latent,
            views,
            perturbed: false,
            primary_present,
        }
    }
}

/// A training shape with its canonical (azimuth 0) latent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainShape {
    pub record: ShapeRecord,
    pub cloud: PointCloud,
    pub latent: LatentTokens,
}

impl TrainShape {
    pub fn new(record: ShapeRecord, cloud: PointCloud, codec: &CodecConfig) -> Self {
        let latent = latent_encode(&cloud, codec);
        Self { record, cloud, latent }
    }
}

pub fn prepare_shapes(records: &[ShapeRecord], world: &WorldConfig, codec: &CodecConfig) -> Result<Vec<TrainShape>> {
    records
        .par_iter()
        .map(|r| Ok(TrainShape::new(r.clone(), r.generate(world.points)?, codec)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SingleView,
    MultiView,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::SingleView => 1,
            Phase::MultiView => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::SingleView => "single-view",
            Phase::MultiView => "multi-view",
        }
    }
}

pub struct TrainContext<'a> {
    pub shapes: &'a [TrainShape],
    pub encoder: &'a ViewEncoder,
    pub world: &'a WorldConfig,
    pub codec: &'a CodecConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub sample: TrainingSample,
    /// Index into the training shapes.
    pub shape: usize,
    /// Whether some rotation avoids every view bin.
    pub eligible: bool,
    /// `None` when the sample was not selected for perturbation.
    pub outcome: Option<PerturbOutcome>,
}

/// Sample `j` of optimizer step `step`: a shape, a primary camera in bin 0
/// and, in the multi-view phase, `U{aux_views}` auxiliary cameras in uniform
/// bins; then perturbation with probability `p_pert` if `perturb` is set.
#[allow(clippy::too_many_arguments)]
pub fn draw_sample(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    phase: Phase,
    perturb: bool,
    seed: u64,
    step: u64,
    j: u64,
) -> Result<SampleDraw> {
    if ctx.shapes.is_empty() {
        return Err(Error::invalid("no training shapes"));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[phase.tag(), step, j]);
    let shape = rng.random_range(0..ctx.shapes.len());
    let el = ctx.world.elevation_range;
    let mut cams = vec![camera::sample_in_bin(&mut rng, 0, el)];
    if phase == Phase::MultiView {
        let k = rng.random_range(cfg.aux_views[0]..=cfg.aux_views[1]);
        if k > 0 {
            cams.extend(camera::sample_views(&mut rng, k, &[0, 1, 2, 3], el)?);
        }
    }
    let entry = &ctx.shapes[shape];
    let views = ViewFeatureSet::encode(ctx.encoder, &entry.cloud, &cams)?;
    let base = TrainingSample::new(entry.latent.clone(), views);
    let eligible = !surviving_rotations(base.latent.azimuth_tag, &base.views.bins()).is_empty();
    let chosen = rng.random::<f64>() < cfg.p_pert;
    if perturb && chosen {
        let (sample, outcome) = build_perturbed_sample(&base, &mut rng, ctx.codec);
        return Ok(SampleDraw {
            sample,
            shape,
            eligible,
            outcome: Some(outcome),
        });
    }
    Ok(SampleDraw {
        sample: base,
        shape,
        eligible,
        outcome: None,
    })
}

/// Flow time `t ∼ U[0, 1)` and standard-normal noise for one sample.
pub fn draw_time_and_noise(seed: u64, phase: Phase, step: u64, j: u64, n: usize, c: usize) -> (f64, Tensor) {
    let mut rng = stream_rng(seed, Stream::Noise, &[phase.tag(), step, j]);
    let t = rng.random::<f64>();
    let data = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    (t, Tensor::new(vec![n, c], data).expect("noise shape"))
}

/// `z_t = (1 − t)·z + t·ε` and the velocity target `ε − z`.
pub fn interpolate(clean: &Tensor, noise: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if clean.shape() != noise.shape() {
        return Err(Error::shape(format!("latent {:?} vs noise {:?}", clean.shape(), noise.shape())));
    }
    let mut z_t = clean.clone();
    let mut target = clean.clone();
    for ((z, u), (&x, &e)) in z_t
        .data_mut()
        .iter_mut()
        .zip(target.data_mut())
        .zip(clean.data().iter().zip(noise.data()))
    {
        *z = (1.0 - t) * x + t * e;
        *u = e - x;
    }
    Ok((z_t, target))
}

pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub decisions: Vec<RoutingDecision>,
}

/// Mean squared error between the predicted and the target velocity.
pub fn flow_matching_loss(
    model: &Model,
    sample: &TrainingSample,
    t: f64,
    noise: &Tensor,
    opts: &ForwardOptions,
) -> Result<f64> {
    let (z_t, target) = interpolate(&sample.latent.tokens, noise, t)?;
    let (v, _) = model.predict(&z_t, t, &sample.views, opts)?;
    let loss = v
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / v.len() as f64;
    finite_loss(loss)
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("flow-matching loss".into()))
    }
}

pub fn loss_and_grads(
    model: &Model,
    sample: &TrainingSample,
    t: f64,
    noise: &Tensor,
    opts: &ForwardOptions,
) -> Result<LossOutput> {
    let (z_t, target) = interpolate(&sample.latent.tokens, noise, t)?;
    let mut tape = Tape::new();
    let opts = opts.clone().with_trainable(true);
    let out = model.forward_on(&mut tape, &z_t, t, &sample.views, &opts)?;
    let loss_var = tape.mse_const(out.velocity, &target)?;
    let loss = finite_loss(tape.value(loss_var).data()[0])?;
    let grads = out.binding.gradients(&tape.backward(loss_var)?);
    Ok(LossOutput {
        loss,
        grads,
        decisions: out.decisions,
    })
}

/// Zeroes the primary cross-attention gradients of a perturbed sample;
/// every other group passes through.
pub fn apply_freeze(grads: &mut ParamGrads, model: &Model, sample: &TrainingSample) {
    if sample.perturbed {
        grads.zero_group(&model.params, ParamGroup::CrossPrimary);
    }
}

/// Checks straight-through tape gradients of the loss against central
/// differences of the surrogate network: hard choices and Gumbel draws are
/// frozen at the current weights and each gate's forward value becomes
/// `1 + y_soft[i, v*] − y_soft⁰[i, v*]`. Both functions agree in value and
/// gradient at the current weights.
pub fn surrogate_gradient_check(
    model: &Model,
    sample: &TrainingSample,
    t: f64,
    noise: &Tensor,
    gumbel: GumbelBase,
    gc: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let opts = ForwardOptions::train(gumbel);
    let tape_grads = loss_and_grads(model, sample, t, noise, &opts)?;
    let frozen: Vec<FrozenRouting> = tape_grads.decisions.iter().map(FrozenRouting::from_decision).collect();
    let surrogate_opts = if model.conditioning == Conditioning::Routed {
        opts.with_routing(RoutingOverride::Frozen(frozen))
    } else {
        opts
    };
    let (z_t, target) = interpolate(&sample.latent.tokens, noise, t)?;
    let objective = |tape: &mut Tape, vars: &[crate::numerics::Var]| {
        let b = Binding::from_vars(&model.params, vars)?;
        let out = model.forward_bound(tape, b, &z_t, t, &sample.views, &surrogate_opts)?;
        tape.mse_const(out.velocity, &target)
    };
    compare_with_finite_differences(&tape_grads.grads.0, objective, model.params.tensors(), gc)
}

pub fn upgrade_from_single(single: &Model) -> Result<Model> {
    Model::upgrade_from_single(single)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Perturbed samples over samples where some rotation was admissible.
    pub pert_fraction: f64,
    pub pert_skips: usize,
    pub routing_entropy_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub samples: usize,
    pub eligible: usize,
    pub perturbed: usize,
    pub skipped: usize,
}

impl TrainSummary {
    /// Mean loss over the first and last `fraction` of steps.
    pub fn loss_ends(&self, fraction: f64) -> (f64, f64) {
        let n = self.losses.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..k.min(n)]), mean(&self.losses[n.saturating_sub(k)..]))
    }
}

struct StepSample {
    loss: f64,
    grads: ParamGrads,
    entropy: Option<f64>,
    eligible: bool,
    perturbed: bool,
    skipped: bool,
}

/// Runs `cfg.steps` optimizer steps. Per-sample work runs in parallel and is
/// reduced in sample order, so results do not depend on thread count. On a
/// non-finite loss or gradient the model keeps its last good weights and
/// [`Error::Divergence`] is returned.
pub fn train(
    model: &mut Model,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    phase: Phase,
    seed: u64,
    mut on_log: impl FnMut(&TrainLogRow) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if phase == Phase::SingleView && model.conditioning != Conditioning::SingleView {
        return Err(Error::invalid("single-view phase trains a single-view model"));
    }
    let perturb = phase == Phase::MultiView && model.conditioning == Conditioning::Routed;
    let (n, c) = (model.config.tokens(), model.config.channels());
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let groups: Vec<ParamGroup> = model.params.names().iter().map(|s| ParamGroup::of(s)).collect();
    let mut summary = TrainSummary::default();

    for step in 0..cfg.steps {
        let snapshot: &Model = model;
        let results: Vec<Result<StepSample>> = (0..cfg.batch_size as u64)
            .into_par_iter()
            .map(|j| {
                let draw = draw_sample(ctx, cfg, phase, perturb, seed, step as u64, j)?;
                let (t, noise) = draw_time_and_noise(seed, phase, step as u64, j, n, c);
                let opts = ForwardOptions::train(GumbelBase {
                    seed,
                    step: step as u64,
                    sample: j,
                });
                let mut out = loss_and_grads(snapshot, &draw.sample, t, &noise, &opts).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Divergence {
                        step,
                        reason: what,
                    },
                    other => other,
                })?;
                apply_freeze(&mut out.grads, snapshot, &draw.sample);
                let entropy = (!out.decisions.is_empty()).then(|| {
                    out.decisions.iter().map(RoutingDecision::mean_entropy).sum::<f64>() / out.decisions.len() as f64
                });
                Ok(StepSample {
                    loss: out.loss,
                    grads: out.grads,
                    entropy,
                    eligible: draw.eligible,
                    perturbed: draw.sample.perturbed,
                    skipped: draw.outcome == Some(PerturbOutcome::Skipped),
                })
            })
            .collect();

        let mut grads = ParamGrads::zeros_like(&model.params);
        let (mut loss, mut entropy, mut entropy_n) = (0.0, 0.0, 0usize);
        let (mut eligible, mut perturbed, mut skipped, mut any_unperturbed) = (0, 0, 0, false);
        for r in results {
            let s = r?;
            grads.add_assign(&s.grads);
            loss += s.loss;
            if let Some(e) = s.entropy {
                entropy += e;
                entropy_n += 1;
            }
            eligible += s.eligible as usize;
            perturbed += s.perturbed as usize;
            skipped += s.skipped as usize;
            any_unperturbed |= !s.perturbed;
        }
        let b = cfg.batch_size as f64;
        loss /= b;
        grads.scale(1.0 / b);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite loss or gradient".into(),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        let active: Vec<bool> = groups
            .iter()
            .map(|g| !cfg.freeze.contains(g) && (*g != ParamGroup::CrossPrimary || any_unperturbed))
            .collect();
        let lr = cfg.lr_at(step);
        opt.step(&mut model.params, &grads, &active, lr);

        summary.steps += 1;
        summary.losses.push(loss);
        summary.samples += cfg.batch_size;
        summary.eligible += eligible;
        summary.perturbed += perturbed;
        summary.skipped += skipped;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            on_log(&TrainLogRow {
                step,
                loss,
                lr,
                pert_fraction: if eligible > 0 { perturbed as f64 / eligible as f64 } else { 0.0 },
                pert_skips: skipped,
                routing_entropy_mean: if entropy_n > 0 { entropy / entropy_n as f64 } else { 0.0 },
            })?;
        }
    }
    Ok(summary)
}
