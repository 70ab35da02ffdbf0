//! Held-out evaluation: sample a latent per shape and view count, decode it
//! and score it against the ground-truth cloud.

pub mod metrics;
pub mod trace;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{chamfer_distance, f_score, geometry_metrics};
pub use trace::{
    consistency_report, cross_block_consistency, cross_timestep_consistency, global_consistency, ConsistencyReport,
    ConsistencyStat, RoutingTrace, TraceMeta,
};

use crate::model::{latent_decode, sample_latent, Model, SampleOutput};
use crate::rng::hash_key;
use crate::world::dataset::evaluation_cameras;
use crate::world::{PointCloud, ShapeRecord, ViewEncoder, ViewFeatureSet, WorldConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMetrics {
    pub cd: f64,
    /// Percent.
    pub f1_0_1: f64,
    /// Percent.
    pub f1_0_05: f64,
}

impl GeoMetrics {
    pub fn cd_x1000(&self) -> f64 {
        1000.0 * self.cd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub shape_id: String,
    pub view_count: usize,
    pub metrics: GeoMetrics,
    /// The decoded latent had no occupied cell; scored as a single point at
    /// the origin.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub view_count: usize,
    pub shapes: usize,
    pub cd_mean: f64,
    /// Standard error of the mean CD.
    pub cd_sem: f64,
    pub f1_0_1_mean: f64,
    pub f1_0_05_mean: f64,
    pub empty: usize,
}

/// Shared sampling inputs for one evaluation run.
pub struct EvalContext<'a> {
    pub encoder: &'a ViewEncoder,
    pub world: &'a WorldConfig,
    pub sampler_steps: usize,
    pub seed: u64,
}

/// The first `count` held-out views of a shape; the first one is primary.
pub fn shape_views(ctx: &EvalContext, record: &ShapeRecord, cloud: &PointCloud, count: usize) -> Result<ViewFeatureSet> {
    if count == 0 {
        return Err(Error::invalid("view count must be positive"));
    }
    let cams = evaluation_cameras(record.seed, count, ctx.world.elevation_range);
    ViewFeatureSet::encode(ctx.encoder, cloud, &cams)
}

/// Noise seed of one shape; shared by every view count so that comparisons
/// across counts are paired.
pub fn shape_noise_seed(seed: u64, record: &ShapeRecord) -> u64 {
    hash_key(&[seed, record.seed])
}

pub fn sample_shape(
    model: &Model,
    ctx: &EvalContext,
    record: &ShapeRecord,
    cloud: &PointCloud,
    count: usize,
) -> Result<SampleOutput> {
    let views = shape_views(ctx, record, cloud, count)?;
    sample_latent(model, &views, shape_noise_seed(ctx.seed, record), ctx.sampler_steps)
}

/// Scores a decoded cloud, substituting the origin for an empty decode.
pub fn score(decoded: &PointCloud, truth: &PointCloud) -> Result<(GeoMetrics, bool)> {
    if decoded.is_empty() {
        let origin = PointCloud::new(vec![[0.0; 3]]);
        return Ok((geometry_metrics(&origin, truth)?, true));
    }
    Ok((geometry_metrics(decoded, truth)?, false))
}

/// Per-sample results in shape-major, view-count-minor order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    /// Routing of each row's sampler run; `None` for models without a router.
    pub traces: Vec<Option<RoutingTrace>>,
}

impl EvalOutput {
    /// Traces recorded at `view_count`.
    pub fn traces_at(&self, view_count: usize) -> Vec<RoutingTrace> {
        self.rows
            .iter()
            .zip(&self.traces)
            .filter(|(r, _)| r.view_count == view_count)
            .filter_map(|(_, t)| t.clone())
            .collect()
    }
}

pub fn evaluate(
    model: &Model,
    ctx: &EvalContext,
    shapes: &[(ShapeRecord, PointCloud)],
    view_counts: &[usize],
) -> Result<EvalOutput> {
    if shapes.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let per_shape: Vec<Result<Vec<(EvalRow, Option<RoutingTrace>)>>> = shapes
        .par_iter()
        .map(|(record, cloud)| {
            view_counts
                .iter()
                .map(|&k| {
                    let out = sample_shape(model, ctx, record, cloud, k)?;
                    let decoded = latent_decode(&out.latent, &model.config.codec);
                    let (metrics, empty) = score(&decoded, cloud)?;
                    let trace = if out.routing.is_empty() {
                        None
                    } else {
                        Some(RoutingTrace::from_routing(&out.routing, k)?)
                    };
                    let row = EvalRow {
                        shape_id: record.shape_id.clone(),
                        view_count: k,
                        metrics,
                        empty,
                    };
                    Ok((row, trace))
                })
                .collect()
        })
        .collect();
    let mut output = EvalOutput {
        rows: Vec::new(),
        traces: Vec::new(),
    };
    for r in per_shape {
        for (row, trace) in r? {
            output.rows.push(row);
            output.traces.push(trace);
        }
    }
    Ok(output)
}

/// Per view count, in the order of first appearance.
pub fn summarize(rows: &[EvalRow]) -> Vec<EvalSummary> {
    let mut counts: Vec<usize> = Vec::new();
    for r in rows {
        if !counts.contains(&r.view_count) {
            counts.push(r.view_count);
        }
    }
    counts
        .into_iter()
        .map(|k| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.view_count == k).collect();
            let n = sel.len() as f64;
            let cds: Vec<f64> = sel.iter().map(|r| r.metrics.cd).collect();
            let (cd_mean, cd_sem) = mean_sem(&cds);
            EvalSummary {
                view_count: k,
                shapes: sel.len(),
                cd_mean,
                cd_sem,
                f1_0_1_mean: sel.iter().map(|r| r.metrics.f1_0_1).sum::<f64>() / n,
                f1_0_05_mean: sel.iter().map(|r| r.metrics.f1_0_05).sum::<f64>() / n,
                empty: sel.iter().filter(|r| r.empty).count(),
            }
        })
        .collect()
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_sem(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
