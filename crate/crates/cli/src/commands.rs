use std::fs;
use std::path::Path;

use roar3d_core::config::RunConfig;
use roar3d_core::evaluation::{sample_shape, EvalContext, RoutingTrace, TraceMeta};
use roar3d_core::model::io::{load_checkpoint, save_checkpoint};
use roar3d_core::model::{latent_decode, Conditioning, Model};
use roar3d_core::numerics::{write_tensors, Tensor};
use roar3d_core::trainer::Phase;
use roar3d_core::world::{ShapeClass, ViewEncoder};
use serde::Serialize;

use crate::dataset::{cloud_tensor, Dataset};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, ConsistencyFile, CHECKPOINT, CONSISTENCY};
use crate::settings::{self, Overrides};
use crate::{Command, Common, Variant};

pub const SAMPLE: &str = "sample.bin";
pub const SAMPLE_META: &str = "sample.json";
pub const TRACE: &str = "trace.rtrc";
pub const TRACE_META: &str = "trace.json";

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common, classes } => gen_data(&common, classes),
        Command::TrainSingle { common, data } => train_single(&common, &data),
        Command::Upgrade {
            common,
            checkpoint,
            variant,
        } => upgrade(&common, &checkpoint, variant),
        Command::TrainMv {
            common,
            data,
            checkpoint,
            p_pert,
        } => train_mv(&common, &data, &checkpoint, p_pert),
        Command::Sample {
            common,
            data,
            checkpoint,
            shape,
            views,
            trace,
        } => sample(&common, &data, &checkpoint, &shape, views, trace),
        Command::Eval {
            common,
            data,
            checkpoint,
            views,
        } => eval(&common, &data, &checkpoint, views),
        Command::AnalyzeRouter {
            common,
            traces,
            data,
            checkpoint,
            views,
        } => analyze_router(&common, &traces, data.as_deref().zip(checkpoint.as_deref()), views),
    }
}

/// Resolves the config and prepares the output directory with the resolved
/// config written into it.
fn begin(common: &Common, overrides: Overrides) -> CliResult<RunConfig> {
    let overrides = Overrides {
        seed: common.seed,
        ..overrides
    };
    let cfg = settings::resolve(common.config.as_deref(), &overrides)?;
    pipeline::prepare_out(&common.out, common.force)?;
    settings::write_resolved(&common.out, &cfg)?;
    Ok(cfg)
}

fn load_model(path: &Path) -> CliResult<Model> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    Ok(load_checkpoint(path)?.0)
}

fn gen_data(common: &Common, classes: Option<Vec<String>>) -> CliResult<()> {
    let mut cfg = settings::resolve(common.config.as_deref(), &Overrides {
        seed: common.seed,
        ..Overrides::default()
    })?;
    if let Some(names) = classes {
        cfg.data.classes = names
            .iter()
            .map(|n| n.trim().parse::<ShapeClass>())
            .collect::<Result<_, _>>()?;
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    }
    pipeline::prepare_out(&common.out, common.force)?;
    settings::write_resolved(&common.out, &cfg)?;
    Dataset::generate(&cfg)?.write(&common.out)
}

fn train_single(common: &Common, data: &Path) -> CliResult<()> {
    let cfg = begin(common, Overrides::default())?;
    let data = Dataset::load(data)?;
    let mut model = Model::new(cfg.model.clone(), Conditioning::SingleView, cfg.seed)?;
    pipeline::train_into(&cfg, &mut model, &data, Phase::SingleView, &common.out)?;
    Ok(())
}

fn upgrade(common: &Common, checkpoint: &Path, variant: Variant) -> CliResult<()> {
    let single = load_model(checkpoint)?;
    let cfg = begin(common, Overrides::default())?;
    let conditioning = match variant {
        Variant::Routed => Conditioning::Routed,
        Variant::Concat => Conditioning::Concat,
    };
    let model = pipeline::upgrade(&single, conditioning)?;
    save_checkpoint(&model, &common.out.join(CHECKPOINT), pipeline::provenance(&cfg, "upgrade", 0))?;
    Ok(())
}

fn train_mv(common: &Common, data: &Path, checkpoint: &Path, p_pert: Option<f64>) -> CliResult<()> {
    let mut model = load_model(checkpoint)?;
    if model.conditioning == Conditioning::SingleView {
        return Err(CliError::config("multi-view training needs an upgraded checkpoint; run `upgrade` first"));
    }
    let cfg = begin(common, Overrides {
        p_pert,
        ..Overrides::default()
    })?;
    let data = Dataset::load(data)?;
    pipeline::train_into(&cfg, &mut model, &data, Phase::MultiView, &common.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    shape_id: &'a str,
    view_count: usize,
    seed: u64,
    points: usize,
    empty: bool,
}

#[derive(Serialize)]
struct TraceSidecar<'a> {
    timesteps: usize,
    blocks: usize,
    tokens: usize,
    views: usize,
    #[serde(flatten)]
    meta: &'a TraceMeta,
}

fn write_trace_with_sidecar(dir: &Path, stem: &str, trace: &RoutingTrace, meta: &TraceMeta) -> CliResult<()> {
    pipeline::write_trace(&dir.join(format!("{stem}.rtrc")), trace)?;
    let side = TraceSidecar {
        timesteps: trace.timesteps,
        blocks: trace.blocks,
        tokens: trace.tokens,
        views: trace.views,
        meta,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

fn sample(common: &Common, data: &Path, checkpoint: &Path, shape: &str, views: usize, trace: bool) -> CliResult<()> {
    if views == 0 {
        return Err(CliError::config("--views must be at least 1"));
    }
    let model = load_model(checkpoint)?;
    if trace && model.conditioning != Conditioning::Routed {
        return Err(CliError::config(format!("--trace needs a routed model, got {}", model.conditioning.name())));
    }
    let data = Dataset::load(data)?;
    let (record, cloud) = data
        .find(shape)
        .ok_or_else(|| CliError::config(format!("no shape `{shape}` in the dataset")))?;
    let cfg = begin(common, Overrides::default())?;
    pipeline::check_compatible(&cfg, &model)?;
    let encoder = ViewEncoder::new(cfg.world.encoder.clone());
    let ctx = EvalContext {
        encoder: &encoder,
        world: &cfg.world,
        sampler_steps: cfg.eval.sampler_steps,
        seed: cfg.seed,
    };
    let out = sample_shape(&model, &ctx, &record, &cloud, views)?;
    let decoded = latent_decode(&out.latent, &model.config.codec);
    write_tensors(
        common.out.join(SAMPLE),
        &[
            ("points".to_string(), cloud_tensor(&decoded)),
            ("latent".to_string(), out.latent.tokens.clone()),
            ("azimuth_tag".to_string(), Tensor::scalar(out.latent.azimuth_tag)),
        ],
    )?;
    let meta = SampleMeta {
        shape_id: shape,
        view_count: views,
        seed: cfg.seed,
        points: decoded.len(),
        empty: decoded.is_empty(),
    };
    fs::write(common.out.join(SAMPLE_META), serde_json::to_string_pretty(&meta)?)?;
    if trace {
        let tr = RoutingTrace::from_routing(&out.routing, views)?;
        let tm = TraceMeta {
            shape_id: shape.to_string(),
            view_count: views,
            seed: cfg.seed,
            checkpoint: checkpoint.display().to_string(),
        };
        write_trace_with_sidecar(&common.out, "trace", &tr, &tm)?;
    }
    Ok(())
}

fn eval(common: &Common, data: &Path, checkpoint: &Path, views: Option<Vec<usize>>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let data = Dataset::load(data)?;
    let cfg = begin(common, Overrides {
        view_counts: views,
        ..Overrides::default()
    })?;
    let shapes = pipeline::eval_shapes(&cfg, &data)?;
    let output = pipeline::run_eval(&cfg, &model, &shapes)?;
    pipeline::write_eval(&common.out, &output)?;
    Ok(())
}

fn analyze_router(
    common: &Common,
    inputs: &[std::path::PathBuf],
    fresh: Option<(&Path, &Path)>,
    views: Option<usize>,
) -> CliResult<()> {
    let traces = match fresh {
        None => {
            let paths = pipeline::collect_trace_paths(inputs)?;
            let traces = paths.iter().map(|p| pipeline::read_trace(p)).collect::<CliResult<Vec<_>>>()?;
            begin(common, Overrides::default())?;
            traces
        }
        Some((data, checkpoint)) => {
            if !inputs.is_empty() {
                return Err(CliError::config("pass trace files or --data/--checkpoint, not both"));
            }
            let model = load_model(checkpoint)?;
            if model.conditioning != Conditioning::Routed {
                return Err(CliError::config("router analysis needs a routed model"));
            }
            let data = Dataset::load(data)?;
            let base = settings::resolve(common.config.as_deref(), &Overrides::default())?;
            let k = views.or(base.eval.view_counts.iter().copied().max()).unwrap_or(1);
            let cfg = begin(common, Overrides {
                view_counts: Some(vec![k]),
                ..Overrides::default()
            })?;
            let shapes = pipeline::eval_shapes(&cfg, &data)?;
            let output = pipeline::run_eval(&cfg, &model, &shapes)?;
            let traces = output.traces_at(k);
            let dir = common.out.join("traces");
            fs::create_dir_all(&dir)?;
            for ((record, _), tr) in shapes.iter().zip(&traces) {
                let tm = TraceMeta {
                    shape_id: record.shape_id.clone(),
                    view_count: k,
                    seed: cfg.seed,
                    checkpoint: checkpoint.display().to_string(),
                };
                write_trace_with_sidecar(&dir, &record.shape_id, tr, &tm)?;
            }
            traces
        }
    };
    ConsistencyFile::from_traces(&traces).write(&common.out.join(CONSISTENCY))
}
