//! Phase runners and report writers shared by the commands and the
//! acceptance harness.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use roar3d_core::config::{RunConfig, TrainConfig};
use roar3d_core::evaluation::{
    consistency_report, evaluate, summarize, ConsistencyReport, EvalContext, EvalOutput, EvalRow, EvalSummary,
    RoutingTrace,
};
use roar3d_core::model::io::{save_checkpoint, Provenance};
use roar3d_core::model::{Conditioning, Model};
use roar3d_core::trainer::{train, Phase, TrainContext, TrainLogRow, TrainShape, TrainSummary};
use roar3d_core::world::{PointCloud, ShapeRecord, Split, ViewEncoder};
use roar3d_core::Error;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{CliError, CliResult, Failure};

pub const CHECKPOINT: &str = "model.bin";
pub const LAST_GOOD: &str = "last_good.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONSISTENCY: &str = "consistency.json";

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::config(format!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn check_compatible(cfg: &RunConfig, model: &Model) -> CliResult<()> {
    let enc = &cfg.world.encoder;
    if model.config.patches != enc.patches() || model.config.feat_dim != enc.feat_dim {
        return Err(CliError::config(format!(
            "checkpoint expects {} patches × {} features, config encoder gives {} × {}",
            model.config.patches,
            model.config.feat_dim,
            enc.patches(),
            enc.feat_dim
        )));
    }
    Ok(())
}

pub fn train_shapes(model: &Model, data: &Dataset) -> CliResult<Vec<TrainShape>> {
    let shapes: Vec<TrainShape> = data
        .split(Split::Train)
        .into_iter()
        .map(|(r, c)| TrainShape::new(r, c, &model.config.codec))
        .collect();
    if shapes.is_empty() {
        return Err(CliError::config("training split is empty"));
    }
    Ok(shapes)
}

/// Where a training phase writes its log; `None` discards it.
pub struct LogSink {
    writer: Option<csv::Writer<BufWriter<File>>>,
}

impl LogSink {
    pub fn discard() -> Self {
        Self { writer: None }
    }

    pub fn csv(path: &Path) -> CliResult<Self> {
        Ok(Self {
            writer: Some(csv::Writer::from_writer(BufWriter::new(File::create(path)?))),
        })
    }

    fn write(&mut self, row: &TrainLogRow) -> roar3d_core::Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        Ok(())
    }

    fn finish(&mut self) -> CliResult<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs one phase in place. On divergence the model holds its last good
/// weights and the error is returned after the log is flushed.
pub fn run_phase(
    cfg: &RunConfig,
    model: &mut Model,
    data: &Dataset,
    phase: Phase,
    log: &mut LogSink,
) -> CliResult<TrainSummary> {
    check_compatible(cfg, model)?;
    let shapes = train_shapes(model, data)?;
    let encoder = ViewEncoder::new(cfg.world.encoder.clone());
    let codec = model.config.codec.clone();
    let ctx = TrainContext {
        shapes: &shapes,
        encoder: &encoder,
        world: &cfg.world,
        codec: &codec,
    };
    let tc: &TrainConfig = match phase {
        Phase::SingleView => &cfg.single,
        Phase::MultiView => &cfg.multi,
    };
    let result = train(model, &ctx, tc, phase, cfg.seed, |row| log.write(row));
    log.finish()?;
    Ok(result?)
}

pub fn provenance(cfg: &RunConfig, phase: &str, steps: usize) -> Provenance {
    Provenance {
        phase: phase.to_string(),
        seed: cfg.seed,
        step: steps as u64,
        config_hash: cfg.hash(),
    }
}

/// Trains a phase inside `out`: log, checkpoint and summary. A diverged run
/// saves its last good weights to [`LAST_GOOD`] and exits with the divergence
/// code.
pub fn train_into(cfg: &RunConfig, model: &mut Model, data: &Dataset, phase: Phase, out: &Path) -> CliResult<TrainSummary> {
    let mut log = LogSink::csv(&out.join(TRAIN_LOG))?;
    match run_phase(cfg, model, data, phase, &mut log) {
        Ok(summary) => {
            save_checkpoint(model, &out.join(CHECKPOINT), provenance(cfg, phase.name(), summary.steps))?;
            fs::write(out.join(TRAIN_SUMMARY), serde_json::to_string_pretty(&summary)?)?;
            Ok(summary)
        }
        Err(e) if e.kind == Failure::Divergence => {
            save_checkpoint(model, &out.join(LAST_GOOD), provenance(cfg, &format!("{}-diverged", phase.name()), 0))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

pub fn upgrade(single: &Model, variant: Conditioning) -> CliResult<Model> {
    if single.conditioning != Conditioning::SingleView {
        return Err(CliError::config(format!(
            "upgrade needs a single-view checkpoint, got {}",
            single.conditioning.name()
        )));
    }
    let model = match variant {
        Conditioning::Routed => Model::upgrade_from_single(single)?,
        Conditioning::Concat => Model::concat_from_single(single)?,
        Conditioning::SingleView => return Err(CliError::config("upgrade target must be routed or concat")),
    };
    Ok(model)
}

/// Held-out shapes, truncated to `eval.max_shapes` when that is positive.
pub fn eval_shapes(cfg: &RunConfig, data: &Dataset) -> CliResult<Vec<(ShapeRecord, PointCloud)>> {
    let mut shapes = data.split(Split::Test);
    if cfg.eval.max_shapes > 0 {
        shapes.truncate(cfg.eval.max_shapes);
    }
    if shapes.is_empty() {
        return Err(CliError::config("test split is empty"));
    }
    Ok(shapes)
}

pub fn run_eval(cfg: &RunConfig, model: &Model, shapes: &[(ShapeRecord, PointCloud)]) -> CliResult<EvalOutput> {
    check_compatible(cfg, model)?;
    let encoder = ViewEncoder::new(cfg.world.encoder.clone());
    let ctx = EvalContext {
        encoder: &encoder,
        world: &cfg.world,
        sampler_steps: cfg.eval.sampler_steps,
        seed: cfg.seed,
    };
    Ok(evaluate(model, &ctx, shapes, &cfg.eval.view_counts)?)
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    shape_id: &'a str,
    view_count: usize,
    cd_x1000: f64,
    f1_0_1: f64,
    f1_0_05: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(MetricsRow {
            shape_id: &r.shape_id,
            view_count: r.view_count,
            cd_x1000: r.metrics.cd_x1000(),
            f1_0_1: r.metrics.f1_0_1,
            f1_0_05: r.metrics.f1_0_05,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summaries(dir: &Path, summaries: &[EvalSummary]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_CSV))?;
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(summaries)?)?;
    Ok(())
}

/// A consistency report plus the view counts of the traces behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFile {
    pub view_counts: Vec<usize>,
    #[serde(flatten)]
    pub report: ConsistencyReport,
}

impl ConsistencyFile {
    pub fn from_traces(traces: &[RoutingTrace]) -> Self {
        let mut view_counts: Vec<usize> = traces.iter().map(|t| t.views).collect();
        view_counts.sort_unstable();
        view_counts.dedup();
        Self {
            view_counts,
            report: consistency_report(traces),
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Writes metrics, summaries and, for routed models, the consistency report
/// over the traces at the largest evaluated view count.
pub fn write_eval(dir: &Path, output: &EvalOutput) -> CliResult<Vec<EvalSummary>> {
    write_metrics_csv(&dir.join(METRICS), &output.rows)?;
    let summaries = summarize(&output.rows);
    write_summaries(dir, &summaries)?;
    if let Some(k) = summaries.iter().map(|s| s.view_count).max() {
        let traces = output.traces_at(k);
        if !traces.is_empty() {
            ConsistencyFile::from_traces(&traces).write(&dir.join(CONSISTENCY))?;
        }
    }
    Ok(summaries)
}

/// Trace files named on the command line; directories contribute their
/// `.rtrc` files in name order.
pub fn collect_trace_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if !p.exists() {
            return Err(CliError::missing(p));
        }
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|f| f.extension().is_some_and(|e| e == "rtrc"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::missing(Path::new("<no .rtrc traces>")));
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> CliResult<RoutingTrace> {
    let f = File::open(path).map_err(|_| CliError::missing(path))?;
    Ok(RoutingTrace::read_binary(std::io::BufReader::new(f))?)
}

pub fn write_trace(path: &Path, trace: &RoutingTrace) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    trace.write_binary(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_out_refuses_non_empty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        prepare_out(&out, false).unwrap();
        prepare_out(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert_eq!(prepare_out(&out, false).unwrap_err().exit_code(), 2);
        prepare_out(&out, true).unwrap();
    }

    #[test]
    fn trace_paths_from_directory_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let tr = RoutingTrace::new(2, 2, 2, 2, vec![0, 1, 0, 1, 1, 1, 0, 0]).unwrap();
        for name in ["b.rtrc", "a.rtrc"] {
            write_trace(&dir.path().join(name), &tr).unwrap();
        }
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        let paths = collect_trace_paths(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.rtrc", "b.rtrc"]);
        assert_eq!(read_trace(&paths[0]).unwrap(), tr);
        assert_eq!(collect_trace_paths(&[dir.path().join("zzz")]).unwrap_err().exit_code(), 3);
    }
}
