//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ROAR_ACCEPTANCE_ONLY=1,4,9` selects criteria. The process exits non-zero
//! on any failure only when `ROAR_ACCEPTANCE_STRICT=1`, so that the training
//! outcome of criteria 5 and 6 is reported rather than gating the test suite.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use roar3d_cli::dataset::Dataset;
use roar3d_cli::pipeline::{eval_shapes, run_eval, run_phase, upgrade, LogSink};
use roar3d_cli::settings::load_config;
use roar3d_core::config::TrainConfig;
use roar3d_core::evaluation::{
    chamfer_distance, cross_block_consistency, cross_timestep_consistency, f_score, global_consistency, EvalRow,
    RoutingTrace,
};
use roar3d_core::model::{
    latent_encode, Conditioning, ForwardOptions, GumbelBase, LatentTokens, Model, ModelConfig, ParamGroup,
    RoutingOverride, CROSS_ATTENTION,
};
use roar3d_core::numerics::{GradCheckOptions, Tape, Tensor};
use roar3d_core::trainer::{
    build_perturbed_sample, draw_sample, perturbation_invariant_holds, prepare_shapes, surrogate_gradient_check,
    train, Phase, PerturbOutcome, TrainContext, TrainingSample,
};
use roar3d_core::world::{
    azimuth_bin, dataset, Camera, EncoderConfig, PointCloud, ShapeClass, Split, ViewEncoder, ViewFeatureSet,
    WorldConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `v` random views with view `j` in bin `j mod 4`; view 0 is primary.
fn random_views(cfg: &ModelConfig, v: usize, seed: u64) -> ViewFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..v).map(|_| randn(&mut rng, cfg.patches, cfg.feat_dim)).collect();
    let cameras = (0..v)
        .map(|j| Camera::new(90.0 * (j % 4) as f64 + rng.random_range(-40.0..40.0), rng.random_range(-30.0..30.0)))
        .collect();
    ViewFeatureSet::new(features, cameras, Some(0)).unwrap()
}

fn random_latent(cfg: &ModelConfig, seed: u64) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), cfg.tokens(), cfg.channels())
}

/// A jittered single-view model and its routed upgrade.
fn upgraded_pair(cfg: &ModelConfig, seed: u64) -> (Model, Model) {
    let mut single = Model::new(cfg.clone(), Conditioning::SingleView, seed).unwrap();
    single.jitter(seed ^ 0x5a5a, 0.2);
    let routed = Model::upgrade_from_single(&single).unwrap();
    (single, routed)
}

/// The single-stream model holding the shared tensors of `routed`.
fn baseline_of(routed: &Model) -> Model {
    let mut single = Model::new(routed.config.clone(), Conditioning::SingleView, 0).unwrap();
    for name in single.params.names().to_vec() {
        single.params.insert(name.clone(), routed.params.get(&name).unwrap().clone());
    }
    single
}

fn train_opts(seed: u64) -> ForwardOptions {
    ForwardOptions::train(GumbelBase {
        seed,
        step: seed % 7,
        sample: 1,
    })
}

fn micro_world() -> WorldConfig {
    WorldConfig {
        points: 256,
        encoder: EncoderConfig {
            patch_grid: 2,
            feat_dim: 6,
            ..EncoderConfig::default()
        },
        ..WorldConfig::default()
    }
}

fn ste_gradients() -> Verdict {
    let cfg = ModelConfig::micro();
    // Central differences of an O(1) loss carry ~3e-10 of rounding noise at
    // h = 1e-5, so entries below 1e-5 are compared against 1e-9 absolute.
    let opts = GradCheckOptions {
        h: 1e-5,
        rtol: 1e-4,
        floor: 1e-5,
        ..GradCheckOptions::default()
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut groups = Vec::new();
    for seed in 0..20u64 {
        let (_, mut routed) = upgraded_pair(&cfg, seed);
        routed.jitter(seed + 100, 0.3);
        let sample = TrainingSample::new(
            LatentTokens::new(random_latent(&cfg, seed), 0.0).unwrap(),
            random_views(&cfg, 3, seed + 200),
        );
        let t = ChaCha8Rng::seed_from_u64(seed).random_range(0.05..0.95);
        let gumbel = GumbelBase {
            seed,
            step: 0,
            sample: 0,
        };
        let report = surrogate_gradient_check(&routed, &sample, t, &random_latent(&cfg, seed + 300), gumbel, &opts).unwrap();
        let covered = report.params.iter().filter(|p| p.checked > 0).count();
        if !report.passed() || covered != routed.params.len() {
            failed.push(seed);
        }
        worst = worst.max(report.max_rel_error());
        for name in routed.params.names() {
            if !groups.contains(&ParamGroup::of(name)) {
                groups.push(ParamGroup::of(name));
            }
        }
    }
    let groups = groups.len();
    Verdict::new(
        failed.is_empty(),
        format!("max rel err {worst:.2e} over 20 seeds, every tensor of {groups} groups; failing seeds {failed:?}"),
    )
}

fn single_view_reduction() -> Verdict {
    let cfg = ModelConfig::micro();
    let mut worst: f64 = 0.0;
    for draw in 0..50u64 {
        let (single, mut routed) = upgraded_pair(&cfg, draw);
        // Odd draws are fresh upgrades; even draws also move the added weights.
        let baseline = if draw % 2 == 0 {
            routed.jitter(draw + 1000, 0.3);
            baseline_of(&routed)
        } else {
            single
        };
        let views = random_views(&cfg, 1, draw + 1);
        let z = random_latent(&cfg, draw + 2);
        let t = ChaCha8Rng::seed_from_u64(draw).random_range(0.0..1.0);
        for opts in [ForwardOptions::inference(), train_opts(draw)] {
            let (a, _) = routed.predict(&z, t, &views, &opts).unwrap();
            let (b, _) = baseline.predict(&z, t, &views, &opts).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    Verdict::new(worst <= 1e-12, format!("max |diff| {worst:.3e} over 50 draws"))
}

fn post_upgrade_identity() -> Verdict {
    let cfg = ModelConfig::micro();
    let mut exact = 0;
    for draw in 0..10u64 {
        let (single, routed) = upgraded_pair(&cfg, draw + 77);
        let views = random_views(&cfg, 1 + (draw as usize % 4), draw);
        let z = random_latent(&cfg, draw + 5);
        let t = ChaCha8Rng::seed_from_u64(draw).random_range(0.0..1.0);
        let forced = ForwardOptions::inference().with_routing(RoutingOverride::ForcePrimary);
        let (a, _) = routed.predict(&z, t, &views, &forced).unwrap();
        let (b, _) = single.predict(&z, t, &views, &ForwardOptions::inference()).unwrap();
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        exact += same as usize;
    }
    Verdict::new(exact == 10, format!("{exact}/10 inputs bit-identical"))
}

fn cost_contract() -> Verdict {
    let cfg = ModelConfig::micro();
    let (_, mut routed) = upgraded_pair(&cfg, 3);
    routed.jitter(4, 0.4);
    let mut lines = Vec::new();
    let mut pass = true;
    for v in [1usize, 2, 4, 8, 12] {
        let views = random_views(&cfg, v, v as u64);
        for opts in [ForwardOptions::inference(), train_opts(v as u64)] {
            let mut tape = Tape::new();
            routed.forward_on(&mut tape, &random_latent(&cfg, 9), 0.5, &views, &opts).unwrap();
            let calls: Vec<_> = tape.counters().calls_labeled(CROSS_ATTENTION).collect();
            pass &= calls.len() == cfg.blocks;
            pass &= calls.iter().all(|c| c.keys_per_query == vec![cfg.patches; cfg.tokens()]);
        }
        lines.push(v.to_string());
    }
    Verdict::new(pass, format!("keys per token == S = {} for V in {{{}}}", cfg.patches, lines.join(",")))
}

struct MicroFixture {
    shapes: Vec<roar3d_core::trainer::TrainShape>,
    encoder: ViewEncoder,
    world: WorldConfig,
    cfg: ModelConfig,
}

impl MicroFixture {
    fn new() -> Self {
        let world = micro_world();
        let cfg = ModelConfig::micro();
        let records =
            dataset::build_records(11, [(Split::Train, 16), (Split::Val, 0), (Split::Test, 0)], &ShapeClass::ALL).unwrap();
        Self {
            shapes: prepare_shapes(&records, &world, &cfg.codec).unwrap(),
            encoder: ViewEncoder::new(world.encoder.clone()),
            world,
            cfg,
        }
    }

    fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            shapes: &self.shapes,
            encoder: &self.encoder,
            world: &self.world,
            codec: &self.cfg.codec,
        }
    }
}

fn perturbation_sampler() -> Verdict {
    let fx = MicroFixture::new();
    let tc = TrainConfig {
        p_pert: 0.2,
        ..TrainConfig::default()
    };
    let target = 100_000;
    let (mut perturbed, mut eligible, mut draws, mut violations) = (0usize, 0usize, 0u64, 0usize);
    while perturbed < target {
        let d = draw_sample(&fx.ctx(), &tc, Phase::MultiView, true, 21, draws / 16, draws % 16).unwrap();
        draws += 1;
        eligible += d.eligible as usize;
        if d.sample.perturbed {
            perturbed += 1;
            let tag_bin = azimuth_bin(d.sample.latent.azimuth_tag);
            if !perturbation_invariant_holds(&d.sample) || d.sample.views.bins().contains(&tag_bin) {
                violations += 1;
            }
        }
    }
    let fraction = perturbed as f64 / eligible as f64;

    // Every bin occupied: no rotation survives.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut skips, degenerate) = (0, 1000);
    for k in 0..degenerate {
        let mut views = random_views(&fx.cfg, 4 + k % 5, k as u64);
        views.cameras = (0..views.len()).map(|j| Camera::new(90.0 * (j % 4) as f64 + rng.random_range(-44.0..44.0), 0.0)).collect();
        let base = TrainingSample::new(
            latent_encode(&fx.shapes[k % fx.shapes.len()].cloud, &fx.cfg.codec),
            views,
        );
        let (s, outcome) = build_perturbed_sample(&base, &mut rng, &fx.cfg.codec);
        if outcome == PerturbOutcome::Skipped && s == base && perturbation_invariant_holds(&s) {
            skips += 1;
        }
    }
    let pass = violations == 0 && (fraction - 0.2).abs() <= 0.01 && skips == degenerate;
    Verdict::new(
        pass,
        format!(
            "{perturbed} perturbed of {draws} draws, {violations} violations, fraction {fraction:.4} of eligible; {skips}/{degenerate} all-bins inputs skipped"
        ),
    )
}

fn freeze_correctness() -> Verdict {
    let fx = MicroFixture::new();
    let (_, mut model) = upgraded_pair(&fx.cfg, 8);
    let before = model.clone();
    // At most two auxiliary views, so some rotation always survives.
    let tc = TrainConfig {
        steps: 500,
        batch_size: 4,
        lr: 1e-3,
        lr_min: 1e-4,
        p_pert: 1.0,
        aux_views: [1, 2],
        ..TrainConfig::default()
    };
    let summary = train(&mut model, &fx.ctx(), &tc, Phase::MultiView, 8, |_| Ok(())).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (mut primary, mut identical, mut aux_moved) = (0, 0, false);
    for ((name, a), (_, b)) in model.params.iter().zip(before.params.iter()) {
        match ParamGroup::of(name) {
            ParamGroup::CrossPrimary => {
                primary += 1;
                identical += (bits(a) == bits(b)) as usize;
            }
            ParamGroup::CrossAux => aux_moved |= a != b,
            _ => {}
        }
    }
    let all_perturbed = summary.perturbed == summary.samples;
    Verdict::new(
        primary > 0 && identical == primary && all_perturbed && aux_moved,
        format!(
            "{} steps, {}/{} samples perturbed, {identical}/{primary} primary-stream tensors bit-identical, auxiliary stream moved: {aux_moved}",
            summary.steps, summary.perturbed, summary.samples
        ),
    )
}

fn euclid(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn oracle_nearest(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| b.points.iter().map(|q| euclid(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn oracle_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let (ab, ba) = (oracle_nearest(a, b), oracle_nearest(b, a));
    ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64
}

fn oracle_f_score(a: &PointCloud, b: &PointCloud, th: f64) -> f64 {
    let hits = |d: Vec<f64>| d.iter().filter(|&&x| x <= th).count();
    let p = hits(oracle_nearest(a, b)) as f64 / a.len() as f64;
    let r = hits(oracle_nearest(b, a)) as f64 / b.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        200.0 * (p * r) / (p + r)
    }
}

/// Agreeing pairs over all pairs, enumerated over `(t, l)` slot pairs of the
/// same token for which `same_group` holds.
fn oracle_consistency(tr: &RoutingTrace, same_group: impl Fn((usize, usize), (usize, usize)) -> bool) -> Option<f64> {
    let slots: Vec<(usize, usize)> = (0..tr.timesteps).flat_map(|t| (0..tr.blocks).map(move |l| (t, l))).collect();
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..tr.tokens {
        for x in 0..slots.len() {
            for y in x + 1..slots.len() {
                if same_group(slots[x], slots[y]) {
                    total += 1;
                    agree += (tr.get(slots[x].0, slots[x].1, i) == tr.get(slots[y].0, slots[y].1, i)) as u64;
                }
            }
        }
    }
    (total > 0).then(|| agree as f64 / total as f64)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut metric_ok = 0;
    for i in 0..100 {
        let cloud = |rng: &mut ChaCha8Rng, spread: f64| {
            let n = rng.random_range(1..=500);
            PointCloud::new((0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(-spread..spread))).collect())
        };
        let a = cloud(&mut rng, 1.0);
        let b = cloud(&mut rng, [1.0, 0.25, 0.06][i % 3]);
        let same = chamfer_distance(&a, &b).unwrap() == oracle_chamfer(&a, &b)
            && f_score(&a, &b, 0.1).unwrap() == oracle_f_score(&a, &b, 0.1)
            && f_score(&a, &b, 0.05).unwrap() == oracle_f_score(&a, &b, 0.05);
        metric_ok += same as usize;
    }
    let mut trace_ok = 0;
    for _ in 0..50 {
        let (t, l, n, v) = (
            rng.random_range(2..=6),
            rng.random_range(2..=4),
            rng.random_range(1..=8),
            rng.random_range(2..=5),
        );
        let idx = (0..t * l * n).map(|_| rng.random_range(0..v) as u16).collect();
        let tr = RoutingTrace::new(t, l, n, v, idx).unwrap();
        let same = cross_block_consistency(&tr) == oracle_consistency(&tr, |a, b| a.0 == b.0)
            && cross_timestep_consistency(&tr) == oracle_consistency(&tr, |a, b| a.1 == b.1)
            && global_consistency(&tr) == oracle_consistency(&tr, |_, _| true);
        trace_ok += same as usize;
    }
    Verdict::new(
        metric_ok == 100 && trace_ok == 50,
        format!("{metric_ok}/100 cloud pairs and {trace_ok}/50 traces exact"),
    )
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn roar3d(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_roar3d")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Relative path to contents for every file below `dir`, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = configs_dir().join("smoke.toml");
    let c = cfg.to_str().unwrap();
    let p = |x: &str| root.join(x).to_str().unwrap().to_string();
    roar3d(&["gen-data", "--config", c, "--out", &p("data")]);
    roar3d(&["train-single", "--config", c, "--data", &p("data"), "--out", &p("single")]);
    roar3d(&["upgrade", "--config", c, "--checkpoint", &p("single/model.bin"), "--out", &p("up")]);
    roar3d(&["train-mv", "--config", c, "--data", &p("data"), "--checkpoint", &p("up/model.bin"), "--out", &p("mv")]);
    let mut compared = 0;
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        roar3d(&[
            "sample", "--config", c, "--data", &p("data"), "--checkpoint", &p("mv/model.bin"), "--shape", "test-00002",
            "--views", "3", "--trace", "--out", &p(&format!("sample_{run}")),
        ]);
        roar3d(&[
            "eval", "--config", c, "--data", &p("data"), "--checkpoint", &p("mv/model.bin"), "--out",
            &p(&format!("eval_{run}")),
        ]);
    }
    for kind in ["sample", "eval"] {
        let a = snapshot(&root.join(format!("{kind}_a")));
        let b = snapshot(&root.join(format!("{kind}_b")));
        compared += a.len();
        if a != b || a.is_empty() {
            differing.push(kind);
        }
    }
    Verdict::new(
        differing.is_empty(),
        format!("{compared} output files compared byte for byte; differing commands {differing:?}"),
    )
}

/// Per-row CD of the held-out evaluation for routed and concat models trained
/// from the same single-view checkpoint, one entry per training seed.
struct DeskRuns {
    routed: Vec<Vec<EvalRow>>,
    concat: Vec<Vec<EvalRow>>,
    seeds: Vec<u64>,
    shapes: usize,
    elapsed: Duration,
}

fn desk_runs() -> DeskRuns {
    let t0 = Instant::now();
    let base = load_config(Some(&configs_dir().join("desk.toml"))).unwrap();
    let data = Dataset::generate(&base).unwrap();
    let shapes = eval_shapes(&base, &data).unwrap();
    let seeds: Vec<u64> = (0..3).map(|k| base.seed + k).collect();
    let mut runs = DeskRuns {
        routed: Vec::new(),
        concat: Vec::new(),
        seeds: seeds.clone(),
        shapes: shapes.len(),
        elapsed: Duration::ZERO,
    };
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut single = Model::new(cfg.model.clone(), Conditioning::SingleView, seed).unwrap();
        run_phase(&cfg, &mut single, &data, Phase::SingleView, &mut LogSink::discard()).unwrap();
        for (variant, sink) in [(Conditioning::Routed, &mut runs.routed), (Conditioning::Concat, &mut runs.concat)] {
            let mut model = upgrade(&single, variant).unwrap();
            run_phase(&cfg, &mut model, &data, Phase::MultiView, &mut LogSink::discard()).unwrap();
            sink.push(run_eval(&cfg, &model, &shapes).unwrap().rows);
        }
        eprintln!("  desk seed {seed} trained and evaluated at {:.0}s", t0.elapsed().as_secs_f64());
    }
    runs.elapsed = t0.elapsed();
    runs
}

fn cds(runs: &[Vec<EvalRow>], k: usize) -> Vec<f64> {
    runs.iter().flatten().filter(|r| r.view_count == k).map(|r| r.metrics.cd).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean of paired differences `b − a`.
fn paired_sem(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0);
    (var / d.len() as f64).sqrt()
}

fn view_scaling(runs: &DeskRuns) -> Verdict {
    let per_k: Vec<Vec<f64>> = [1, 2, 4].iter().map(|&k| cds(&runs.routed, k)).collect();
    let means: Vec<f64> = per_k.iter().map(|x| mean(x)).collect();
    let drop = 1.0 - means[2] / means[0];
    let step_ok = |a: usize, b: usize| means[b] <= means[a] + paired_sem(&per_k[a], &per_k[b]);
    let monotone = step_ok(0, 1) && step_ok(1, 2);
    Verdict::new(
        drop >= 0.05 && monotone,
        format!(
            "CD(1,2,4) = {:.4}, {:.4}, {:.4}; 4-view reduction {:.1}% (need >= 5%); non-increasing within 1 SE: {monotone}; {} shapes x seeds {:?}, trained in {:.0}s",
            means[0],
            means[1],
            means[2],
            100.0 * drop,
            runs.shapes,
            runs.seeds,
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_ordering(runs: &DeskRuns) -> Verdict {
    let seed_mean = |rows: &[Vec<EvalRow>]| mean(&rows.iter().map(|r| mean(&r.iter().map(|x| x.metrics.cd).collect::<Vec<_>>())).collect::<Vec<_>>());
    let (routed, concat) = (seed_mean(&runs.routed), seed_mean(&runs.concat));
    Verdict::new(
        routed <= concat,
        format!("seed-averaged mean CD over view counts {{1,2,4}}: routed {routed:.4}, concat {concat:.4}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ROAR_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ROAR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut results: Vec<(usize, &str, bool)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {:<28} {} ({}) [{secs:.1}s]",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v.pass));
    };

    record(1, "STE gradient correctness", &ste_gradients);
    record(2, "single-view reduction", &single_view_reduction);
    record(3, "post-upgrade identity", &post_upgrade_identity);
    record(4, "cost contract", &cost_contract);
    if wanted(5) || wanted(6) {
        match catch_unwind(desk_runs) {
            Ok(runs) => {
                record(5, "view scaling", &|| view_scaling(&runs));
                record(6, "ablation ordering", &|| ablation_ordering(&runs));
            }
            Err(_) => {
                record(5, "view scaling", &|| Verdict::new(false, "desk training panicked"));
                record(6, "ablation ordering", &|| Verdict::new(false, "desk training panicked"));
            }
        }
    }
    record(7, "perturbation sampler", &perturbation_sampler);
    record(8, "freeze correctness", &freeze_correctness);
    record(9, "metric oracles", &metric_oracles);
    record(10, "determinism", &determinism);

    let passed = results.iter().filter(|r| r.2).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
