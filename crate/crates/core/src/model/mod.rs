//! Miniature flow-matching DiT with routed dual-stream cross-attention.
//!
//! Block layout, with `c` the timestep embedding:
//!
//! ```text
//! h += gate_sa(c)  · SelfAttn(modulate(LN(h), c))
//! h += y_gate      · CrossAttn_{p|a}(h, view chosen by the router)
//! h += gate_mlp(c) · MLP(modulate(LN(h), c))
//! ```
//!
//! Linear weights are stored input-major, so a layer computes `x · W + b`.

pub mod codec;
pub mod io;
pub mod sampler;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use codec::{latent_decode, latent_encode, rotate_latent, CodecConfig, LatentTokens};
pub use sampler::{sample_latent, SampleOutput};

use crate::numerics::{Gradients, Segment, Tape, Tensor, Var};
use crate::rng::{stream_rng, GumbelKey, Stream};
use crate::router::{self, RouterParams, RouterVars, RoutingDecision, RoutingMode};
use crate::world::ViewFeatureSet;
use crate::{Error, Result};

/// Label of cross-attention calls in the kernel counters.
pub const CROSS_ATTENTION: &str = "cross";
pub const SELF_ATTENTION: &str = "self";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// One cross-attention stream over the primary view only.
    SingleView,
    /// Router plus primary and auxiliary streams.
    Routed,
    /// One stream attending to the patches of every view at once.
    Concat,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::SingleView => "single-view",
            Conditioning::Routed => "routed",
            Conditioning::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Patch tokens per view.
    pub patches: usize,
    pub feat_dim: usize,
    pub tau: f64,
    pub codec: CodecConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            dim: 64,
            heads: 4,
            head_dim: 16,
            mlp_ratio: 4,
            patches: 16,
            feat_dim: 32,
            tau: router::DEFAULT_TAU,
            codec: CodecConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Two blocks over a 2×2×2 grid, two heads of width 4, four patches per
    /// view. Small enough for exhaustive finite differences.
    pub fn micro() -> Self {
        Self {
            blocks: 2,
            dim: 8,
            heads: 2,
            head_dim: 4,
            mlp_ratio: 2,
            patches: 4,
            feat_dim: 6,
            tau: router::DEFAULT_TAU,
            codec: CodecConfig {
                grid: 2,
                ..CodecConfig::default()
            },
        }
    }

    pub fn tokens(&self) -> usize {
        self.codec.tokens()
    }

    pub fn channels(&self) -> usize {
        self.codec.channels
    }

    /// Attention projection width `H·d`.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("blocks", self.blocks),
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("patches", self.patches),
            ("feat_dim", self.feat_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("model.tau must be positive"));
        }
        self.codec.validate()
    }
}

/// Coarse parameter grouping used for freezing and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Embedding,
    Timestep,
    ViewProjection,
    Modulation,
    SelfAttention,
    Router,
    CrossPrimary,
    CrossAux,
    Mlp,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let local = match name.strip_prefix("blocks.") {
            Some(rest) => rest.split_once('.').map_or(rest, |(_, r)| r),
            None => name,
        };
        let head = local.split('.').next().unwrap_or("");
        match head {
            "embed" => ParamGroup::Embedding,
            "time" => ParamGroup::Timestep,
            "cond" => ParamGroup::ViewProjection,
            "mod" => ParamGroup::Modulation,
            "sa" => ParamGroup::SelfAttention,
            "router" => ParamGroup::Router,
            "ca_p" => ParamGroup::CrossPrimary,
            "ca_a" => ParamGroup::CrossAux,
            "mlp" => ParamGroup::Mlp,
            _ => ParamGroup::Head,
        }
    }

    /// Parameters introduced on top of the single-view model.
    pub fn is_added(self) -> bool {
        matches!(self, ParamGroup::Router | ParamGroup::CrossAux)
    }
}

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    /// Zeroes every tensor whose name falls in `group`.
    pub fn zero_group(&mut self, store: &ParamStore, group: ParamGroup) {
        for (name, t) in store.names().iter().zip(&mut self.0) {
            if ParamGroup::of(name) == group {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Parameters loaded onto a tape on first use.
pub struct Binding<'m> {
    store: &'m ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> Binding<'m> {
    pub fn new(store: &'m ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Uses `vars` (one per stored tensor, already on the tape) instead of
    /// loading the stored values.
    pub fn from_vars(store: &'m ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::shape(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Self {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.tensors()[i].clone();
        let v = if self.trainable { tape.param(t) } else { tape.constant(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradients for every stored parameter; untouched ones are zero.
    pub fn gradients(&self, g: &Gradients) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .zip(self.store.tensors())
                .map(|(v, t)| match v {
                    Some(v) => g.get_or_zeros(*v, t),
                    None => Tensor::zeros(t.shape()),
                })
                .collect(),
        )
    }
}

/// Which routing the forward pass uses in a routed model.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum RoutingOverride {
    /// Router decides.
    #[default]
    Learned,
    /// Every token goes to the primary view through the primary stream; the
    /// router is not evaluated.
    ForcePrimary,
    /// Hard choices fixed per block; the gate's forward value becomes
    /// `1 + y_soft[i, v*] − anchor[i]`. Used for finite-difference checks.
    Frozen(Vec<FrozenRouting>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenRouting {
    pub hard: Vec<usize>,
    pub anchor: Vec<f64>,
}

impl FrozenRouting {
    pub fn from_decision(d: &RoutingDecision) -> Self {
        Self {
            hard: d.hard_index.clone(),
            anchor: d.chosen_soft(),
        }
    }
}

/// Identifies the Gumbel draws of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GumbelBase {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: RoutingMode,
    pub gumbel: Option<GumbelBase>,
    pub routing: RoutingOverride,
    /// Load parameters as gradient-receiving leaves.
    pub trainable: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            mode: RoutingMode::Inference,
            gumbel: None,
            routing: RoutingOverride::Learned,
            trainable: false,
        }
    }

    pub fn train(base: GumbelBase) -> Self {
        Self {
            mode: RoutingMode::Train,
            gumbel: Some(base),
            routing: RoutingOverride::Learned,
            trainable: true,
        }
    }

    pub fn with_routing(mut self, routing: RoutingOverride) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }
}

pub struct ForwardOutput<'m> {
    /// `[N, C]` predicted velocity.
    pub velocity: Var,
    /// One decision per block for routed models; empty otherwise.
    pub decisions: Vec<RoutingDecision>,
    pub binding: Binding<'m>,
}

/// Parameter counts split into the single-view baseline and the additions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub baseline: usize,
    pub router: usize,
    pub cross_aux: usize,
    pub per_group: BTreeMap<ParamGroup, usize>,
    /// `(router + cross_aux) / baseline`.
    pub added_ratio: f64,
}

/// `[1, dim]` sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000).
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[j] = arg.cos();
        out[half + j] = arg.sin();
    }
    Tensor::new(vec![1, dim], out).expect("embedding shape")
}

fn block(l: usize, name: &str) -> String {
    format!("blocks.{l}.{name}")
}

const STREAM_TENSORS: [&str; 9] = ["ln.g", "ln.b", "wq", "wk", "wv", "q_norm", "k_norm", "wo", "bo"];

struct StreamVars {
    ln_g: Var,
    ln_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    q_norm: Var,
    k_norm: Var,
    wo: Var,
    bo: Var,
}

/// View features on the tape, projected to the model width on demand.
struct ViewTokens {
    raw: Vec<Option<Var>>,
    projected: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub conditioning: Conditioning,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights from the init stream of `seed`. Modulation and the
    /// output head start at zero.
    pub fn new(config: ModelConfig, conditioning: Conditioning, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let mut params = ParamStore::new();
        let (d, w, c, df) = (config.dim, config.width(), config.channels(), config.feat_dim);
        let hidden = config.mlp_ratio * d;
        let mut randn = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            Tensor::new(vec![rows, cols], data).expect("shape")
        };
        let mut linear = |params: &mut ParamStore, name: String, fan_in: usize, fan_out: usize| {
            params.insert(name, randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()));
        };
        linear(&mut params, "embed.in.w".into(), c, d);
        params.insert("embed.in.b", Tensor::zeros(&[d]));
        // Learned position table, one row per grid cell.
        linear(&mut params, "embed.pos".into(), config.tokens(), d);
        linear(&mut params, "time.w1".into(), d, d);
        params.insert("time.b1", Tensor::zeros(&[d]));
        linear(&mut params, "time.w2".into(), d, d);
        params.insert("time.b2", Tensor::zeros(&[d]));
        linear(&mut params, "cond.w".into(), df, d);
        params.insert("cond.b", Tensor::zeros(&[d]));
        let streams: &[&str] = match conditioning {
            Conditioning::Routed => &["ca_p", "ca_a"],
            _ => &["ca_p"],
        };
        for l in 0..config.blocks {
            params.insert(block(l, "mod.w"), Tensor::zeros(&[d, 6 * d]));
            params.insert(block(l, "mod.b"), Tensor::zeros(&[6 * d]));
            for m in ["wq", "wk", "wv"] {
                linear(&mut params, block(l, &format!("sa.{m}")), d, w);
            }
            linear(&mut params, block(l, "sa.wo"), w, d);
            params.insert(block(l, "sa.bo"), Tensor::zeros(&[d]));
            for s in streams {
                let n = |x: &str| block(l, &format!("{s}.{x}"));
                params.insert(n("ln.g"), Tensor::ones(&[d]));
                params.insert(n("ln.b"), Tensor::zeros(&[d]));
                linear(&mut params, n("wq"), d, w);
                linear(&mut params, n("wk"), d, w);
                linear(&mut params, n("wv"), d, w);
                params.insert(n("q_norm"), Tensor::ones(&[config.head_dim]));
                params.insert(n("k_norm"), Tensor::ones(&[config.head_dim]));
                linear(&mut params, n("wo"), w, d);
                params.insert(n("bo"), Tensor::zeros(&[d]));
            }
            if conditioning == Conditioning::Routed {
                let rp = Self::router_from_stream(&params, l, config.heads)?;
                Self::insert_router(&mut params, l, &rp);
            }
            linear(&mut params, block(l, "mlp.w1"), d, hidden);
            params.insert(block(l, "mlp.b1"), Tensor::zeros(&[hidden]));
            linear(&mut params, block(l, "mlp.w2"), hidden, d);
            params.insert(block(l, "mlp.b2"), Tensor::zeros(&[d]));
        }
        params.insert("final.mod.w", Tensor::zeros(&[d, 2 * d]));
        params.insert("final.mod.b", Tensor::zeros(&[2 * d]));
        params.insert("head.w", Tensor::zeros(&[d, c]));
        params.insert("head.b", Tensor::zeros(&[c]));
        Ok(Self {
            config,
            conditioning,
            params,
        })
    }

    /// Adds `N(0, std²)` noise to every parameter, including zero-initialised
    /// ones. Test helper for exercising all gradient paths.
    pub fn jitter(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for t in self.params.tensors_mut() {
            for x in t.data_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }

    fn router_from_stream(params: &ParamStore, l: usize, heads: usize) -> Result<RouterParams> {
        let p = |x: &str| params.expect(&block(l, &format!("ca_p.{x}"))).cloned();
        Ok(RouterParams {
            w_q: p("wq")?,
            w_k: p("wk")?,
            w_agg: Tensor::full(&[heads], 1.0 / heads as f64),
            ln_gain: p("ln.g")?,
            ln_bias: p("ln.b")?,
            q_rms_gain: p("q_norm")?,
            k_rms_gain: p("k_norm")?,
            heads,
        })
    }

    fn insert_router(params: &mut ParamStore, l: usize, rp: &RouterParams) {
        let n = |x: &str| block(l, &format!("router.{x}"));
        params.insert(n("w_q"), rp.w_q.clone());
        params.insert(n("w_k"), rp.w_k.clone());
        params.insert(n("w_agg"), rp.w_agg.clone());
        params.insert(n("ln.g"), rp.ln_gain.clone());
        params.insert(n("ln.b"), rp.ln_bias.clone());
        params.insert(n("q_norm"), rp.q_rms_gain.clone());
        params.insert(n("k_norm"), rp.k_rms_gain.clone());
    }

    /// Router weights of block `l` (routed models only).
    pub fn router_params(&self, l: usize) -> Result<RouterParams> {
        let n = |x: &str| self.params.expect(&block(l, &format!("router.{x}"))).cloned();
        Ok(RouterParams {
            w_q: n("w_q")?,
            w_k: n("w_k")?,
            w_agg: n("w_agg")?,
            ln_gain: n("ln.g")?,
            ln_bias: n("ln.b")?,
            q_rms_gain: n("q_norm")?,
            k_rms_gain: n("k_norm")?,
            heads: self.config.heads,
        })
    }

    /// Routed model initialised from a single-view one: the auxiliary stream
    /// copies the primary stream, the router copies its layer norm, query and
    /// key projections and RMS gains, and `w_agg = 1/H`.
    pub fn upgrade_from_single(single: &Model) -> Result<Model> {
        if single.conditioning != Conditioning::SingleView {
            return Err(Error::invalid(format!(
                "upgrade needs a single-view model, got {}",
                single.conditioning.name()
            )));
        }
        let template = Model::new(single.config.clone(), Conditioning::SingleView, 0)?;
        check_layout(&template.params, &single.params)?;
        let mut params = single.params.clone();
        for l in 0..single.config.blocks {
            for x in STREAM_TENSORS {
                let t = single.params.expect(&block(l, &format!("ca_p.{x}")))?.clone();
                params.insert(block(l, &format!("ca_a.{x}")), t);
            }
            let rp = Self::router_from_stream(&single.params, l, single.config.heads)?;
            Self::insert_router(&mut params, l, &rp);
        }
        // Reorder to the canonical layout of a fresh routed model.
        let layout = Model::new(single.config.clone(), Conditioning::Routed, 0)?;
        let mut ordered = ParamStore::new();
        for name in layout.params.names() {
            ordered.insert(name.clone(), params.expect(name)?.clone());
        }
        Ok(Model {
            config: single.config.clone(),
            conditioning: Conditioning::Routed,
            params: ordered,
        })
    }

    /// Naive-concatenation model sharing the single-view weights.
    pub fn concat_from_single(single: &Model) -> Result<Model> {
        if single.conditioning != Conditioning::SingleView {
            return Err(Error::invalid("concat init needs a single-view model"));
        }
        Ok(Model {
            config: single.config.clone(),
            conditioning: Conditioning::Concat,
            params: single.params.clone(),
        })
    }

    pub fn count_parameters(&self) -> ParameterReport {
        let mut per_group = BTreeMap::new();
        for (name, t) in self.params.iter() {
            *per_group.entry(ParamGroup::of(name)).or_insert(0) += t.len();
        }
        let router = per_group.get(&ParamGroup::Router).copied().unwrap_or(0);
        let cross_aux = per_group.get(&ParamGroup::CrossAux).copied().unwrap_or(0);
        let baseline = self.params.scalar_count() - router - cross_aux;
        ParameterReport {
            baseline,
            router,
            cross_aux,
            per_group,
            added_ratio: (router + cross_aux) as f64 / baseline as f64,
        }
    }

    fn check_inputs(&self, z_t: &Tensor, t: f64, views: &ViewFeatureSet) -> Result<()> {
        let cfg = &self.config;
        if z_t.shape() != [cfg.tokens(), cfg.channels()] {
            return Err(Error::shape(format!(
                "latent {:?}, model expects [{}, {}]",
                z_t.shape(),
                cfg.tokens(),
                cfg.channels()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        views.validate()?;
        if views.patches() != cfg.patches || views.feat_dim() != cfg.feat_dim {
            return Err(Error::shape(format!(
                "views are [{}, {}], model expects [{}, {}]",
                views.patches(),
                views.feat_dim(),
                cfg.patches,
                cfg.feat_dim
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_on<'m>(
        &'m self,
        tape: &mut Tape,
        z_t: &Tensor,
        t: f64,
        views: &ViewFeatureSet,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'m>> {
        let b = Binding::new(&self.params, opts.trainable);
        self.forward_bound(tape, b, z_t, t, views, opts)
    }

    /// [`Model::forward_on`] with parameters taken from `b`.
    pub fn forward_bound<'m>(
        &'m self,
        tape: &mut Tape,
        mut b: Binding<'m>,
        z_t: &Tensor,
        t: f64,
        views: &ViewFeatureSet,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'m>> {
        self.check_inputs(z_t, t, views)?;
        let cfg = &self.config;
        let d = cfg.dim;
        let ones = tape.constant(Tensor::ones(&[d]));
        let zeros = tape.constant(Tensor::zeros(&[d]));

        let z = tape.constant(z_t.clone());
        let mut h = linear(tape, &mut b, z, "embed.in.w", "embed.in.b")?;
        let pos = b.var(tape, "embed.pos")?;
        h = tape.add(h, pos)?;

        let temb = tape.constant(timestep_embedding(t, d));
        let c = linear(tape, &mut b, temb, "time.w1", "time.b1")?;
        let c = tape.silu(c);
        let c = linear(tape, &mut b, c, "time.w2", "time.b2")?;
        let c = tape.silu(c);

        let mut tokens = ViewTokens {
            raw: vec![None; views.len()],
            projected: vec![None; views.len()],
        };
        let pooled = match (self.conditioning, &opts.routing) {
            (Conditioning::Routed, RoutingOverride::Learned | RoutingOverride::Frozen(_)) => {
                let raw = tape.constant(router::pool_view_keys(views));
                Some(linear(tape, &mut b, raw, "cond.w", "cond.b")?)
            }
            _ => None,
        };
        if let RoutingOverride::Frozen(f) = &opts.routing {
            if f.len() != cfg.blocks {
                return Err(Error::invalid(format!("{} frozen routings for {} blocks", f.len(), cfg.blocks)));
            }
        }

        let mut decisions = Vec::new();
        for l in 0..cfg.blocks {
            let m = linear(tape, &mut b, c, &block(l, "mod.w"), &block(l, "mod.b"))?;
            let chunk = |tape: &mut Tape, k: usize| tape.slice_cols(m, k * d, d);
            let (shift_sa, scale_sa, gate_sa) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
            let (shift_mlp, scale_mlp, gate_mlp) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

            let x = modulate(tape, h, ones, zeros, shift_sa, scale_sa)?;
            let sa = self.self_attention(tape, &mut b, l, x)?;
            let sa = tape.mul_row(sa, gate_sa)?;
            h = tape.add(h, sa)?;

            let ca = self.cross_block(tape, &mut b, l, h, views, &mut tokens, pooled, opts, &mut decisions)?;
            h = tape.add(h, ca)?;

            let x = modulate(tape, h, ones, zeros, shift_mlp, scale_mlp)?;
            let y = linear(tape, &mut b, x, &block(l, "mlp.w1"), &block(l, "mlp.b1"))?;
            let y = tape.gelu(y);
            let y = linear(tape, &mut b, y, &block(l, "mlp.w2"), &block(l, "mlp.b2"))?;
            let y = tape.mul_row(y, gate_mlp)?;
            h = tape.add(h, y)?;
        }

        let fm = linear(tape, &mut b, c, "final.mod.w", "final.mod.b")?;
        let shift = tape.slice_cols(fm, 0, d)?;
        let scale = tape.slice_cols(fm, d, d)?;
        let x = modulate(tape, h, ones, zeros, shift, scale)?;
        let velocity = linear(tape, &mut b, x, "head.w", "head.b")?;
        if !tape.value(velocity).is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(ForwardOutput {
            velocity,
            decisions,
            binding: b,
        })
    }

    /// Tape-free forward returning the velocity and routing decisions.
    pub fn predict(
        &self,
        z_t: &Tensor,
        t: f64,
        views: &ViewFeatureSet,
        opts: &ForwardOptions,
    ) -> Result<(Tensor, Vec<RoutingDecision>)> {
        let mut tape = Tape::new();
        let opts = opts.clone().with_trainable(false);
        let out = self.forward_on(&mut tape, z_t, t, views, &opts)?;
        Ok((tape.value(out.velocity).clone(), out.decisions))
    }

    fn self_attention(&self, tape: &mut Tape, b: &mut Binding, l: usize, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let wq = b.var(tape, &block(l, "sa.wq"))?;
        let q = tape.matmul(x, wq)?;
        let wk = b.var(tape, &block(l, "sa.wk"))?;
        let k = tape.matmul(x, wk)?;
        let wv = b.var(tape, &block(l, "sa.wv"))?;
        let v = tape.matmul(x, wv)?;
        let segs = vec![Segment { start: 0, len: n }; n];
        let a = tape.attention(SELF_ATTENTION, q, k, v, self.config.heads, segs)?;
        linear(tape, b, a, &block(l, "sa.wo"), &block(l, "sa.bo"))
    }

    fn stream_vars(&self, tape: &mut Tape, b: &mut Binding, l: usize, stream: &str) -> Result<StreamVars> {
        let mut v = |x: &str| b.var(tape, &block(l, &format!("{stream}.{x}")));
        Ok(StreamVars {
            ln_g: v("ln.g")?,
            ln_b: v("ln.b")?,
            wq: v("wq")?,
            wk: v("wk")?,
            wv: v("wv")?,
            q_norm: v("q_norm")?,
            k_norm: v("k_norm")?,
            wo: v("wo")?,
            bo: v("bo")?,
        })
    }

    fn view_tokens(
        &self,
        tape: &mut Tape,
        b: &mut Binding,
        views: &ViewFeatureSet,
        cache: &mut ViewTokens,
        v: usize,
    ) -> Result<Var> {
        if let Some(p) = cache.projected[v] {
            return Ok(p);
        }
        let raw = match cache.raw[v] {
            Some(r) => r,
            None => {
                let r = tape.constant(views.features[v].clone());
                cache.raw[v] = Some(r);
                r
            }
        };
        let p = linear(tape, b, raw, "cond.w", "cond.b")?;
        cache.projected[v] = Some(p);
        Ok(p)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_block(
        &self,
        tape: &mut Tape,
        b: &mut Binding,
        l: usize,
        h: Var,
        views: &ViewFeatureSet,
        tokens: &mut ViewTokens,
        pooled: Option<Var>,
        opts: &ForwardOptions,
        decisions: &mut Vec<RoutingDecision>,
    ) -> Result<Var> {
        let n = self.config.tokens();
        match self.conditioning {
            Conditioning::SingleView => {
                let p = views.primary.unwrap_or(0);
                self.dispatch(tape, b, l, h, views, tokens, &vec![p; n], Some(p))
            }
            Conditioning::Concat => self.concat_attention(tape, b, l, h, views, tokens),
            Conditioning::Routed => match &opts.routing {
                RoutingOverride::ForcePrimary => {
                    let p = views
                        .primary
                        .ok_or_else(|| Error::invalid("forced primary routing needs a primary view"))?;
                    self.dispatch(tape, b, l, h, views, tokens, &vec![p; n], Some(p))
                }
                routing => {
                    let rp = RouterVars {
                        w_q: b.var(tape, &block(l, "router.w_q"))?,
                        w_k: b.var(tape, &block(l, "router.w_k"))?,
                        w_agg: b.var(tape, &block(l, "router.w_agg"))?,
                        ln_gain: b.var(tape, &block(l, "router.ln.g"))?,
                        ln_bias: b.var(tape, &block(l, "router.ln.b"))?,
                        q_rms_gain: b.var(tape, &block(l, "router.q_norm"))?,
                        k_rms_gain: b.var(tape, &block(l, "router.k_norm"))?,
                        heads: self.config.heads,
                    };
                    let pooled = pooled.expect("pooled keys exist for learned routing");
                    let logits = router::routing_logits_on(tape, &rp, h, pooled)?;
                    let key = opts
                        .gumbel
                        .map(|g| GumbelKey::new(g.seed, g.step, g.sample, l as u64));
                    let (mut dec, y_soft) = router::gumbel_select_on(tape, logits, self.config.tau, opts.mode, key)?;
                    let gate = match routing {
                        RoutingOverride::Frozen(f) => {
                            let f = &f[l];
                            dec.hard_index = f.hard.clone();
                            tape.ste_gate_anchored(y_soft, &f.hard, &f.anchor)?
                        }
                        _ => tape.ste_gate(y_soft, &dec.hard_index)?,
                    };
                    let out = self.dispatch(tape, b, l, h, views, tokens, &dec.hard_index, views.primary)?;
                    decisions.push(dec);
                    tape.scale_rows(out, gate)
                }
            },
        }
    }

    /// Token `i` attends to the patches of view `hard[i]` only, through the
    /// primary stream if that view is `primary` and the auxiliary stream
    /// otherwise.
    #[allow(clippy::too_many_arguments)]
    fn dispatch(
        &self,
        tape: &mut Tape,
        b: &mut Binding,
        l: usize,
        h: Var,
        views: &ViewFeatureSet,
        tokens: &mut ViewTokens,
        hard: &[usize],
        primary: Option<usize>,
    ) -> Result<Var> {
        let n = hard.len();
        let s = self.config.patches;
        if let Some(p) = primary {
            if p >= views.len() {
                return Err(Error::invalid(format!("primary view {p} out of range")));
            }
        }
        if let Some(&v) = hard.iter().find(|&&v| v >= views.len()) {
            return Err(Error::invalid(format!("routed to view {v} of {}", views.len())));
        }
        let on_primary: Vec<bool> = hard.iter().map(|&v| Some(v) == primary).collect();
        let mut segments = vec![Segment { start: 0, len: s }; n];
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        let mut used = Vec::new(); // (stream vars, mask, query)
        for (primary_stream, name) in [(true, "ca_p"), (false, "ca_a")] {
            let members: Vec<usize> = (0..n).filter(|&i| on_primary[i] == primary_stream).collect();
            if members.is_empty() {
                continue;
            }
            let sv = self.stream_vars(tape, b, l, name)?;
            let x = tape.layer_norm(h, sv.ln_g, sv.ln_b)?;
            let q = tape.matmul(x, sv.wq)?;
            let q = tape.rms_norm(q, sv.q_norm)?;
            let mut view_ids: Vec<usize> = members.iter().map(|&i| hard[i]).collect();
            view_ids.sort_unstable();
            view_ids.dedup();
            let mut starts = HashMap::new();
            for v in view_ids {
                let tok = self.view_tokens(tape, b, views, tokens, v)?;
                let k = tape.matmul(tok, sv.wk)?;
                let k = tape.rms_norm(k, sv.k_norm)?;
                let val = tape.matmul(tok, sv.wv)?;
                starts.insert(v, keys.len() * s);
                keys.push(k);
                values.push(val);
            }
            for &i in &members {
                segments[i].start = starts[&hard[i]];
            }
            let mask: Vec<f64> = on_primary.iter().map(|&p| if p == primary_stream { 1.0 } else { 0.0 }).collect();
            used.push((sv, mask, q));
        }
        let k = if keys.len() == 1 { keys[0] } else { tape.concat_rows(&keys)? };
        let v = if values.len() == 1 { values[0] } else { tape.concat_rows(&values)? };
        let q = if used.len() == 1 {
            used[0].2
        } else {
            masked_sum(tape, &used.iter().map(|u| (u.1.clone(), u.2)).collect::<Vec<_>>())?
        };
        let att = tape.attention(CROSS_ATTENTION, q, k, v, self.config.heads, segments)?;
        let mut outs = Vec::with_capacity(used.len());
        for (sv, mask, _) in &used {
            let o = tape.matmul(att, sv.wo)?;
            let o = tape.add_row(o, sv.bo)?;
            outs.push((mask.clone(), o));
        }
        if outs.len() == 1 {
            Ok(outs[0].1)
        } else {
            masked_sum(tape, &outs)
        }
    }

    /// Every token attends to the patches of all views through the primary stream.
    fn concat_attention(
        &self,
        tape: &mut Tape,
        b: &mut Binding,
        l: usize,
        h: Var,
        views: &ViewFeatureSet,
        tokens: &mut ViewTokens,
    ) -> Result<Var> {
        let sv = self.stream_vars(tape, b, l, "ca_p")?;
        let x = tape.layer_norm(h, sv.ln_g, sv.ln_b)?;
        let q = tape.matmul(x, sv.wq)?;
        let q = tape.rms_norm(q, sv.q_norm)?;
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        for v in 0..views.len() {
            let tok = self.view_tokens(tape, b, views, tokens, v)?;
            let k = tape.matmul(tok, sv.wk)?;
            keys.push(tape.rms_norm(k, sv.k_norm)?);
            values.push(tape.matmul(tok, sv.wv)?);
        }
        let k = if keys.len() == 1 { keys[0] } else { tape.concat_rows(&keys)? };
        let v = if values.len() == 1 { values[0] } else { tape.concat_rows(&values)? };
        let n = tape.value(h).rows();
        let segs = vec![
            Segment {
                start: 0,
                len: views.len() * self.config.patches,
            };
            n
        ];
        let att = tape.attention(CROSS_ATTENTION, q, k, v, self.config.heads, segs)?;
        let o = tape.matmul(att, sv.wo)?;
        tape.add_row(o, sv.bo)
    }
}

/// Fails unless `actual` has exactly the names and shapes of `expected`.
pub fn check_layout(expected: &ParamStore, actual: &ParamStore) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::shape(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            actual.len()
        )));
    }
    for (name, t) in expected.iter() {
        let got = actual.expect(name)?;
        if got.shape() != t.shape() {
            return Err(Error::shape(format!("`{name}` is {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    Ok(())
}

fn linear(tape: &mut Tape, b: &mut Binding, x: Var, w: &str, bias: &str) -> Result<Var> {
    let w = b.var(tape, w)?;
    let bias = b.var(tape, bias)?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, bias)
}

/// `LN(h) · (1 + scale) + shift` with a non-affine layer norm.
fn modulate(tape: &mut Tape, h: Var, ones: Var, zeros: Var, shift: Var, scale: Var) -> Result<Var> {
    let x = tape.layer_norm(h, ones, zeros)?;
    let s = tape.add_scalar(scale, 1.0);
    let x = tape.mul_row(x, s)?;
    tape.add_row(x, shift)
}

fn masked_sum(tape: &mut Tape, parts: &[(Vec<f64>, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (mask, x) in parts {
        let m = tape.constant(Tensor::new(vec![mask.len()], mask.clone())?);
        let y = tape.scale_rows(*x, m)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("masked sum of nothing"))
}
