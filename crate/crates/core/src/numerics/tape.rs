//! Wengert-style tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; `backward` walks it once in reverse.

use super::kernels::{self, gemm};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-range a single query row attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Per-call record from the attention kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionRecord {
    pub label: &'static str,
    pub keys_per_query: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct KernelCounters {
    pub attention: Vec<AttentionRecord>,
}

impl KernelCounters {
    pub fn calls_labeled<'a>(
        &'a self,
        label: &'a str,
    ) -> impl Iterator<Item = &'a AttentionRecord> + 'a {
        self.attention.iter().filter(move |r| r.label == label)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    ScaleRows { x: Var, col: Var },
    Silu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    RmsNorm { x: Var, gain: Var, rstd: Vec<f64> },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    Attention(Box<AttentionSaved>),
    HeadScores { q: Var, k: Var, w: Var, heads: usize },
    SteGate { soft: Var, hard: Vec<usize> },
    Mean { x: Var },
    MseConst { x: Var, target: Vec<f64> },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<Segment>,
    /// Softmax weights, query-major then head-major, `len` entries per head.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: KernelCounters,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(like.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(like.shape()),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn counters(&self) -> &KernelCounters {
        &self.counters
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], || {
            format!("matmul {sa:?} x {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        check(sa == sb, || format!("{what} {sa:?} vs {sb:?}"))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    fn row_len_check(&self, x: Var, row: Var, what: &str) -> Result<()> {
        let (d, r) = (self.value(x).last_dim(), self.value(row).len());
        check(d == r, || format!("{what}: row of {r} vs last dim {d}"))
    }

    /// `x[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_len_check(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(r.len()) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow { x, row }, rg))
    }

    /// `x[i, :] ⊙ row` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_len_check(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(r.len()) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v *= b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::MulRow { x, row }, rg))
    }

    /// `x[i, :] · col[i]`: scales each row by one entry of `col`.
    pub fn scale_rows(&mut self, x: Var, col: Var) -> Result<Var> {
        let (rows, c) = (self.value(x).rows(), self.value(col).len());
        check(rows == c, || format!("scale_rows: {c} factors for {rows} rows"))?;
        let f = self.value(col).data().to_vec();
        let mut t = self.value(x).clone();
        let d = t.last_dim();
        for (chunk, s) in t.data_mut().chunks_mut(d).zip(&f) {
            for v in chunk {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(t, Op::ScaleRows { x, col }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::silu);
        let rg = self.rg(x);
        self.push(t, Op::Silu { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu { x }, rg)
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = kernels::softmax_rows(tx.data(), tx.last_dim());
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Layer norm over contiguous groups of `gain.len()` values.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(gain).len();
        check(d >= 2 && self.value(bias).len() == d, || {
            format!("layer_norm gain/bias of {d}")
        })?;
        check(self.value(x).len() % d == 0, || "layer_norm group size".into())?;
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// RMS norm over contiguous groups of `gain.len()` values.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(gain).len();
        check(d >= 1 && self.value(x).len() % d == 0, || {
            format!("rms_norm group {d} for {} values", self.value(x).len())
        })?;
        let (y, rstd) = kernels::rms_norm(self.value(x).data(), self.value(gain).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(t, Op::RmsNorm { x, gain, rstd }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        check(tx.rank() == 2 && start + len <= tx.shape()[1], || {
            format!("slice_cols {start}+{len} of {:?}", tx.shape())
        })?;
        let rows = tx.shape()[0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::vstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Multi-head scaled dot-product attention where query row `i` attends
    /// only to key/value rows `segments[i]`.
    ///
    /// `q` is `[Nq, H·d]`, `k` and `v` are `[Nk, H·d]`.
    pub fn attention(
        &mut self,
        label: &'static str,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let width = tq.last_dim();
        check(
            heads > 0
                && width % heads == 0
                && tk.last_dim() == width
                && tv.last_dim() == width
                && tk.rows() == tv.rows()
                && segments.len() == tq.rows(),
            || {
                format!(
                    "attention q {:?} k {:?} v {:?} heads {heads} segments {}",
                    tq.shape(),
                    tk.shape(),
                    tv.shape(),
                    segments.len()
                )
            },
        )?;
        let nk = tk.rows();
        for s in &segments {
            check(s.len > 0 && s.start + s.len <= nk, || {
                format!("segment {s:?} outside {nk} keys")
            })?;
        }
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let nq = segments.len();
        let mut out = vec![0.0; nq * width];
        let mut offsets = Vec::with_capacity(nq);
        let mut probs = Vec::new();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for (i, seg) in segments.iter().enumerate() {
            offsets.push(probs.len());
            for h in 0..heads {
                let qi = &qd[i * width + h * d..i * width + (h + 1) * d];
                let base = probs.len();
                for j in seg.start..seg.start + seg.len {
                    let kj = &kd[j * width + h * d..j * width + (h + 1) * d];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    probs.push(s * scale);
                }
                kernels::softmax_in_place(&mut probs[base..]);
                let o = &mut out[i * width + h * d..i * width + (h + 1) * d];
                for (jj, j) in (seg.start..seg.start + seg.len).enumerate() {
                    let p = probs[base + jj];
                    let vj = &vd[j * width + h * d..j * width + (h + 1) * d];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov += p * vv;
                    }
                }
            }
        }
        self.counters.attention.push(AttentionRecord {
            label,
            keys_per_query: segments.iter().map(|s| s.len).collect(),
        });
        let t = Tensor::new(vec![nq, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            segments,
            probs,
            offsets,
        };
        Ok(self.push(t, Op::Attention(Box::new(saved)), rg))
    }

    /// `r[i, v] = Σ_h w[h] · (q[i, h] · k[v, h]) / √d` with `q: [N, H·d]`,
    /// `k: [V, H·d]`, `w: [H]`.
    pub fn head_scores(&mut self, q: Var, k: Var, w: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tw) = (self.value(q), self.value(k), self.value(w));
        let width = tq.last_dim();
        check(
            heads > 0 && width % heads == 0 && tk.last_dim() == width && tw.len() == heads,
            || format!("head_scores q {:?} k {:?} w {}", tq.shape(), tk.shape(), tw.len()),
        )?;
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (n, v) = (tq.rows(), tk.rows());
        let mut out = vec![0.0; n * v];
        for i in 0..n {
            for j in 0..v {
                let mut acc = 0.0;
                for h in 0..heads {
                    let qi = &tq.data()[i * width + h * d..i * width + (h + 1) * d];
                    let kj = &tk.data()[j * width + h * d..j * width + (h + 1) * d];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    acc += tw.data()[h] * dot * scale;
                }
                out[i * v + j] = acc;
            }
        }
        let t = Tensor::new(vec![n, v], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(w);
        Ok(self.push(t, Op::HeadScores { q, k, w, heads }, rg))
    }

    /// Straight-through gate `y[i, hard[i]]` of `y = y_hard − sg(y_soft) + y_soft`.
    ///
    /// The forward value is exactly 1 per row (the one-hot entry); the backward
    /// pass routes the upstream gradient into `soft[i, hard[i]]`. Output is `[N]`.
    pub fn ste_gate(&mut self, soft: Var, hard: &[usize]) -> Result<Var> {
        self.ste_gate_inner(soft, hard, None)
    }

    /// Same backward as [`Tape::ste_gate`], but the forward value is
    /// `1 + soft[i, hard[i]] − anchor[i]`. With `anchor` frozen at the soft
    /// weights of a reference point this is a smooth surrogate whose value and
    /// gradient agree with the straight-through gate at that point.
    pub fn ste_gate_anchored(&mut self, soft: Var, hard: &[usize], anchor: &[f64]) -> Result<Var> {
        self.ste_gate_inner(soft, hard, Some(anchor))
    }

    fn ste_gate_inner(&mut self, soft: Var, hard: &[usize], anchor: Option<&[f64]>) -> Result<Var> {
        let ts = self.value(soft);
        let (n, v) = (ts.rows(), ts.last_dim());
        check(hard.len() == n && hard.iter().all(|&h| h < v), || {
            format!("ste_gate: {} indices for [{n}, {v}]", hard.len())
        })?;
        let out: Vec<f64> = match anchor {
            None => vec![1.0; n],
            Some(a) => {
                check(a.len() == n, || "ste_gate anchor length".into())?;
                (0..n).map(|i| 1.0 + ts.data()[i * v + hard[i]] - a[i]).collect()
            }
        };
        let rg = self.rg(soft);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::SteGate {
                soft,
                hard: hard.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// `mean((x − target)²)` against a constant target.
    pub fn mse_const(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        check(tx.shape() == target.shape(), || {
            format!("mse {:?} vs {:?}", tx.shape(), target.shape())
        })?;
        let m = tx
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / tx.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(m),
            Op::MseConst {
                x,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        check(self.value(loss).len() == 1, || "backward needs a scalar".into())?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let da = buf(grads, *a, m * k);
                    gemm(m, nn, k, g, false, val(*b).data(), true, da, true);
                }
                if want(*b) {
                    let db = buf(grads, *b, k * nn);
                    gemm(k, m, nn, val(*a).data(), true, g, false, db, true);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if want(*a) {
                    for (o, &x) in buf(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if want(*b) {
                    for (o, &x) in buf(grads, *b, g.len()).iter_mut().zip(g) {
                        *o += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let bv = val(*b).data();
                    for ((o, &x), &y) in buf(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if want(*b) {
                    let av = val(*a).data();
                    for ((o, &x), &y) in buf(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { x, c } => {
                for (o, &v) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += c * v;
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                for (o, &v) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::AddRow { x, row } => {
                let d = val(*row).len();
                if want(*x) {
                    for (o, &v) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if want(*row) {
                    let dr = buf(grads, *row, d);
                    for chunk in g.chunks(d) {
                        for (o, &v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRow { x, row } => {
                let r = val(*row).data();
                let d = r.len();
                if want(*x) {
                    let dx = buf(grads, *x, g.len());
                    for (gc, oc) in g.chunks(d).zip(dx.chunks_mut(d)) {
                        for j in 0..d {
                            oc[j] += gc[j] * r[j];
                        }
                    }
                }
                if want(*row) {
                    let xv = val(*x).data();
                    let dr = buf(grads, *row, d);
                    for (gc, xc) in g.chunks(d).zip(xv.chunks(d)) {
                        for j in 0..d {
                            dr[j] += gc[j] * xc[j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, col } => {
                let f = val(*col).data();
                let d = val(*x).last_dim();
                if want(*x) {
                    let dx = buf(grads, *x, g.len());
                    for ((gc, oc), s) in g.chunks(d).zip(dx.chunks_mut(d)).zip(f) {
                        for j in 0..d {
                            oc[j] += gc[j] * s;
                        }
                    }
                }
                if want(*col) {
                    let xv = val(*x).data();
                    let dc = buf(grads, *col, f.len());
                    for (i, (gc, xc)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                        dc[i] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Silu { x } | Op::Gelu { x } => {
                let deriv: fn(f64) -> f64 = if matches!(node.op, Op::Silu { .. }) {
                    kernels::silu_grad
                } else {
                    kernels::gelu_grad
                };
                let xv = val(*x).data();
                for ((o, &gv), &xx) in buf(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *o += gv * deriv(xx);
                }
            }
            Op::Softmax { x } => {
                let w = node.value.last_dim();
                let dx = buf(grads, *x, g.len());
                kernels::softmax_rows_backward(node.value.data(), g, dx, w);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data().to_vec();
                let d = gv.len();
                let mut dx = want(*x).then(|| vec![0.0; g.len()]);
                let mut dg = want(*gain).then(|| vec![0.0; d]);
                let mut db = want(*bias).then(|| vec![0.0; d]);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    &gv,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, part) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(p) = part {
                        for (o, d) in buf(grads, v, p.len()).iter_mut().zip(p) {
                            *o += d;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, rstd } => {
                let gv = val(*gain).data();
                let mut dx = want(*x).then(|| vec![0.0; g.len()]);
                let mut dg = want(*gain).then(|| vec![0.0; gv.len()]);
                kernels::rms_norm_backward(g, val(*x).data(), rstd, gv, dx.as_deref_mut(), dg.as_deref_mut());
                for (v, part) in [(*x, dx), (*gain, dg)] {
                    if let Some(p) = part {
                        for (o, d) in buf(grads, v, p.len()).iter_mut().zip(p) {
                            *o += d;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).shape()[1];
                let len = node.value.shape()[1];
                let dx = buf(grads, *x, val(*x).len());
                for (r, gc) in g.chunks(len).enumerate() {
                    for (o, &v) in dx[r * cols + start..r * cols + start + len].iter_mut().zip(gc) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if want(p) {
                        for (o, &v) in buf(grads, p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::HeadScores { q, k, w, heads } => {
                let (tq, tk, tw) = (val(*q), val(*k), val(*w));
                let width = tq.last_dim();
                let d = width / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (n, v) = (tq.rows(), tk.rows());
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dw = vec![0.0; *heads];
                for i in 0..n {
                    for j in 0..v {
                        let gr = g[i * v + j];
                        if gr == 0.0 {
                            continue;
                        }
                        for h in 0..*heads {
                            let (qo, ko) = (i * width + h * d, j * width + h * d);
                            let qi = &tq.data()[qo..qo + d];
                            let kj = &tk.data()[ko..ko + d];
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                            dw[h] += gr * dot * scale;
                            let c = gr * tw.data()[h] * scale;
                            for e in 0..d {
                                dq[qo + e] += c * kj[e];
                                dk[ko + e] += c * qi[e];
                            }
                        }
                    }
                }
                for (var, part) in [(*q, dq), (*k, dk), (*w, dw)] {
                    if want(var) {
                        for (o, d) in buf(grads, var, part.len()).iter_mut().zip(part) {
                            *o += d;
                        }
                    }
                }
            }
            Op::SteGate { soft, hard } => {
                let v = val(*soft).last_dim();
                let ds = buf(grads, *soft, val(*soft).len());
                for (i, (&h, &gv)) in hard.iter().zip(g).enumerate() {
                    ds[i * v + h] += gv;
                }
            }
            Op::Mean { x } => {
                let len = val(*x).len();
                let c = g[0] / len as f64;
                for o in buf(grads, *x, len).iter_mut() {
                    *o += c;
                }
            }
            Op::MseConst { x, target } => {
                let xv = val(*x).data();
                let c = 2.0 * g[0] / xv.len() as f64;
                for ((o, &a), &b) in buf(grads, *x, xv.len()).iter_mut().zip(xv).zip(target) {
                    *o += c * (a - b);
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let width = tq.last_dim();
        let d = width / s.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dp = Vec::new();
        for (i, seg) in s.segments.iter().enumerate() {
            for h in 0..s.heads {
                let base = s.offsets[i] + h * seg.len;
                let p = &s.probs[base..base + seg.len];
                let go = &g[i * width + h * d..i * width + (h + 1) * d];
                dp.clear();
                for (jj, j) in (seg.start..seg.start + seg.len).enumerate() {
                    let off = j * width + h * d;
                    let vj = &vd[off..off + d];
                    dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    for e in 0..d {
                        dv[off + e] += p[jj] * go[e];
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qo = i * width + h * d;
                for (jj, j) in (seg.start..seg.start + seg.len).enumerate() {
                    let ds = p[jj] * (dp[jj] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = j * width + h * d;
                    for e in 0..d {
                        dq[qo + e] += ds * kd[ko + e];
                        dk[ko + e] += ds * qd[qo + e];
                    }
                }
            }
        }
        for (var, part) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.rg(var) {
                let b = grads[var.0].get_or_insert_with(|| vec![0.0; part.len()]);
                for (o, d) in b.iter_mut().zip(part) {
                    *o += d;
                }
            }
        }
    }
}
