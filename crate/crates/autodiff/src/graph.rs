//! The tape, its variables, and the reverse sweep.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends one node
//! holding its value and, when any input requires a gradient, the data the
//! backward rule needs. Nodes are only ever appended, so a node's inputs
//! always precede it and a single reverse walk over the tape visits every
//! node after all of its consumers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, AutodiffError, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Row ranges of a ragged batch: segment `i` covers rows `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            offsets.push(offsets.last().unwrap() + len);
        }
        Self { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Segment index of every row.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (i, len) in self.lengths().enumerate() {
            out.extend(std::iter::repeat(i).take(len));
        }
        out
    }
}

/// Cosine-similarity denominators are clamped to this value.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    XLogX(usize),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    LayerNorm(usize, Vec<f64>),
    Glu(usize),
    Cosine {
        a: usize,
        c: usize,
        a_norm: Vec<f64>,
        c_norm: Vec<f64>,
    },
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Mse(usize, usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterRows(usize, Arc<Vec<usize>>),
    SegRepeat(usize, Arc<Segments>),
    SegSum(usize, Arc<Segments>),
    SegMean(usize, Arc<Segments>),
    SegLogSoftmax(usize, Arc<Segments>),
    SelectPerRow(usize, Arc<Vec<Vec<usize>>>),
    ScatterPerRow(usize, Arc<Vec<Vec<usize>>>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        q_seg: Arc<Segments>,
        k_seg: Arc<Segments>,
        weights: Vec<f64>,
    },
    Reshape(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = x.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max) / temperature - lse;
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let node = nodes.len() - 1;
        self.params.borrow_mut().insert(id, node);
        Var { graph: self, id: node }
    }

    /// Concatenates along the last axis.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rows = first.value().rows();
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rows() != rows {
                return Err(mismatch("concat", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            matrix(rows, total, data),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Ragged multi-head scaled dot-product attention.
    ///
    /// Query rows of segment `s` attend only to key/value rows of segment `s`;
    /// rows outside the segment never enter that softmax.
    pub fn attention<'g>(
        &'g self,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
        heads: usize,
        q_seg: &Arc<Segments>,
        k_seg: &Arc<Segments>,
    ) -> Result<Var<'g>> {
        let (qt, kt, vt) = (q.value(), k.value(), v.value());
        same_shape("attention", &kt, &vt)?;
        let d = qt.cols();
        if kt.cols() != d {
            return Err(mismatch("attention", &qt, &kt));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("{heads} heads do not divide width {d}")));
        }
        if q_seg.count() != k_seg.count() || q_seg.total() != qt.rows() || k_seg.total() != kt.rows() {
            return Err(invalid("attention", "segments do not match row counts"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; qt.rows() * d];
        let mut weights = Vec::new();
        let mut scores = Vec::new();
        for s in 0..q_seg.count() {
            let keys = k_seg.range(s);
            if keys.is_empty() && !q_seg.range(s).is_empty() {
                return Err(invalid("attention", format!("segment {s} has no unmasked keys")));
            }
            for r in q_seg.range(s) {
                let q_row = qt.row(r);
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    scores.clear();
                    for j in keys.clone() {
                        let k_row = &kt.row(j)[hs.clone()];
                        let dot: f64 = q_row[hs.clone()].iter().zip(k_row).map(|(a, b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    let base = weights.len();
                    weights.resize(base + scores.len(), 0.0);
                    softmax_row(&scores, 1.0, &mut weights[base..]);
                    let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                    for (w, j) in weights[base..].iter().zip(keys.clone()) {
                        for (ov, vv) in o.iter_mut().zip(&vt.row(j)[hs.clone()]) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        let rg = self.needs(q.id) || self.needs(k.id) || self.needs(v.id);
        Ok(self.push(
            matrix(qt.rows(), d, out),
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                q_seg: Arc::clone(q_seg),
                k_seg: Arc::clone(k_seg),
                weights,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&pid, &node)| (pid, node))
            .collect();
        Ok(Gradients { grads: out, params })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if need(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if need(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Op::AddRow(x, b) => {
            accumulate(nodes, grads, *x, g.to_vec());
            if need(*b) {
                let c = val(*b).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MulRow(x, s) => {
            let (xv, sv) = (val(*x).data(), val(*s).data());
            let c = sv.len();
            if need(*x) {
                let dx = g
                    .chunks_exact(c)
                    .flat_map(|row| row.iter().zip(sv).map(|(g, s)| g * s))
                    .collect();
                accumulate(nodes, grads, *x, dx);
            }
            if need(*s) {
                let mut ds = vec![0.0; c];
                for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for ((d, gv), xv) in ds.iter_mut().zip(grow).zip(xrow) {
                        *d += gv * xv;
                    }
                }
                accumulate(nodes, grads, *s, ds);
            }
        }
        Op::ScaleRows(x, s) => {
            let (xt, sv) = (val(*x), val(*s).data());
            let c = xt.cols();
            if need(*x) {
                let dx = g
                    .chunks_exact(c)
                    .zip(sv)
                    .flat_map(|(row, s)| row.iter().map(move |g| g * s))
                    .collect();
                accumulate(nodes, grads, *x, dx);
            }
            if need(*s) {
                let ds = g
                    .chunks_exact(c)
                    .zip(xt.data().chunks_exact(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, *s, ds);
            }
        }
        Op::Scale(x, k) => accumulate(nodes, grads, *x, g.iter().map(|v| v * k).collect()),
        Op::Shift(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (n, k, m) = (at.rows(), at.cols(), bt.cols());
            if need(*a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(g, bt.data(), n, m, k));
            }
            if need(*b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(at.data(), g, n, k, m));
            }
        }
        Op::Sigmoid(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ),
        Op::Tanh(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
        ),
        Op::Relu(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Exp(x) => accumulate(nodes, grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        Op::Ln(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect(),
        ),
        Op::XLogX(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, x)| if *x > 0.0 { g * (x.ln() + 1.0) } else { 0.0 })
                .collect(),
        ),
        Op::Softmax(x, t) => {
            let c = node.value.cols();
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot) / t));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LogSoftmax(x, t) => {
            let c = node.value.cols();
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                let total: f64 = grow.iter().sum();
                dx.extend(grow.iter().zip(yrow).map(|(g, y)| (g - y.exp() * total) / t));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm(x, inv_std) => {
            let c = node.value.cols();
            let mut dx = Vec::with_capacity(g.len());
            for ((grow, yrow), is) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(inv_std) {
                let mean_g = grow.iter().sum::<f64>() / c as f64;
                let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                dx.extend(grow.iter().zip(yrow).map(|(g, y)| is * (g - mean_g - y * mean_gy)));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Glu(x) => {
            let xt = val(*x);
            let c = xt.cols();
            let h = c / 2;
            let mut dx = Vec::with_capacity(xt.numel());
            for (xrow, grow) in xt.data().chunks_exact(c).zip(g.chunks_exact(h)) {
                let (a, b) = xrow.split_at(h);
                let sig: Vec<f64> = b.iter().map(|&v| sigmoid(v)).collect();
                dx.extend(grow.iter().zip(&sig).map(|(g, s)| g * s));
                dx.extend(
                    grow.iter()
                        .zip(&sig)
                        .zip(a)
                        .map(|((g, s), a)| g * a * s * (1.0 - s)),
                );
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Cosine { a, c, a_norm, c_norm } => {
            let (at, ct) = (val(*a), val(*c));
            let (n, k, d) = (at.rows(), ct.rows(), at.cols());
            let a_free: Vec<bool> = at
                .data()
                .chunks_exact(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > COSINE_EPS)
                .collect();
            let c_free: Vec<bool> = ct
                .data()
                .chunks_exact(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > COSINE_EPS)
                .collect();
            let mut da = vec![0.0; n * d];
            let mut dc = vec![0.0; k * d];
            for i in 0..n {
                let ar = at.row(i);
                for j in 0..k {
                    let gij = g[i * k + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let cr = ct.row(j);
                    let s = y[i * k + j];
                    let denom = a_norm[i] * c_norm[j];
                    for t in 0..d {
                        let mut ga = cr[t] / denom;
                        if a_free[i] {
                            ga -= s * ar[t] / (a_norm[i] * a_norm[i]);
                        }
                        da[i * d + t] += gij * ga;
                        let mut gc = ar[t] / denom;
                        if c_free[j] {
                            gc -= s * cr[t] / (c_norm[j] * c_norm[j]);
                        }
                        dc[j * d + t] += gij * gc;
                    }
                }
            }
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *c, dc);
        }
        Op::Concat(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if need(p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, dp);
                }
                offset += w;
            }
        }
        Op::Slice(x, start, end) => {
            let xt = val(*x);
            let c = xt.cols();
            let w = end - start;
            let mut dx = vec![0.0; xt.numel()];
            for r in 0..xt.rows() {
                dx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]),
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(x) => {
            let xt = val(*x);
            let dx = (0..xt.rows()).flat_map(|_| g.iter().copied()).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let scale = 2.0 * g[0] / av.len() as f64;
            let da: Vec<f64> = av.iter().zip(bv).map(|(a, b)| scale * (a - b)).collect();
            if need(*b) {
                accumulate(nodes, grads, *b, da.iter().map(|v| -v).collect());
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::Clamp(x, lo, hi) => accumulate(
            nodes,
            grads,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                .collect(),
        ),
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let pick_a: Vec<bool> = av.iter().zip(bv).map(|(a, b)| a <= b).collect();
            accumulate(
                nodes,
                grads,
                *a,
                g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect(),
            );
            accumulate(
                nodes,
                grads,
                *b,
                g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect(),
            );
        }
        Op::GatherRows(x, idx) => {
            let xt = val(*x);
            let c = xt.cols();
            let mut dx = vec![0.0; xt.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *d += v;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ScatterRows(x, idx) => {
            let c = node.value.cols();
            let dx = idx
                .iter()
                .flat_map(|&dst| g[dst * c..(dst + 1) * c].iter().copied())
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::SegRepeat(x, seg) => {
            let c = node.value.cols();
            let mut dx = vec![0.0; seg.count() * c];
            for s in 0..seg.count() {
                for r in seg.range(s) {
                    for (d, v) in dx[s * c..(s + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += v;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SegSum(x, seg) | Op::SegMean(x, seg) => {
            let mean = matches!(node.op, Op::SegMean(..));
            let c = node.value.cols();
            let mut dx = vec![0.0; seg.total() * c];
            for s in 0..seg.count() {
                let scale = if mean { 1.0 / seg.len_of(s) as f64 } else { 1.0 };
                for r in seg.range(s) {
                    for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                        *d = v * scale;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SegLogSoftmax(x, seg) => {
            let mut dx = vec![0.0; g.len()];
            for s in 0..seg.count() {
                let range = seg.range(s);
                let total: f64 = g[range.clone()].iter().sum();
                for r in range {
                    dx[r] = g[r] - y[r].exp() * total;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SelectPerRow(x, idx) => {
            let xt = val(*x);
            let (c, k) = (xt.cols(), node.value.cols());
            let mut dx = vec![0.0; xt.numel()];
            for (r, sel) in idx.iter().enumerate() {
                for (j, &col) in sel.iter().enumerate() {
                    dx[r * c + col] += g[r * k + j];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ScatterPerRow(x, idx) => {
            let (c, k) = (node.value.cols(), val(*x).cols());
            let mut dx = vec![0.0; idx.len() * k];
            for (r, sel) in idx.iter().enumerate() {
                for (j, &col) in sel.iter().enumerate() {
                    dx[r * k + j] = g[r * c + col];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            q_seg,
            k_seg,
            weights,
        } => {
            let (qt, kt, vt) = (val(*q), val(*k), val(*v));
            let d = qt.cols();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; qt.numel()];
            let mut dk = vec![0.0; kt.numel()];
            let mut dv = vec![0.0; vt.numel()];
            let mut w_at = 0;
            let mut dw = Vec::new();
            for s in 0..q_seg.count() {
                let keys = k_seg.range(s);
                for r in q_seg.range(s) {
                    for h in 0..*heads {
                        let hs = h * dh..(h + 1) * dh;
                        let gout = &g[r * d + hs.start..r * d + hs.end];
                        let w = &weights[w_at..w_at + keys.len()];
                        w_at += keys.len();
                        dw.clear();
                        for (wj, j) in w.iter().zip(keys.clone()) {
                            let vrow = &vt.row(j)[hs.clone()];
                            dw.push(gout.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>());
                            for (dvv, go) in dv[j * d + hs.start..j * d + hs.end].iter_mut().zip(gout) {
                                *dvv += wj * go;
                            }
                        }
                        let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                        let q_row = &qt.row(r)[hs.clone()];
                        for ((wj, dwj), j) in w.iter().zip(&dw).zip(keys.clone()) {
                            let ds = wj * (dwj - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let k_row = &kt.row(j)[hs.clone()];
                            for (dqq, kk) in dq[r * d + hs.start..r * d + hs.end].iter_mut().zip(k_row) {
                                *dqq += ds * kk;
                            }
                            for (dkk, qq) in dk[j * d + hs.start..j * d + hs.end].iter_mut().zip(q_row) {
                                *dkk += ds * qq;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it was reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter that the sweep reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, node)| self.grads[node].as_ref())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn check(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables from different graphs"
        );
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, op)
    }

    fn zip_with(self, other: Var<'g>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.check(&other);
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, op))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "minimum", Op::Minimum(self.id, other.id), f64::min)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.check(&bias);
        let (x, b) = (self.value(), bias.value());
        if b.numel() != x.cols() {
            return Err(mismatch("add_row", &x, &b));
        }
        let c = x.cols();
        let data = x
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|row| row.iter().zip(b.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(self, gain: Var<'g>) -> Result<Var<'g>> {
        self.check(&gain);
        let (x, s) = (self.value(), gain.value());
        if s.numel() != x.cols() {
            return Err(mismatch("mul_row", &x, &s));
        }
        let c = x.cols();
        let data = x
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|row| row.iter().zip(s.data()).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(gain, out, Op::MulRow(self.id, gain.id)))
    }

    /// Multiplies row `i` by the scalar `s[i]`.
    pub fn scale_rows(self, s: Var<'g>) -> Result<Var<'g>> {
        self.check(&s);
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != x.rows() {
            return Err(mismatch("scale_rows", &x, &sv));
        }
        let c = x.cols();
        let data = x
            .data()
            .chunks_exact(c.max(1))
            .zip(sv.data())
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(s, out, Op::ScaleRows(self.id, s.id)))
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.map(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.map(Op::Shift(self.id), |v| v + k)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.check(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(mismatch("matmul", &a, &b));
        }
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let out = matrix(n, m, kernels::matmul(a.data(), b.data(), n, k, m));
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'g> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn exp(self) -> Var<'g> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.map(Op::Ln(self.id), f64::ln)
    }

    /// `x ln x` with the convention `0 ln 0 = 0`.
    pub fn xlogx(self) -> Var<'g> {
        self.map(Op::XLogX(self.id), |v| if v > 0.0 { v * v.ln() } else { 0.0 })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.map(Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    fn rowwise(self, name: &'static str, temperature: f64, log: bool) -> Result<Var<'g>> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(invalid(name, format!("temperature must be positive, got {temperature}")));
        }
        let x = self.value();
        let c = x.cols();
        let mut data = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(c.max(1)).zip(data.chunks_exact_mut(c.max(1))) {
            if log {
                log_softmax_row(src, temperature, dst);
            } else {
                softmax_row(src, temperature, dst);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let op = if log {
            Op::LogSoftmax(self.id, temperature)
        } else {
            Op::Softmax(self.id, temperature)
        };
        Ok(self.unary(out, op))
    }

    /// Row-wise `softmax(x / temperature)`, max-subtracted.
    pub fn softmax(self, temperature: f64) -> Result<Var<'g>> {
        self.rowwise("softmax", temperature, false)
    }

    pub fn log_softmax(self, temperature: f64) -> Result<Var<'g>> {
        self.rowwise("log_softmax", temperature, true)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in x.data().chunks_exact(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * is));
            inv_std.push(is);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::LayerNorm(self.id, inv_std))
    }

    /// Gated linear unit: the last axis splits into `(value, gate)` halves
    /// and the result is `value ⊙ σ(gate)`.
    pub fn glu(self) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        if c % 2 != 0 {
            return Err(invalid("glu", format!("last axis {c} is odd")));
        }
        let h = c / 2;
        let data = x
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|row| {
                let (a, b) = row.split_at(h);
                a.iter().zip(b).map(|(a, b)| a * sigmoid(*b)).collect::<Vec<_>>()
            })
            .collect();
        let mut shape = x.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = h;
        }
        Ok(self.unary(Tensor::new(shape, data)?, Op::Glu(self.id)))
    }

    /// Pairwise cosine similarity of rows: `[n, d] × [k, d] → [n, k]`.
    pub fn cosine_similarity(self, other: Var<'g>) -> Result<Var<'g>> {
        self.check(&other);
        let (a, c) = (self.value(), other.value());
        if a.cols() != c.cols() {
            return Err(mismatch("cosine_similarity", &a, &c));
        }
        let d = a.cols();
        let norms = |t: &Tensor| -> Vec<f64> {
            t.data()
                .chunks_exact(d.max(1))
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS))
                .collect()
        };
        let (an, cn) = (norms(&a), norms(&c));
        let (n, k) = (a.rows(), c.rows());
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let dot: f64 = a.row(i).iter().zip(c.row(j)).map(|(x, y)| x * y).sum();
                data[i * k + j] = dot / (an[i] * cn[j]);
            }
        }
        let out = matrix(n, k, data);
        Ok(self.binary(
            other,
            out,
            Op::Cosine {
                a: self.id,
                c: other.id,
                a_norm: an,
                c_norm: cn,
            },
        ))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        if start > end || end > x.cols() {
            return Err(invalid("slice", format!("{start}..{end} outside {} columns", x.cols())));
        }
        let c = x.cols();
        let data = x
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Ok(self.unary(matrix(x.rows(), end - start, data), Op::Slice(self.id, start, end)))
    }

    pub fn sum(self) -> Var<'g> {
        let total = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Column sums: `[n, c] → [1, c]`.
    pub fn sum_rows(self) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut out = vec![0.0; c];
        for row in x.data().chunks_exact(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.unary(matrix(1, c, out), Op::SumRows(self.id))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        self.check(&target);
        let (a, b) = (self.value(), target.value());
        same_shape("mse", &a, &b)?;
        let m = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        Ok(self.binary(target, Tensor::scalar(m), Op::Mse(self.id, target.id)))
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(self) -> Var<'g> {
        let x = self.value();
        self.graph.push((*x).clone(), Op::Leaf, false)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g>> {
        let x = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(x, Op::Reshape(self.id)))
    }

    /// Row `r` of the output is row `idx[r]` of the input.
    pub fn gather_rows(self, idx: &Arc<Vec<usize>>) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= x.rows() {
                return Err(invalid("gather_rows", format!("row {i} out of {}", x.rows())));
            }
            data.extend_from_slice(x.row(i));
        }
        Ok(self.unary(matrix(idx.len(), c, data), Op::GatherRows(self.id, Arc::clone(idx))))
    }

    /// Adds row `r` of the input into row `idx[r]` of a zero `[rows, cols]` output.
    pub fn scatter_rows(self, idx: &Arc<Vec<usize>>, rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        if idx.len() != x.rows() {
            return Err(invalid("scatter_rows", "index length differs from row count"));
        }
        let c = x.cols();
        let mut data = vec![0.0; rows * c];
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(invalid("scatter_rows", format!("row {dst} out of {rows}")));
            }
            for (d, v) in data[dst * c..(dst + 1) * c].iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        Ok(self.unary(matrix(rows, c, data), Op::ScatterRows(self.id, Arc::clone(idx))))
    }

    /// Copies row `s` to every row of segment `s`.
    pub fn segment_repeat(self, seg: &Arc<Segments>) -> Result<Var<'g>> {
        let x = self.value();
        if x.rows() != seg.count() {
            return Err(invalid("segment_repeat", "one input row per segment required"));
        }
        let c = x.cols();
        let mut data = Vec::with_capacity(seg.total() * c);
        for (s, len) in seg.lengths().enumerate() {
            for _ in 0..len {
                data.extend_from_slice(x.row(s));
            }
        }
        Ok(self.unary(matrix(seg.total(), c, data), Op::SegRepeat(self.id, Arc::clone(seg))))
    }

    fn segment_reduce(self, seg: &Arc<Segments>, mean: bool) -> Result<Var<'g>> {
        let name = if mean { "segment_mean" } else { "segment_sum" };
        let x = self.value();
        if x.rows() != seg.total() {
            return Err(invalid(name, "segments do not cover the rows"));
        }
        let c = x.cols();
        let mut data = vec![0.0; seg.count() * c];
        for s in 0..seg.count() {
            if mean && seg.len_of(s) == 0 {
                return Err(invalid(name, format!("segment {s} is empty")));
            }
            let out = &mut data[s * c..(s + 1) * c];
            for r in seg.range(s) {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            if mean {
                let n = seg.len_of(s) as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
        let op = if mean {
            Op::SegMean(self.id, Arc::clone(seg))
        } else {
            Op::SegSum(self.id, Arc::clone(seg))
        };
        Ok(self.unary(matrix(seg.count(), c, data), op))
    }

    pub fn segment_sum(self, seg: &Arc<Segments>) -> Result<Var<'g>> {
        self.segment_reduce(seg, false)
    }

    pub fn segment_mean(self, seg: &Arc<Segments>) -> Result<Var<'g>> {
        self.segment_reduce(seg, true)
    }

    /// Log-softmax of a single column within each segment.
    pub fn segment_log_softmax(self, seg: &Arc<Segments>) -> Result<Var<'g>> {
        let x = self.value();
        if x.cols() != 1 || x.rows() != seg.total() {
            return Err(invalid("segment_log_softmax", "expected one column covering all segments"));
        }
        let mut data = vec![0.0; x.numel()];
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                return Err(invalid("segment_log_softmax", format!("segment {s} is empty")));
            }
            log_softmax_row(&x.data()[r.clone()], 1.0, &mut data[r]);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(out, Op::SegLogSoftmax(self.id, Arc::clone(seg))))
    }

    /// Picks `idx[r]` columns from row `r`: `[n, c] → [n, k]`.
    pub fn select_per_row(self, idx: &Arc<Vec<Vec<usize>>>) -> Result<Var<'g>> {
        let x = self.value();
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != x.rows() || idx.iter().any(|s| s.len() != k || s.iter().any(|&c| c >= x.cols())) {
            return Err(invalid("select_per_row", "index table does not fit the input"));
        }
        let data = idx
            .iter()
            .enumerate()
            .flat_map(|(r, sel)| sel.iter().map(move |&c| (r, c)))
            .map(|(r, c)| x.row(r)[c])
            .collect();
        Ok(self.unary(matrix(x.rows(), k, data), Op::SelectPerRow(self.id, Arc::clone(idx))))
    }

    /// Inverse of [`Var::select_per_row`]: writes `[n, k]` into columns of a zero `[n, cols]`.
    pub fn scatter_per_row(self, idx: &Arc<Vec<Vec<usize>>>, cols: usize) -> Result<Var<'g>> {
        let x = self.value();
        let k = x.cols();
        if idx.len() != x.rows() || idx.iter().any(|s| s.len() != k || s.iter().any(|&c| c >= cols)) {
            return Err(invalid("scatter_per_row", "index table does not fit the input"));
        }
        let mut data = vec![0.0; x.rows() * cols];
        for (r, sel) in idx.iter().enumerate() {
            for (j, &c) in sel.iter().enumerate() {
                data[r * cols + c] = x.row(r)[j];
            }
        }
        Ok(self.unary(matrix(x.rows(), cols, data), Op::ScatterPerRow(self.id, Arc::clone(idx))))
    }
}
