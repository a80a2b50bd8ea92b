//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is added and the op itself is kept so [`Graph::backward`] can replay
//! the tape in reverse. Parameters are borrowed from a [`ParamStore`], never
//! copied, so several graphs can share one store read-only.
//!
//! All tensors on the tape are 2-D `[rows × cols]`; scalars are `[1 × 1]`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in gather tables: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sigmoid(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    Gather { src: Var, table: Arc<[usize]> },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Cosine(Var, Var),
    DwConv3x3 { x: Var, k: Var, h: usize, w: usize },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    capture: bool,
    taps: Vec<(String, Var)>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// `store.grad += scale · self` for every parameter reached.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in &self.params {
            let dst = store.get_mut(*id).grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
            capture: false,
            taps: Vec::new(),
        }
    }

    /// Record attention weights passed to [`Graph::tap`].
    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn tap(&mut self, label: impl Into<String>, v: Var) {
        if self.capture {
            self.taps.push((label.into(), v));
        }
    }

    pub fn taps(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.taps.iter().map(|(l, v)| (l.as_str(), self.value(*v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        r: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(r));
        let n = ta.cols();
        if tr.rows() != 1 || tr.cols() != n {
            return Err(Error::shape(name, ta.shape(), tr.shape()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tr.data()) {
                *x = f(*x, b);
            }
        }
        Tensor::matrix(ta.rows(), n, out)
    }

    /// `a[m×n] + r[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast(a, r, "add_row", |x, b| x + b)?;
        self.push(t, Op::AddRow(a, r), "add_row")
    }

    /// `a[m×n] ⊙ r[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast(a, r, "mul_row", |x, b| x * b)?;
        self.push(t, Op::MulRow(a, r), "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).scale(c);
        self.push(t, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), "add_scalar")
    }

    /// `s · a` where `s` is a `[1×1]` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("scale_by", self.value(a).shape(), ts.shape()));
        }
        let c = ts.item();
        let t = self.value(a).scale(c);
        self.push(t, Op::ScaleBy(a, s), "scale_by")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).softmax_rows()?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(t, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a), "silu")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// `out[i] = src[table[i]]` over flat indices, zero where the table holds
    /// [`GATHER_ZERO`]. Covers patch extraction, embedding lookup and
    /// space-to-depth rearrangements.
    pub fn gather(&mut self, src: Var, table: Arc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        let ts = self.value(src);
        if table.len() != rows * cols {
            return Err(Error::shape("gather", &[table.len()], &[rows, cols]));
        }
        let data = ts.data();
        let n = data.len();
        let mut out = Vec::with_capacity(table.len());
        for &i in table.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < n {
                out.push(data[i]);
            } else {
                return Err(Error::Invalid(format!("gather index {i} out of range {n}")));
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        self.push(t, Op::Gather { src, table }, "gather")
    }

    /// Rows `ids` of a `[n×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let d = self.value(table).cols();
        let idx: Vec<usize> = ids
            .iter()
            .flat_map(|&i| (0..d).map(move |j| i * d + j))
            .collect();
        self.gather(table, idx.into(), ids.len(), d)
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r || len == 0 {
            return Err(Error::Invalid(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        let idx: Vec<usize> = (start * c..(start + len) * c).collect();
        self.gather(a, idx.into(), len, c)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).mean_rows();
        self.push(t, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.numel() as f64);
        self.push(t, Op::Mean(a), "mean")
    }

    /// Cosine similarity of two `[1×n]` vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::shape("cosine", ta.shape(), tb.shape()));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let s = (dot / (na * nb)).clamp(-1.0, 1.0);
        self.push(Tensor::scalar(s), Op::Cosine(a, b), "cosine")
    }

    /// Depthwise 3×3 convolution with zero padding over an `h×w` token grid.
    /// `x` is `[h·w × C]`, `k` is `[9 × C]` with taps in row-major order.
    pub fn dwconv3x3(&mut self, x: Var, k: Var, h: usize, w: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let c = tx.cols();
        if tx.rows() != h * w || tk.rows() != 9 || tk.cols() != c {
            return Err(Error::shape("dwconv3x3", tx.shape(), tk.shape()));
        }
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
                for tap in 0..9 {
                    let (dy, dx) = (tap / 3, tap % 3);
                    let (sy, sx) = (y + dy, xx + dx);
                    if sy == 0 || sx == 0 || sy > h || sx > w {
                        continue;
                    }
                    let src = ((sy - 1) * w + (sx - 1)) * c;
                    let krow = &kd[tap * c..(tap + 1) * c];
                    for ((ov, &xv), &kv) in o.iter_mut().zip(&xd[src..src + c]).zip(krow) {
                        *ov += xv * kv;
                    }
                }
            }
        }
        let t = Tensor::matrix(h * w, c, out)?;
        self.push(t, Op::DwConv3x3 { x, k, h, w }, "dwconv3x3")
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&loss_shape, 1.0));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(Var(i));
            let gd = g.data();
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => params.push((*id, g.clone())),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    matmul_nt(gd, tb.data(), slot(&mut grads, *a, ta.shape()), m, n, k);
                    matmul_tn(ta.data(), gd, slot(&mut grads, *b, tb.shape()), m, k, n);
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    matmul_nn(gd, tb.data(), slot(&mut grads, *a, ta.shape()), m, n, k);
                    matmul_tn(gd, ta.data(), slot(&mut grads, *b, tb.shape()), m, n, k);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, out.shape()), gd);
                    add_into(slot(&mut grads, *b, out.shape()), gd);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, out.shape()), gd);
                    for (d, s) in slot(&mut grads, *b, out.shape()).iter_mut().zip(gd) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    for ((d, s), y) in slot(&mut grads, *a, out.shape()).iter_mut().zip(gd).zip(tb.data()) {
                        *d += s * y;
                    }
                    for ((d, s), x) in slot(&mut grads, *b, out.shape()).iter_mut().zip(gd).zip(ta.data()) {
                        *d += s * x;
                    }
                }
                Op::AddRow(a, r) => {
                    let n = out.cols();
                    add_into(slot(&mut grads, *a, out.shape()), gd);
                    let dr = slot(&mut grads, *r, &[1, n]);
                    for row in gd.chunks(n) {
                        add_into(dr, row);
                    }
                }
                Op::MulRow(a, r) => {
                    let (ta, tr) = (self.value(*a), self.value(*r));
                    let n = out.cols();
                    let da = slot(&mut grads, *a, ta.shape());
                    for (drow, grow) in da.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((d, s), rv) in drow.iter_mut().zip(grow).zip(tr.data()) {
                            *d += s * rv;
                        }
                    }
                    let dr = slot(&mut grads, *r, &[1, n]);
                    for (arow, grow) in ta.data().chunks(n).zip(gd.chunks(n)) {
                        for ((d, s), x) in dr.iter_mut().zip(grow).zip(arow) {
                            *d += s * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (d, s) in slot(&mut grads, *a, out.shape()).iter_mut().zip(gd) {
                        *d += c * s;
                    }
                }
                Op::AddScalar(a) => add_into(slot(&mut grads, *a, out.shape()), gd),
                Op::ScaleBy(a, s) => {
                    let (ta, ts) = (self.value(*a), self.value(*s));
                    let c = ts.item();
                    for (d, gv) in slot(&mut grads, *a, ta.shape()).iter_mut().zip(gd) {
                        *d += c * gv;
                    }
                    let ds: f64 = gd.iter().zip(ta.data()).map(|(gv, x)| gv * x).sum();
                    slot(&mut grads, *s, ts.shape())[0] += ds;
                }
                Op::Softmax(a) => {
                    let n = out.cols();
                    let da = slot(&mut grads, *a, out.shape());
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let n = out.cols();
                    let da = slot(&mut grads, *x, out.shape());
                    for (((drow, grow), yrow), is) in da
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(out.data().chunks(n))
                        .zip(inv_std)
                    {
                        let mg = grow.iter().sum::<f64>() / n as f64;
                        let mgy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += is * (gv - mg - y * mgy);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for ((d, gv), y) in slot(&mut grads, *a, out.shape()).iter_mut().zip(gd).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                Op::Silu(a) => {
                    let ta = self.value(*a);
                    for ((d, gv), x) in slot(&mut grads, *a, out.shape()).iter_mut().zip(gd).zip(ta.data()) {
                        let s = sigmoid(*x);
                        *d += gv * (s + x * s * (1.0 - s));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let n = tp.numel();
                        add_into(slot(&mut grads, *p, tp.shape()), &gd[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Gather { src, table } => {
                    let ts = self.value(*src);
                    let ds = slot(&mut grads, *src, ts.shape());
                    for (&idx, gv) in table.iter().zip(gd) {
                        if idx != GATHER_ZERO {
                            ds[idx] += gv;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let (r, n) = (ta.rows(), ta.cols());
                    let da = slot(&mut grads, *a, ta.shape());
                    for drow in da.chunks_mut(n) {
                        for (d, gv) in drow.iter_mut().zip(gd) {
                            *d += gv / r as f64;
                        }
                    }
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    for d in slot(&mut grads, *a, ta.shape()).iter_mut() {
                        *d += gd[0];
                    }
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let c = gd[0] / ta.numel() as f64;
                    for d in slot(&mut grads, *a, ta.shape()).iter_mut() {
                        *d += c;
                    }
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (na, nb) = (ta.norm(), tb.norm());
                    let s = out.item();
                    let gv = gd[0];
                    // ∂s/∂a = b/(|a||b|) − s·a/|a|²
                    for ((d, x), y) in slot(&mut grads, *a, ta.shape()).iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d += gv * (y / (na * nb) - s * x / (na * na));
                    }
                    for ((d, x), y) in slot(&mut grads, *b, tb.shape()).iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d += gv * (x / (na * nb) - s * y / (nb * nb));
                    }
                }
                Op::DwConv3x3 { x, k, h, w } => {
                    let (tx, tk) = (self.value(*x), self.value(*k));
                    let (h, w, c) = (*h, *w, tx.cols());
                    let (xd, kd) = (tx.data(), tk.data());
                    {
                        let dx = slot(&mut grads, *x, tx.shape());
                        for y in 0..h {
                            for xx in 0..w {
                                let grow = &gd[(y * w + xx) * c..(y * w + xx + 1) * c];
                                for tap in 0..9 {
                                    let (sy, sx) = (y + tap / 3, xx + tap % 3);
                                    if sy == 0 || sx == 0 || sy > h || sx > w {
                                        continue;
                                    }
                                    let src = ((sy - 1) * w + (sx - 1)) * c;
                                    let krow = &kd[tap * c..(tap + 1) * c];
                                    for ((d, gv), kv) in dx[src..src + c].iter_mut().zip(grow).zip(krow) {
                                        *d += gv * kv;
                                    }
                                }
                            }
                        }
                    }
                    let dk = slot(&mut grads, *k, tk.shape());
                    for y in 0..h {
                        for xx in 0..w {
                            let grow = &gd[(y * w + xx) * c..(y * w + xx + 1) * c];
                            for tap in 0..9 {
                                let (sy, sx) = (y + tap / 3, xx + tap % 3);
                                if sy == 0 || sx == 0 || sy > h || sx > w {
                                    continue;
                                }
                                let src = ((sy - 1) * w + (sx - 1)) * c;
                                for ((d, gv), xv) in dk[tap * c..(tap + 1) * c].iter_mut().zip(grow).zip(&xd[src..src + c]) {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn store_with(shape: &[usize], seed: u64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(seed);
        let id = s.add_normal("p", shape, 1.0, &mut rng).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (s, id) = store_with(&[3, 4], 1);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(id).unwrap(), &Tensor::filled(&[3, 4], 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let (s, id) = store_with(&[2, 5], 2);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let sq = g.mul(p, p).unwrap();
        let sum = g.sum(sq).unwrap();
        let l = g.scale(sum, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.param(id).unwrap().max_abs_diff(s.value(id)) < 1e-15);
    }

    #[test]
    fn second_backward_fails() {
        let (s, id) = store_with(&[2], 3);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (s, id) = store_with(&[2, 2], 4);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn param_var_is_shared() {
        let (s, id) = store_with(&[2], 5);
        let mut g = Graph::new(&s);
        assert_eq!(g.param(id), g.param(id));
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[1, 3]));
        let b = g.input(Tensor::filled(&[1, 3], 1.0));
        assert!(matches!(g.cosine(a, b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gather_zero_padding() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let t: Arc<[usize]> = vec![2, GATHER_ZERO, 0, 0].into();
        let o = g.gather(a, t, 2, 2).unwrap();
        assert_eq!(g.value(o).data(), &[3.0, 0.0, 1.0, 1.0]);
        let l = g.sum(o).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::scalar(1e308));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
    }
}
