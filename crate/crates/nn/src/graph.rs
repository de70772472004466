//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking them backwards is a
//! valid reverse topological order for [`Graph::backward`].

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query rows attending to key rows; used to batch independent sequences
/// through one attention node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub query: Range<usize>,
    pub key: Range<usize>,
}

/// Geometry of an im2col lowering. Input rows are pixels in (image, row,
/// column) order and columns are channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Input pixel row feeding output pixel `o` at kernel offset `(ky, kx)`.
    fn source(&self, o: usize, ky: usize, kx: usize) -> Option<usize> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let b = o / (oh * ow);
        let rem = o % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return None;
        }
        Some((b * self.height + y as usize) * self.width + x as usize)
    }
}

#[derive(Debug)]
struct AttentionCache {
    heads: usize,
    segments: Vec<Segment>,
    /// Valid key rows per segment.
    keys: Vec<Vec<usize>>,
    /// Attention weights per (segment, head), `query x valid keys`.
    probs: Vec<Tensor>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    NormalizeRows(Var),
    StandardizeCols(Var, f64),
    Attention(Var, Var, Var, Box<AttentionCache>),
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, Vec<Range<usize>>),
    Im2Col(Var, ConvGeometry),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const NORM_FLOOR: f64 = 1e-12;

impl Graph {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Leaf for a parameter. Repeated requests return the same node, so a
    /// parameter used twice accumulates both gradient contributions. Frozen
    /// sets enter as constants.
    pub fn param(&mut self, set: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = set.get(id).clone();
        let v = if set.is_frozen() {
            self.push(value, Op::Constant, &[])
        } else {
            self.push(value, Op::Param, &[])
        };
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &bias) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += bias;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// `alpha * a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = self.value(a).map(|v| alpha * v + beta);
        self.push(out, Op::Affine(a, alpha), &[a])
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-sum-exp, skipping entries where `exclude` is true.
    pub fn logsumexp_rows(&mut self, a: Var, exclude: Option<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = &exclude {
            if m.len() != x.len() {
                return Err(Error::Invalid("exclusion mask size".into()));
            }
        }
        let mut out = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let keep = |c: usize| exclude.as_ref().is_none_or(|m| !m[r * x.cols() + c]);
            let max = (0..x.cols()).filter(|&c| keep(c)).map(|c| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Invalid(format!("row {r} has no entries left for log-sum-exp")));
            }
            let s: f64 = (0..x.cols()).filter(|&c| keep(c)).map(|c| (x.get(r, c) - max).exp()).sum();
            out.set(r, 0, max + s.ln());
        }
        Ok(self.push(out, Op::LogSumExpRows(a, exclude), &[a]))
    }

    /// Column vector of the entries at `coords`.
    pub fn pick(&mut self, a: Var, coords: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.value(a);
        if coords.iter().any(|&(r, c)| r >= x.rows() || c >= x.cols()) {
            return Err(Error::Invalid("pick coordinate out of range".into()));
        }
        let out = Tensor::new(coords.len(), 1, coords.iter().map(|&(r, c)| x.get(r, c)).collect())?;
        Ok(self.push(out, Op::Pick(a, coords), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(bad)));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if cols.end > x.cols() || cols.start > cols.end {
            return Err(Error::Invalid(format!("column range {cols:?} of {} columns", x.cols())));
        }
        let out = Tensor::from_fn(x.rows(), cols.len(), |r, c| x.get(r, cols.start + c));
        Ok(self.push(out, Op::SliceCols(a, cols.start), &[a]))
    }

    /// Row `i` of the output is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let x = self.value(a);
        if idx.iter().flatten().any(|&i| i >= x.rows()) {
            return Err(Error::Invalid("gather index out of range".into()));
        }
        let mut out = Tensor::zeros(idx.len(), x.cols());
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(o).copy_from_slice(x.row(i));
            }
        }
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        self.gather_rows(a, rows.map(Some).collect())
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::NormalizeRows(a), &[a])
    }

    /// Per-column `(x - mean) / (std + eps)` with the population deviation.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let mut out = x.clone();
        for c in 0..x.cols() {
            let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = (0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            let s = var.sqrt() + eps;
            for r in 0..x.rows() {
                out.set(r, c, (x.get(r, c) - mean) / s);
            }
        }
        self.push(out, Op::StandardizeCols(a, eps), &[a])
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Each segment attends only within its key
    /// range; `key_mask[j] == false` removes key row `j`. Query rows with no
    /// segment, or whose keys are all masked, get zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        if kt.cols() != d || vt.cols() != d {
            return Err(Error::shape("attention", qt.shape(), kt.shape()));
        }
        if kt.rows() != vt.rows() {
            return Err(Error::shape("attention", kt.shape(), vt.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("width {d} is not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != kt.rows() {
                return Err(Error::Invalid("key mask length".into()));
            }
        }
        for s in &segments {
            if s.query.end > qt.rows() || s.key.end > kt.rows() {
                return Err(Error::Invalid(format!("segment {s:?} out of range")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qt.rows(), d);
        let mut keys = Vec::with_capacity(segments.len());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for s in &segments {
            let valid: Vec<usize> = s.key.clone().filter(|&j| key_mask.is_none_or(|m| m[j])).collect();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Tensor::zeros(s.query.len(), valid.len());
                if !valid.is_empty() {
                    for (qi, i) in s.query.clone().enumerate() {
                        let qrow = &qt.row(i)[cols.clone()];
                        let prow = p.row_mut(qi);
                        for (kj, &j) in valid.iter().enumerate() {
                            prow[kj] = scale * dot(qrow, &kt.row(j)[cols.clone()]);
                        }
                        softmax_in_place(prow);
                        let orow = &mut out.row_mut(i)[cols.clone()];
                        for (kj, &j) in valid.iter().enumerate() {
                            let w = p.get(qi, kj);
                            for (o, &vv) in orow.iter_mut().zip(&vt.row(j)[cols.clone()]) {
                                *o += w * vv;
                            }
                        }
                    }
                }
                probs.push(p);
            }
            keys.push(valid);
        }
        let cache = AttentionCache {
            heads,
            segments,
            keys,
            probs,
        };
        Ok(self.push(out, Op::Attention(q, k, v, Box::new(cache)), &[q, k, v]))
    }

    /// Column-wise maximum over each row range; empty ranges give zeros.
    pub fn segment_max(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let x = self.value(a);
        check_ranges(segments, x.rows())?;
        let mut out = Tensor::zeros(segments.len(), x.cols());
        let mut arg = vec![usize::MAX; segments.len() * x.cols()];
        for (s, range) in segments.iter().enumerate() {
            for c in 0..x.cols() {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for r in range.clone() {
                    if x.get(r, c) > best.0 {
                        best = (x.get(r, c), r);
                    }
                }
                if best.1 != usize::MAX {
                    out.set(s, c, best.0);
                    arg[s * x.cols() + c] = best.1;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax(a, arg), &[a]))
    }

    /// Column-wise mean over each row range; empty ranges give zeros.
    pub fn segment_mean(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let x = self.value(a);
        check_ranges(segments, x.rows())?;
        let mut out = Tensor::zeros(segments.len(), x.cols());
        for (s, range) in segments.iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            let inv = 1.0 / range.len() as f64;
            for r in range.clone() {
                for (o, &v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, segments.to_vec()), &[a]))
    }

    /// Lowers a convolution input to patches so that a convolution becomes a
    /// matrix product with a `(kernel * kernel * channels) x out_channels`
    /// weight. Patch columns are ordered (ky, kx, channel).
    pub fn im2col(&mut self, a: Var, g: ConvGeometry) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != (g.batch * g.height * g.width, g.channels) || g.stride == 0 {
            return Err(Error::shape("im2col", x.shape(), (g.batch * g.height * g.width, g.channels)));
        }
        if g.height + 2 * g.pad < g.kernel || g.width + 2 * g.pad < g.kernel {
            return Err(Error::Invalid("kernel larger than padded input".into()));
        }
        let rows = g.batch * g.out_height() * g.out_width();
        let cols = g.kernel * g.kernel * g.channels;
        let mut out = Tensor::zeros(rows, cols);
        for o in 0..rows {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(o, ky, kx) {
                        let off = (ky * g.kernel + kx) * g.channels;
                        out.row_mut(o)[off..off + g.channels].copy_from_slice(x.row(src));
                    }
                }
            }
        }
        Ok(self.push(out, Op::Im2Col(a, g), &[a]))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        if let Op::Attention(q, k, v, cache) = &node.op {
            self.attention_backward(*q, *k, *v, cache, g, grads);
            return;
        }
        let y = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| {
                let (r, c) = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            });
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| gemm(g, false, bv, true, s, 1.0));
                acc(*b, &|s| gemm(av, true, g, false, s, 1.0));
            }
            Op::Transpose(a) => acc(*a, &|s| s.add_assign(&g.transpose())),
            Op::Add(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| axpy(s, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| zip3(s, g, bv, |gi, bi| gi * bi));
                acc(*b, &|s| zip3(s, g, av, |gi, ai| gi * ai));
            }
            Op::AddRow(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| {
                    for r in 0..g.rows() {
                        for (o, &v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Affine(a, alpha) => acc(*a, &|s| axpy(s, *alpha, g)),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &|s| zip3(s, g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(*a, &|s| zip3(s, g, y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::SoftmaxRows(a) => acc(*a, &|s| {
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, &yi), &gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yi * (gi - inner);
                    }
                }
            }),
            Op::LogSumExpRows(a, exclude) => {
                let x = self.value(*a);
                acc(*a, &|s| {
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            let k = r * x.cols() + c;
                            if exclude.as_ref().is_none_or(|m| !m[k]) {
                                s.data_mut()[k] += g.get(r, 0) * (x.get(r, c) - y.get(r, 0)).exp();
                            }
                        }
                    }
                });
            }
            Op::Pick(a, coords) => acc(*a, &|s| {
                for (k, &(r, c)) in coords.iter().enumerate() {
                    let cols = s.cols();
                    s.data_mut()[r * cols + c] += g.get(k, 0);
                }
            }),
            Op::Sum(a) => acc(*a, &|s| s.data_mut().iter_mut().for_each(|o| *o += g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &|s| s.data_mut().iter_mut().for_each(|o| *o += g.item() / n));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|s| {
                        for r in 0..g.rows() {
                            for (o, &v) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &|s| {
                        for (o, &v) in s.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::SliceCols(a, start) => acc(*a, &|s| {
                for r in 0..g.rows() {
                    for (o, &v) in s.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }),
            Op::GatherRows(a, idx) => acc(*a, &|s| {
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (d, &v) in s.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                }
            }),
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                acc(*a, &|s| {
                    for r in 0..x.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(r), g.row(r));
                        if n <= NORM_FLOOR {
                            for (o, &gi) in s.row_mut(r).iter_mut().zip(gr) {
                                *o += gi / NORM_FLOOR;
                            }
                            continue;
                        }
                        let inner = dot(yr, gr);
                        for ((o, &yi), &gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (gi - yi * inner) / n;
                        }
                    }
                });
            }
            Op::StandardizeCols(a, eps) => {
                let x = self.value(*a);
                acc(*a, &|s| {
                    let n = x.rows() as f64;
                    for c in 0..x.cols() {
                        let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
                        let sigma = ((0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n).sqrt();
                        let sd = sigma + eps;
                        let gmean = (0..x.rows()).map(|r| g.get(r, c)).sum::<f64>() / n;
                        let gx: f64 = (0..x.rows()).map(|r| g.get(r, c) * (x.get(r, c) - mean)).sum();
                        let coupling = if sigma > 0.0 { gx / (n * sigma * sd * sd) } else { 0.0 };
                        for r in 0..x.rows() {
                            let xc = x.get(r, c) - mean;
                            let cols = s.cols();
                            s.data_mut()[r * cols + c] += (g.get(r, c) - gmean) / sd - xc * coupling;
                        }
                    }
                });
            }
            Op::Attention(..) => unreachable!("handled above"),
            Op::SegmentMax(a, arg) => acc(*a, &|s| {
                let cols = g.cols();
                for (k, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        s.data_mut()[r * cols + k % cols] += g.data()[k];
                    }
                }
            }),
            Op::SegmentMean(a, segments) => acc(*a, &|s| {
                for (si, range) in segments.iter().enumerate() {
                    let inv = 1.0 / range.len().max(1) as f64;
                    for r in range.clone() {
                        for (o, &v) in s.row_mut(r).iter_mut().zip(g.row(si)) {
                            *o += v * inv;
                        }
                    }
                }
            }),
            Op::Im2Col(a, geom) => acc(*a, &|s| {
                let c = geom.channels;
                for o in 0..g.rows() {
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            if let Some(src) = geom.source(o, ky, kx) {
                                let off = (ky * geom.kernel + kx) * c;
                                for (d, &v) in s.row_mut(src).iter_mut().zip(&g.row(o)[off..off + c]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }),
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cache: &AttentionCache,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        let dh = d / cache.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qt.rows(), d);
        let mut dk = Tensor::zeros(kt.rows(), d);
        let mut dv = Tensor::zeros(vt.rows(), d);
        for (si, s) in cache.segments.iter().enumerate() {
            let valid = &cache.keys[si];
            if valid.is_empty() {
                continue;
            }
            for h in 0..cache.heads {
                let p = &cache.probs[si * cache.heads + h];
                let cols = h * dh..(h + 1) * dh;
                for (qi, i) in s.query.clone().enumerate() {
                    let grow = &g.row(i)[cols.clone()];
                    // dP_ij = dO_i . V_j, then the softmax Jacobian
                    let dp: Vec<f64> = valid.iter().map(|&j| dot(grow, &vt.row(j)[cols.clone()])).collect();
                    let prow = p.row(qi);
                    let inner = dot(prow, &dp);
                    for (kj, &j) in valid.iter().enumerate() {
                        let w = prow[kj];
                        let ds = w * (dp[kj] - inner) * scale;
                        let dvrow = &mut dv.row_mut(j)[cols.clone()];
                        for (o, &gg) in dvrow.iter_mut().zip(grow) {
                            *o += w * gg;
                        }
                        if ds != 0.0 {
                            for c in cols.clone() {
                                dq.data_mut()[i * d + c] += ds * kt.get(j, c);
                                dk.data_mut()[j * d + c] += ds * qt.get(i, c);
                            }
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        }
    }
}

/// Gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// One entry per parameter of `set`, `None` where no gradient reached it.
    pub fn for_set(&self, set: &ParameterSet) -> Vec<Option<Tensor>> {
        let mut out = vec![None; set.len()];
        for &(id, v) in &self.params {
            if id.set() == set.set_id() {
                out[id.index()] = self.wrt(v).cloned();
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn axpy(s: &mut Tensor, alpha: f64, g: &Tensor) {
    for (o, &v) in s.data_mut().iter_mut().zip(g.data()) {
        *o += alpha * v;
    }
}

fn zip3(s: &mut Tensor, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((o, &gi), &xi) in s.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o += f(gi, xi);
    }
}

fn check_ranges(segments: &[Range<usize>], rows: usize) -> Result<()> {
    match segments.iter().find(|r| r.end > rows || r.start > r.end) {
        Some(r) => Err(Error::Invalid(format!("row range {r:?} of {rows} rows"))),
        None => Ok(()),
    }
}
