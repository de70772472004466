//! Hierarchical encoder of persistence diagrams.
//!
//! Diagram points become tokens `(birth, death, onehot0, onehot1)`. A shared
//! point MLP lifts them to `width`, each homology dimension attends to
//! itself with a weighted residual, the two dimensions attend to each other,
//! and max/mean pooling over the three token sets feeds a projection MLP.
//!
//! Batches are computed on valid tokens only: the tokens of all diagrams are
//! stacked and attention/pooling run per diagram through row segments, so
//! padding never enters the arithmetic. [`TopoEncoder::trace`] rebuilds the
//! padded per-block intermediates for inspection.

use std::ops::Range;

use rand::Rng;
use topocl_core::{PersistenceDiagram, PersistencePair};
use topocl_nn::{Graph, Mlp, MultiHeadAttention, ParameterSet, Segment, Tensor, Var};

use crate::config::TopoConfig;
use crate::error::{Error, Result};

/// Fixed-size token table: rows `0..k0` hold H0 points, rows `k0..k0 + k1`
/// hold H1 points. Rows with `valid == false` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPoints {
    pub k0: usize,
    pub k1: usize,
    pub rows: Vec<[f64; 4]>,
    pub valid: Vec<bool>,
}

impl SelectedPoints {
    /// Places the given points in order, truncating each block to its size.
    pub fn from_blocks(k0: usize, k1: usize, h0: &[(f64, f64)], h1: &[(f64, f64)]) -> Self {
        let mut rows = Vec::with_capacity(k0 + k1);
        let mut valid = Vec::with_capacity(k0 + k1);
        for (k, pts, tag) in [(k0, h0, [1.0, 0.0]), (k1, h1, [0.0, 1.0])] {
            for i in 0..k {
                match pts.get(i) {
                    Some(&(b, d)) => {
                        rows.push([b, d, tag[0], tag[1]]);
                        valid.push(true);
                    }
                    None => {
                        rows.push([0.0, 0.0, tag[0], tag[1]]);
                        valid.push(false);
                    }
                }
            }
        }
        Self { k0, k1, rows, valid }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn block(&self, q: usize) -> Range<usize> {
        if q == 0 {
            0..self.k0
        } else {
            self.k0..self.k0 + self.k1
        }
    }

    /// Indices of the valid rows of block `q`.
    pub fn valid_rows(&self, q: usize) -> Vec<usize> {
        self.block(q).filter(|&i| self.valid[i]).collect()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_all_padding(&self) -> bool {
        self.num_valid() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.len(), 4, |r, c| self.rows[r][c])
    }
}

/// Top-`k` points of one dimension by persistence, ties broken by smaller
/// birth and then by position in the diagram.
fn top_k(pairs: &[PersistencePair], k: usize) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&pairs[a], &pairs[b]);
        q.persistence()
            .total_cmp(&p.persistence())
            .then(p.birth.total_cmp(&q.birth))
            .then(a.cmp(&b))
    });
    idx.into_iter()
        .take(k)
        .map(|i| (pairs[i].birth, pairs[i].death))
        .collect()
}

pub fn select_points(pd: &PersistenceDiagram, k0: usize, k1: usize) -> SelectedPoints {
    SelectedPoints::from_blocks(k0, k1, &top_k(&pd.dim0, k0), &top_k(&pd.dim1, k1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoEncoder {
    pub config: TopoConfig,
    pub ph: Mlp,
    pub self0: Option<MultiHeadAttention>,
    pub self1: Option<MultiHeadAttention>,
    /// H0 tokens querying H1 tokens, and the reverse.
    pub cross01: Option<MultiHeadAttention>,
    pub cross10: Option<MultiHeadAttention>,
    pub proj: Mlp,
}

/// Graph handles of one batched forward pass. Token matrices stack the
/// valid rows of every diagram; `ranges0[i]` / `ranges1[i]` locate diagram
/// `i` inside them and `ranges_cross[i]` inside `h_cross`.
#[derive(Debug, Clone)]
pub struct TopoVars {
    pub h0: Var,
    pub h1: Var,
    pub h0_self: Var,
    pub h1_self: Var,
    pub h0_cross: Var,
    pub h1_cross: Var,
    pub h_cross: Var,
    pub pooled: Var,
    pub t: Var,
    pub ranges0: Vec<Range<usize>>,
    pub ranges1: Vec<Range<usize>>,
    pub ranges_cross: Vec<Range<usize>>,
}

/// Padded intermediates of a single diagram, laid out as fixed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoTrace {
    pub h0: Tensor,
    pub h1: Tensor,
    pub h0_self: Tensor,
    pub h1_self: Tensor,
    pub h0_cross: Tensor,
    pub h1_cross: Tensor,
    pub h_cross: Tensor,
    pub pooled: Tensor,
    pub flat: Tensor,
    pub t: Tensor,
}

fn ranges_from_counts(counts: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    counts
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

fn stack_tokens(batch: &[SelectedPoints], q: usize) -> (Tensor, Vec<Range<usize>>) {
    let mut data = Vec::new();
    let mut counts = Vec::with_capacity(batch.len());
    for p in batch {
        let rows = p.valid_rows(q);
        counts.push(rows.len());
        for r in rows {
            data.extend_from_slice(&p.rows[r]);
        }
    }
    let n = data.len() / 4;
    let t = Tensor::new(n, 4, data).expect("four values per token");
    (t, ranges_from_counts(counts.into_iter()))
}

impl TopoEncoder {
    pub fn new<R: Rng + ?Sized>(set: &mut ParameterSet, name: &str, config: &TopoConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ph = Mlp::new(set, &format!("{name}.ph"), &config.ph_dims(), rng)?;
        let mut attn = |enabled: bool, part: &str| -> Result<Option<MultiHeadAttention>> {
            if !enabled {
                return Ok(None);
            }
            Ok(Some(MultiHeadAttention::new(
                set,
                &format!("{name}.{part}"),
                config.width,
                config.heads,
                rng,
            )?))
        };
        let self0 = attn(config.self_attention, "self0")?;
        let self1 = attn(config.self_attention, "self1")?;
        let cross01 = attn(config.cross_attention, "cross01")?;
        let cross10 = attn(config.cross_attention, "cross10")?;
        let proj = Mlp::new(set, &format!("{name}.proj"), &config.proj_dims(), rng)?;
        Ok(Self {
            config: config.clone(),
            ph,
            self0,
            self1,
            cross01,
            cross10,
            proj,
        })
    }

    pub fn select(&self, pd: &PersistenceDiagram) -> SelectedPoints {
        select_points(pd, self.config.k0, self.config.k1)
    }

    fn check_batch(&self, batch: &[SelectedPoints]) -> Result<()> {
        for p in batch {
            if p.k0 != self.config.k0 || p.k1 != self.config.k1 || p.rows.len() != p.k0 + p.k1 || p.valid.len() != p.rows.len() {
                return Err(Error::ShapeContract(format!(
                    "token table {}+{} rows for an encoder of {}+{}",
                    p.k0, p.k1, self.config.k0, self.config.k1
                )));
            }
        }
        Ok(())
    }

    fn self_block(
        &self,
        g: &mut Graph,
        set: &ParameterSet,
        attn: Option<&MultiHeadAttention>,
        lambda: f64,
        h: Var,
        ranges: &[Range<usize>],
    ) -> Result<Var> {
        let Some(attn) = attn else { return Ok(h) };
        let segments = ranges
            .iter()
            .map(|r| Segment {
                query: r.clone(),
                key: r.clone(),
            })
            .collect();
        let a = attn.forward_segments(g, set, h, h, segments, None)?;
        let a = g.scale(a, lambda);
        Ok(g.add(h, a)?)
    }

    /// Queries of one block attend to the keys of the other block of the same
    /// diagram. Diagrams whose key block is empty pass their queries through.
    fn cross_block(
        &self,
        g: &mut Graph,
        set: &ParameterSet,
        attn: &MultiHeadAttention,
        queries: Var,
        keys: Var,
        q_ranges: &[Range<usize>],
        k_ranges: &[Range<usize>],
    ) -> Result<Var> {
        let segments = q_ranges
            .iter()
            .zip(k_ranges)
            .map(|(q, k)| Segment {
                query: q.clone(),
                key: k.clone(),
            })
            .collect();
        let out = attn.forward_segments(g, set, queries, keys, segments, None)?;
        let mut pass = vec![None; g.shape(queries).0];
        let mut any = false;
        for (q, k) in q_ranges.iter().zip(k_ranges) {
            if k.is_empty() {
                for i in q.clone() {
                    pass[i] = Some(i);
                    any = true;
                }
            }
        }
        if !any {
            return Ok(out);
        }
        // output rows without keys are exactly zero, so adding is a copy
        let through = g.gather_rows(queries, pass)?;
        Ok(g.add(out, through)?)
    }

    /// Batched forward pass. Output `t` is `batch.len() x out`.
    pub fn forward(&self, g: &mut Graph, set: &ParameterSet, batch: &[SelectedPoints]) -> Result<TopoVars> {
        self.check_batch(batch)?;
        let (x0, ranges0) = stack_tokens(batch, 0);
        let (x1, ranges1) = stack_tokens(batch, 1);
        let n0 = x0.rows();
        let x0 = g.constant(x0);
        let x1 = g.constant(x1);
        let h0 = self.ph.forward(g, set, x0)?;
        let h1 = self.ph.forward(g, set, x1)?;

        let [l0, l1] = self.config.lambda;
        let h0_self = self.self_block(g, set, self.self0.as_ref(), l0, h0, &ranges0)?;
        let h1_self = self.self_block(g, set, self.self1.as_ref(), l1, h1, &ranges1)?;

        let (h0_cross, h1_cross) = match (&self.cross01, &self.cross10) {
            (Some(a01), Some(a10)) => (
                self.cross_block(g, set, a01, h0_self, h1_self, &ranges0, &ranges1)?,
                self.cross_block(g, set, a10, h1_self, h0_self, &ranges1, &ranges0)?,
            ),
            _ => (h0_self, h1_self),
        };

        // regroup [H0 rows; H1 rows] per diagram so pooling sees one range
        let stacked = g.concat_rows(&[h0_cross, h1_cross])?;
        let mut order = Vec::with_capacity(g.shape(stacked).0);
        for (r0, r1) in ranges0.iter().zip(&ranges1) {
            order.extend(r0.clone().map(Some));
            order.extend(r1.clone().map(|i| Some(n0 + i)));
        }
        let h_cross = g.gather_rows(stacked, order)?;
        let ranges_cross = ranges_from_counts(ranges0.iter().zip(&ranges1).map(|(a, b)| a.len() + b.len()));

        let mut parts = Vec::with_capacity(6);
        for (h, ranges) in [(h0_self, &ranges0), (h1_self, &ranges1), (h_cross, &ranges_cross)] {
            parts.push(g.segment_max(h, ranges)?);
            parts.push(g.segment_mean(h, ranges)?);
        }
        let pooled = g.concat_cols(&parts)?;
        let t = self.proj.forward(g, set, pooled)?;
        Ok(TopoVars {
            h0,
            h1,
            h0_self,
            h1_self,
            h0_cross,
            h1_cross,
            h_cross,
            pooled,
            t,
            ranges0,
            ranges1,
            ranges_cross,
        })
    }

    /// Encodes one token table to a `1 x out` tensor.
    pub fn encode(&self, set: &ParameterSet, points: &SelectedPoints) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, set, std::slice::from_ref(points))?;
        Ok(g.value(vars.t).clone())
    }

    /// Encodes a diagram to a `1 x out` tensor.
    pub fn encode_diagram(&self, set: &ParameterSet, pd: &PersistenceDiagram) -> Result<Tensor> {
        self.encode(set, &self.select(pd))
    }

    /// Single-diagram forward pass with every intermediate scattered back to
    /// its padded block position (padding rows are zero). Shapes are checked
    /// against the configured contract.
    pub fn trace(&self, set: &ParameterSet, points: &SelectedPoints) -> Result<TopoTrace> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, set, std::slice::from_ref(points))?;
        let (k0, k1, w) = (self.config.k0, self.config.k1, self.config.width);
        let rows0 = points.valid_rows(0);
        let rows1: Vec<usize> = points.valid_rows(1).into_iter().map(|r| r - k0).collect();
        let scatter = |v: Var, rows: &[usize], k: usize| -> Tensor {
            let src = g.value(v);
            let mut out = Tensor::zeros(k, src.cols());
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(src.row(i));
            }
            out
        };
        let h0_cross = scatter(vars.h0_cross, &rows0, k0);
        let h1_cross = scatter(vars.h1_cross, &rows1, k1);
        let mut hc = h0_cross.clone().into_data();
        hc.extend_from_slice(h1_cross.data());
        let pooled_row = g.value(vars.pooled);
        let trace = TopoTrace {
            h0: scatter(vars.h0, &rows0, k0),
            h1: scatter(vars.h1, &rows1, k1),
            h0_self: scatter(vars.h0_self, &rows0, k0),
            h1_self: scatter(vars.h1_self, &rows1, k1),
            h0_cross,
            h1_cross,
            h_cross: Tensor::new(k0 + k1, w, hc)?,
            pooled: Tensor::new(6, w, pooled_row.data().to_vec())?,
            flat: pooled_row.clone(),
            t: g.value(vars.t).clone(),
        };
        let expect = [
            ("h0", trace.h0.shape(), (k0, w)),
            ("h1", trace.h1.shape(), (k1, w)),
            ("h0'", trace.h0_self.shape(), (k0, w)),
            ("h1'", trace.h1_self.shape(), (k1, w)),
            ("h_cross", trace.h_cross.shape(), (k0 + k1, w)),
            ("h_pool", trace.pooled.shape(), (6, w)),
            ("flat", trace.flat.shape(), (1, 6 * w)),
            ("t", trace.t.shape(), (1, self.config.out)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::ShapeContract(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(trace)
    }
}
