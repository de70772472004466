//! Bottleneck distance between persistence diagrams, diagram span, and the
//! relative bottleneck distance used to grade augmentations.
//!
//! The bottleneck distance is computed exactly: the optimum is always one of
//! the pairwise L∞ distances or half-persistences, so we binary-search the
//! sorted candidate set with a perfect-matching feasibility test
//! (Hopcroft–Karp) on the usual diagonal-augmented bipartite graph.

use std::collections::VecDeque;

use serde::Serialize;

use crate::cubical::restrict_and_compute;
use crate::diagram::{PersistenceDiagram, PersistencePair};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::roi::RoiMask;

/// Spans at or below this are treated as empty when normalizing.
pub const SPAN_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pairing {
    /// `a[i]` matched with `b[j]`.
    Points(usize, usize),
    /// `a[i]` matched with its diagonal projection.
    FromDiagonalA(usize),
    /// `b[j]` matched with its diagonal projection.
    FromDiagonalB(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedDistance {
    pub value: f64,
    pub matching: Vec<Pairing>,
}

#[inline]
pub fn linf(p: &PersistencePair, q: &PersistencePair) -> f64 {
    (p.birth - q.birth).abs().max((p.death - q.death).abs())
}

/// L∞ distance from a point to the diagonal.
#[inline]
pub fn diagonal_cost(p: &PersistencePair) -> f64 {
    (p.death - p.birth) / 2.0
}

pub fn bottleneck(a: &[PersistencePair], b: &[PersistencePair]) -> MatchedDistance {
    let (n, m) = (a.len(), b.len());
    if n == 0 && m == 0 {
        return MatchedDistance {
            value: 0.0,
            matching: Vec::new(),
        };
    }
    let mut candidates = Vec::with_capacity(n * m + n + m + 1);
    candidates.push(0.0);
    candidates.extend(a.iter().map(diagonal_cost));
    candidates.extend(b.iter().map(diagonal_cost));
    for p in a {
        for q in b {
            candidates.push(linf(p, q));
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // the largest candidate is always feasible (everything to the diagonal)
    let (mut lo, mut hi) = (0, candidates.len() - 1);
    let mut best = perfect_matching(a, b, candidates[hi]).expect("max candidate is feasible");
    while lo < hi {
        let mid = (lo + hi) / 2;
        match perfect_matching(a, b, candidates[mid]) {
            Some(matching) => {
                hi = mid;
                best = matching;
            }
            None => lo = mid + 1,
        }
    }
    let value = candidates[hi];
    let matching = decode_matching(&best, n, m);
    debug_assert!(matching
        .iter()
        .map(|p| pairing_cost(a, b, p))
        .all(|c| c <= value));
    MatchedDistance { value, matching }
}

pub fn pairing_cost(a: &[PersistencePair], b: &[PersistencePair], p: &Pairing) -> f64 {
    match *p {
        Pairing::Points(i, j) => linf(&a[i], &b[j]),
        Pairing::FromDiagonalA(i) => diagonal_cost(&a[i]),
        Pairing::FromDiagonalB(j) => diagonal_cost(&b[j]),
    }
}

/// Left vertices: `a[0..n]`, then diagonal copies of `b`. Right vertices:
/// `b[0..m]`, then diagonal copies of `a`. Returns the right partner of each
/// left vertex when a perfect matching with all costs `<= delta` exists.
fn perfect_matching(a: &[PersistencePair], b: &[PersistencePair], delta: f64) -> Option<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let size = n + m;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); size];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            if linf(p, q) <= delta {
                adj[i].push(j);
            }
        }
        if diagonal_cost(p) <= delta {
            adj[i].push(m + i);
        }
    }
    for (j, q) in b.iter().enumerate() {
        let left = n + j;
        if diagonal_cost(q) <= delta {
            adj[left].push(j);
        }
        // diagonal to diagonal is free
        adj[left].extend(m..m + n);
    }
    let matching = hopcroft_karp(&adj, size);
    matching.iter().all(Option::is_some).then(|| {
        matching.into_iter().map(Option::unwrap).collect()
    })
}

fn decode_matching(partner: &[usize], n: usize, m: usize) -> Vec<Pairing> {
    let mut out = Vec::with_capacity(n + m);
    for (left, &right) in partner.iter().enumerate() {
        match (left < n, right < m) {
            (true, true) => out.push(Pairing::Points(left, right)),
            (true, false) => out.push(Pairing::FromDiagonalA(left)),
            (false, true) => out.push(Pairing::FromDiagonalB(right)),
            (false, false) => {}
        }
    }
    out
}

/// Maximum bipartite matching; `adj[u]` lists right neighbours of left `u`.
fn hopcroft_karp(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    const INF: usize = usize::MAX;
    let n_left = adj.len();
    let mut match_left: Vec<Option<usize>> = vec![None; n_left];
    let mut match_right: Vec<Option<usize>> = vec![None; n_right];
    let mut dist = vec![INF; n_left];

    // greedy warm start
    for u in 0..n_left {
        if let Some(&v) = adj[u].iter().find(|&&v| match_right[v].is_none()) {
            match_left[u] = Some(v);
            match_right[v] = Some(u);
        }
    }

    loop {
        let mut queue = VecDeque::new();
        for u in 0..n_left {
            if match_left[u].is_none() {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = INF;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                match match_right[v] {
                    None => found = true,
                    Some(w) if dist[w] == INF => {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                    _ => {}
                }
            }
        }
        if !found {
            break;
        }
        let mut progressed = false;
        for u in 0..n_left {
            if match_left[u].is_none()
                && augment(u, adj, &mut match_left, &mut match_right, &mut dist)
            {
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    match_left
}

fn augment(
    u: usize,
    adj: &[Vec<usize>],
    match_left: &mut [Option<usize>],
    match_right: &mut [Option<usize>],
    dist: &mut [usize],
) -> bool {
    for &v in &adj[u] {
        let ok = match match_right[v] {
            None => true,
            Some(w) => {
                dist[w] == dist[u].wrapping_add(1) && augment(w, adj, match_left, match_right, dist)
            }
        };
        if ok {
            match_left[u] = Some(v);
            match_right[v] = Some(u);
            return true;
        }
    }
    dist[u] = usize::MAX;
    false
}

/// Largest persistence in the diagram slice, 0 when empty.
pub fn span(pairs: &[PersistencePair]) -> f64 {
    pairs
        .iter()
        .map(PersistencePair::persistence)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimensionRatio {
    pub dim: usize,
    pub bottleneck: f64,
    pub span: f64,
    /// `None` when the original span is at or below [`SPAN_EPSILON`].
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeBottleneck {
    pub dims: [DimensionRatio; 2],
    /// Maximum ratio over the dimensions with nonzero span, 0 when none.
    pub max_ratio: f64,
}

impl RelativeBottleneck {
    pub fn value(&self) -> f64 {
        self.max_ratio
    }

    /// CSV with header `dim,d_B,span,ratio,max_ratio`; an excluded dimension
    /// prints an empty ratio field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,d_B,span,ratio,max_ratio\n");
        for d in &self.dims {
            let ratio = d.ratio.map(|r| format!("{r:.9}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9},{:.9},{},{:.9}\n",
                d.dim, d.bottleneck, d.span, ratio, self.max_ratio
            ));
        }
        out
    }
}

/// Relative bottleneck distance between two already-computed diagrams, the
/// first being the reference whose span normalizes each dimension.
pub fn relative_bottleneck_pd(
    original: &PersistenceDiagram,
    augmented: &PersistenceDiagram,
) -> RelativeBottleneck {
    let dims = [0, 1].map(|q| {
        let s = span(original.dim(q));
        let d = bottleneck(original.dim(q), augmented.dim(q)).value;
        DimensionRatio {
            dim: q,
            bottleneck: d,
            span: s,
            ratio: (s > SPAN_EPSILON).then(|| d / s),
        }
    });
    let max_ratio = dims.iter().filter_map(|d| d.ratio).fold(0.0, f64::max);
    RelativeBottleneck { dims, max_ratio }
}

/// Relative bottleneck distance with both images restricted to the same ROI.
pub fn relative_bottleneck(
    original: &GrayImage,
    augmented: &GrayImage,
    roi: &RoiMask,
) -> Result<RelativeBottleneck> {
    relative_bottleneck_with_rois(original, roi, augmented, roi)
}

/// Relative bottleneck distance where the augmented image carries its own
/// ROI (the original ROI moved along with any geometric transform).
pub fn relative_bottleneck_with_rois(
    original: &GrayImage,
    original_roi: &RoiMask,
    augmented: &GrayImage,
    augmented_roi: &RoiMask,
) -> Result<RelativeBottleneck> {
    if original.dims() != augmented.dims() && original.dims() != (augmented.width(), augmented.height()) {
        return Err(Error::DimensionMismatch {
            expected: original.dims(),
            found: augmented.dims(),
        });
    }
    let pd_orig = restrict_and_compute(original, original_roi)?;
    let pd_aug = restrict_and_compute(augmented, augmented_roi)?;
    Ok(relative_bottleneck_pd(&pd_orig, &pd_aug))
}
