//! Sublevel-set persistent homology of a grayscale image on the cubical
//! complex whose vertices are pixels (V-construction).
//!
//! Edges join 4-neighbours and carry the max of their endpoints; unit squares
//! carry the max of their four corners. The fast path computes H0 with
//! union-find over vertices in increasing order, and H1 by running
//! union-find on the dual graph (squares plus one outer vertex, adjacent
//! through primal edges) in decreasing order: by persistence duality the
//! pairs (edge, square) of the primal filtration are exactly the merge events
//! of that dual graph. [`compute_pd_oracle`] reduces the full boundary matrix
//! and serves as the reference.

use crate::diagram::{PersistenceDiagram, PersistencePair};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::roi::{apply_mask, RoiMask};

/// Side limit for the boundary-matrix reference.
pub const ORACLE_MAX_SIDE: usize = 32;

struct DisjointSet {
    parent: Vec<usize>,
    /// Filtration rank of the oldest cell in each root's component.
    oldest: Vec<usize>,
}

impl DisjointSet {
    fn new(oldest: Vec<usize>) -> Self {
        Self {
            parent: (0..oldest.len()).collect(),
            oldest,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }
}

fn sort_ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    if descending {
        order.reverse();
    }
    order
}

/// H0 and H1 persistence of the sublevel filtration of `img`.
///
/// `dim0` holds the finite pairs plus one essential pair `(min, 1.0)`; pairs
/// with zero persistence are dropped (the essential pair is always kept).
pub fn compute_pd(img: &GrayImage) -> PersistenceDiagram {
    let (h, w) = img.dims();
    let f = img.data();
    PersistenceDiagram {
        dim0: h0_pairs(f, h, w),
        dim1: h1_pairs(f, h, w),
        ..Default::default()
    }
}

fn h0_pairs(f: &[f64], h: usize, w: usize) -> Vec<PersistencePair> {
    let order = sort_ranks(f, false);
    let mut rank = vec![0; f.len()];
    for (i, &v) in order.iter().enumerate() {
        rank[v] = i;
    }
    let mut ds = DisjointSet::new(rank.clone());
    let mut pairs = Vec::new();
    for &v in &order {
        let (r, c) = (v / w, v % w);
        let neighbours = [
            (r > 0).then(|| v - w),
            (r + 1 < h).then(|| v + w),
            (c > 0).then(|| v - 1),
            (c + 1 < w).then(|| v + 1),
        ];
        for u in neighbours.into_iter().flatten() {
            if rank[u] > rank[v] {
                continue; // not yet in the filtration
            }
            let (a, b) = (ds.find(u), ds.find(v));
            if a == b {
                continue;
            }
            // elder rule: the component born later dies
            let (young, old) = if ds.oldest[a] > ds.oldest[b] { (a, b) } else { (b, a) };
            let birth = f[order[ds.oldest[young]]];
            if birth < f[v] {
                pairs.push(PersistencePair::new(birth, f[v]));
            }
            ds.parent[young] = old;
        }
    }
    pairs.push(PersistencePair::essential(f[order[0]]));
    pairs
}

fn h1_pairs(f: &[f64], h: usize, w: usize) -> Vec<PersistencePair> {
    let (sh, sw) = (h - 1, w - 1);
    let n_sq = sh * sw;
    let square_value: Vec<f64> = (0..n_sq)
        .map(|s| {
            let (r, c) = (s / sw, s % sw);
            f[r * w + c]
                .max(f[r * w + c + 1])
                .max(f[(r + 1) * w + c])
                .max(f[(r + 1) * w + c + 1])
        })
        .collect();
    let sq_order = sort_ranks(&square_value, false);
    let outer = n_sq;
    let mut oldest = vec![0; n_sq + 1];
    for (i, &s) in sq_order.iter().enumerate() {
        oldest[s] = i;
    }
    // the outer vertex is the last cell of the primal filtration, hence the
    // oldest of the reversed one
    oldest[outer] = usize::MAX;
    let mut ds = DisjointSet::new(oldest);

    // primal edges with their two cofacial squares (or the outer vertex)
    let mut edge_value = Vec::with_capacity(h * sw + sh * w);
    let mut cofaces = Vec::with_capacity(edge_value.capacity());
    for r in 0..h {
        for c in 0..sw {
            edge_value.push(f[r * w + c].max(f[r * w + c + 1]));
            let above = if r > 0 { (r - 1) * sw + c } else { outer };
            let below = if r < sh { r * sw + c } else { outer };
            cofaces.push((above, below));
        }
    }
    for r in 0..sh {
        for c in 0..w {
            edge_value.push(f[r * w + c].max(f[(r + 1) * w + c]));
            let left = if c > 0 { r * sw + c - 1 } else { outer };
            let right = if c < sw { r * sw + c } else { outer };
            cofaces.push((left, right));
        }
    }

    let mut pairs = Vec::new();
    for e in sort_ranks(&edge_value, true) {
        let (a, b) = (ds.find(cofaces[e].0), ds.find(cofaces[e].1));
        if a == b {
            continue;
        }
        // in reverse order the component whose oldest square has the lower
        // primal rank appeared later and dies at this edge
        let (young, old) = if ds.oldest[a] < ds.oldest[b] { (a, b) } else { (b, a) };
        let death = square_value[sq_order[ds.oldest[young]]];
        if edge_value[e] < death {
            pairs.push(PersistencePair::new(edge_value[e], death));
        }
        ds.parent[young] = old;
    }
    pairs
}

/// Reference persistence via Z/2 boundary-matrix reduction over every cell
/// of the cubical complex. Cells are ordered by `(value, dimension, row,
/// column)`; cost is cubic, so images are limited to 32x32.
pub fn compute_pd_oracle(img: &GrayImage) -> Result<PersistenceDiagram> {
    let (h, w) = img.dims();
    if h > ORACLE_MAX_SIDE || w > ORACLE_MAX_SIDE {
        return Err(Error::TooLargeForOracle {
            height: h,
            width: w,
            limit: ORACLE_MAX_SIDE,
        });
    }
    let f = img.data();
    // doubled coordinates: (2i, 2j) vertex, one odd coordinate edge, both odd square
    let (gh, gw) = (2 * h - 1, 2 * w - 1);
    let n = gh * gw;
    let dim_of = |id: usize| (id / gw) % 2 + (id % gw) % 2;
    let value_of = |id: usize| {
        let (r, c) = (id / gw, id % gw);
        let rows = if r % 2 == 0 { r / 2..=r / 2 } else { r / 2..=r / 2 + 1 };
        let mut v = f64::NEG_INFINITY;
        for i in rows {
            let cols = if c % 2 == 0 { c / 2..=c / 2 } else { c / 2..=c / 2 + 1 };
            for j in cols {
                v = v.max(f[i * w + j]);
            }
        }
        v
    };
    let values: Vec<f64> = (0..n).map(value_of).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(dim_of(a).cmp(&dim_of(b)))
            .then(a.cmp(&b))
    });
    let mut pos = vec![0; n];
    for (i, &id) in order.iter().enumerate() {
        pos[id] = i;
    }

    let boundary = |id: usize| -> Vec<usize> {
        let (r, c) = (id / gw, id % gw);
        let mut out = Vec::with_capacity(4);
        if r % 2 == 1 {
            out.push(pos[(r - 1) * gw + c]);
            out.push(pos[(r + 1) * gw + c]);
        }
        if c % 2 == 1 {
            out.push(pos[r * gw + c - 1]);
            out.push(pos[r * gw + c + 1]);
        }
        out.sort_unstable();
        out
    };

    let mut columns: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut pivot_owner: Vec<Option<usize>> = vec![None; n];
    let mut paired = vec![false; n];
    let mut pd = PersistenceDiagram::default();
    for (j, &id) in order.iter().enumerate() {
        let mut col = boundary(id);
        while let Some(&low) = col.last() {
            match pivot_owner[low] {
                Some(k) => col = symmetric_difference(&col, &columns[k]),
                None => break,
            }
        }
        if let Some(&low) = col.last() {
            pivot_owner[low] = Some(j);
            paired[low] = true;
            paired[j] = true;
            let (birth, death) = (values[order[low]], values[id]);
            if birth < death {
                let pair = PersistencePair::new(birth, death);
                match dim_of(order[low]) {
                    0 => pd.dim0.push(pair),
                    _ => pd.dim1.push(pair),
                }
            }
        }
        columns.push(col);
    }
    for (j, &id) in order.iter().enumerate() {
        if paired[j] || !columns[j].is_empty() {
            continue;
        }
        match dim_of(id) {
            0 => pd.dim0.push(PersistencePair::essential(values[id])),
            1 => pd.dim1.push(PersistencePair::essential(values[id])),
            _ => {}
        }
    }
    Ok(pd)
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Persistence of the image restricted to a region of interest: pixels
/// outside the ROI are raised to 1.0 before filtering.
pub fn restrict_and_compute(img: &GrayImage, roi: &RoiMask) -> Result<PersistenceDiagram> {
    Ok(compute_pd(&apply_mask(img, roi)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: &[f64]) -> GrayImage {
        GrayImage::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn ring_with_bright_center() {
        let ring = img(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        for pd in [compute_pd(&ring), compute_pd_oracle(&ring).unwrap()] {
            assert_eq!(pd.coords(0), vec![(0.0, 1.0)]);
            assert_eq!(pd.coords(1), vec![(0.0, 1.0)]);
        }
    }

    #[test]
    fn constant_image_has_one_component() {
        for c in [0.0, 0.25, 0.7, 1.0] {
            let pd = compute_pd(&GrayImage::constant(4, 6, c));
            assert_eq!(pd.coords(0), vec![(c, 1.0)]);
            assert!(pd.dim1.is_empty());
            assert!(pd.dim0[0].essential);
        }
        let pd = compute_pd_oracle(&GrayImage::constant(2, 2, 0.0)).unwrap();
        assert_eq!(pd.coords(0), vec![(0.0, 1.0)]);
        assert!(pd.dim1.is_empty());
    }

    #[test]
    fn two_dark_pixels_merge_at_background() {
        let mut v = vec![0.5; 25];
        v[6] = 0.0;
        v[18] = 0.0;
        let two = img(5, 5, &v);
        for pd in [compute_pd(&two), compute_pd_oracle(&two).unwrap()] {
            assert_eq!(pd.coords(0), vec![(0.0, 0.5), (0.0, 1.0)]);
            assert!(pd.dim1.is_empty());
        }
    }

    #[test]
    fn oracle_rejects_large_images() {
        let big = GrayImage::constant(33, 4, 0.0);
        assert!(matches!(
            compute_pd_oracle(&big),
            Err(Error::TooLargeForOracle { .. })
        ));
    }

    #[test]
    fn full_mask_restriction_is_identity() {
        let v: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let image = img(5, 6, &v);
        let restricted = restrict_and_compute(&image, &RoiMask::full(5, 6)).unwrap();
        assert_eq!(restricted, compute_pd(&image));
    }

    #[test]
    fn border_loop_dies_at_interior_square() {
        // a loop whose filling squares are not all interior: 4x4 with a 2x2 hole
        let mut v = vec![0.1; 16];
        for i in [5, 6, 9, 10] {
            v[i] = 0.8;
        }
        let image = img(4, 4, &v);
        assert_eq!(compute_pd(&image).coords(1), vec![(0.1, 0.8)]);
        assert!(compute_pd(&image).same_points(&compute_pd_oracle(&image).unwrap()));
    }
}
