#![allow(dead_code)]

use rand::Rng;
use topocl_core::diagram::PersistencePair;
use topocl_core::rng::{stream, StreamRng};
use topocl_core::GrayImage;

pub const DYADIC: f64 = 65536.0;

pub fn rng(tag: u64) -> StreamRng {
    stream(0x7e57, &[tag])
}

/// Random image whose values are multiples of 2^-16, so sums and
/// differences in the tests are exact.
pub fn dyadic_image(rng: &mut StreamRng, h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(h, w, |_, _| rng.random_range(0..=65536u32) as f64 / DYADIC)
}

/// Random image drawn from `levels` distinct values to force ties.
pub fn quantized_image(rng: &mut StreamRng, h: usize, w: usize, levels: u32) -> GrayImage {
    GrayImage::from_fn(h, w, |_, _| {
        rng.random_range(0..levels) as f64 / (levels - 1) as f64
    })
}

/// Dark ring on a bright background.
pub fn annulus(size: usize, r_in: f64, r_out: f64, dark: f64, bright: f64) -> GrayImage {
    let c = (size as f64 - 1.0) / 2.0;
    GrayImage::from_fn(size, size, |r, col| {
        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
        if d >= r_in && d <= r_out {
            dark
        } else {
            bright
        }
    })
}

pub fn pairs(v: &[(f64, f64)]) -> Vec<PersistencePair> {
    v.iter().map(|&(b, d)| PersistencePair::new(b, d)).collect()
}

fn linf(p: &PersistencePair, q: &PersistencePair) -> f64 {
    (p.birth - q.birth).abs().max((p.death - q.death).abs())
}

/// Exhaustive bottleneck: every point of `a` goes to the diagonal or to an
/// unused point of `b`; leftovers of `b` go to the diagonal.
pub fn brute_bottleneck(a: &[PersistencePair], b: &[PersistencePair]) -> f64 {
    fn go(i: usize, a: &[PersistencePair], b: &[PersistencePair], used: &mut Vec<bool>, cur: f64) -> f64 {
        if i == a.len() {
            return b
                .iter()
                .zip(used.iter())
                .filter(|(_, &u)| !u)
                .map(|(q, _)| (q.death - q.birth) / 2.0)
                .fold(cur, f64::max);
        }
        let mut best = go(i + 1, a, b, used, cur.max((a[i].death - a[i].birth) / 2.0));
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(go(i + 1, a, b, used, cur.max(linf(&a[i], &b[j]))));
                used[j] = false;
            }
        }
        best
    }
    go(0, a, b, &mut vec![false; b.len()], 0.0)
}

/// Random diagram with up to `max_points` points on the 2^-8 lattice.
pub fn random_diagram(rng: &mut StreamRng, max_points: usize) -> Vec<PersistencePair> {
    let n = rng.random_range(0..=max_points);
    (0..n)
        .map(|_| {
            let b = rng.random_range(0..=255u32) as f64 / 256.0;
            let d = b + rng.random_range(1..=(256 - (b * 256.0) as u32)) as f64 / 256.0;
            PersistencePair::new(b, d)
        })
        .collect()
}
