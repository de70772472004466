mod common;

use std::collections::VecDeque;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use topocl_core::image::{decode_image, encode_image, load_image, save_image};
use topocl_core::roi::{apply_mask, extract_roi};
use topocl_core::{GrayImage, ImageFormat, RoiMask, RoiMethod};

/// Minimal ASCII PGM reader written independently of the library parser.
fn reference_pgm(text: &str) -> (usize, usize, Vec<f64>) {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap())
        .flat_map(str::split_whitespace)
        .collect();
    assert_eq!(tokens[0], "P2");
    let w: usize = tokens[1].parse().unwrap();
    let h: usize = tokens[2].parse().unwrap();
    let max: f64 = tokens[3].parse().unwrap();
    let data = tokens[4..4 + w * h]
        .iter()
        .map(|t| t.parse::<f64>().unwrap() / max)
        .collect();
    (h, w, data)
}

#[test]
fn pgm_with_small_maxval_matches_reference_reader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m15.pgm");
    let text = "P2\n# maxval 15\n3 3\n15\n0 1 2\n3 15 5\n6 7 14\n";
    std::fs::write(&path, text).unwrap();
    let img = load_image(&path, ImageFormat::PgmAscii).unwrap();
    let (h, w, data) = reference_pgm(text);
    assert_eq!(img.dims(), (h, w));
    assert_eq!(img.data(), &data[..]);
    assert_eq!(img.get(1, 1), 1.0);
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng(20);
    let bytes: Vec<u8> = (0..7 * 5).map(|_| rng.random()).collect();
    let img = GrayImage::from_u8(7, 5, &bytes).unwrap();
    for (fmt, ext) in [
        (ImageFormat::PgmAscii, "pgm"),
        (ImageFormat::PgmBinary, "pgm"),
        (ImageFormat::PngGray8, "png"),
    ] {
        let path = dir.path().join(format!("img-{fmt}.{ext}"));
        save_image(&img, &path, fmt).unwrap();
        let back = load_image(&path, fmt).unwrap();
        assert_eq!(back, img);
        // re-encoding is idempotent
        let first = std::fs::read(&path).unwrap();
        save_image(&back, &path, fmt).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn quantization_error_is_bounded() {
    let mut rng = rng(21);
    let img = GrayImage::from_fn(16, 16, |_, _| rng.random_range(0.0..=1.0));
    let bytes = encode_image(&img, ImageFormat::PgmBinary).unwrap();
    let back = decode_image(&bytes, ImageFormat::PgmBinary).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
    }
}

/// Threshold at the midpoint and flood-fill from a seed pixel.
fn flood_fill(img: &GrayImage, seed: (usize, usize), bright: bool) -> Vec<bool> {
    let (h, w) = img.dims();
    let fg = |r: usize, c: usize| (img.get(r, c) > 0.5) == bright;
    let mut out = vec![false; h * w];
    let mut queue = VecDeque::from([seed]);
    out[seed.0 * w + seed.1] = true;
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (y, x) = (r as i64 + dr, c as i64 + dc);
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            if fg(y, x) && !out[y * w + x] {
                out[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    out
}

fn within_one_pixel(mask: &[bool], region: &[bool], h: usize, w: usize) -> bool {
    (0..h * w).all(|i| {
        if !mask[i] {
            return true;
        }
        let (r, c) = (i / w, i % w);
        (r.saturating_sub(1)..=(r + 1).min(h - 1))
            .any(|y| (c.saturating_sub(1)..=(c + 1).min(w - 1)).any(|x| region[y * w + x]))
    })
}

#[test]
fn otsu_roi_matches_flood_fill_oracle() {
    let mut rng = rng(22);
    for _ in 0..20 {
        let n = 32;
        let (cy, cx) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
        let radius: f64 = rng.random_range(3.0..8.0);
        let img = GrayImage::from_fn(n, n, |r, c| {
            let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
            let base = if d <= radius { 0.85 } else { 0.15 };
            base + rng.random_range(-0.05..0.05)
        });
        // small distractor blob
        let mut data = img.into_data();
        data[n + 1] = 0.9;
        data[n + 2] = 0.9;
        let img = GrayImage::new(n, n, data).unwrap();
        let ext = extract_roi(&img, &RoiMethod::OtsuLargestComponent).unwrap();
        assert!(!ext.fallback);
        let oracle = flood_fill(&img, (cy.round() as usize, cx.round() as usize), true);
        let mask = ext.mask.as_slice();
        assert!(oracle.iter().zip(mask).all(|(&o, &m)| !o || m), "oracle pixel outside ROI");
        assert!(within_one_pixel(mask, &oracle, n, n), "ROI grew more than one pixel");
        assert!(!mask[n + 1]);
        // deterministic
        assert_eq!(extract_roi(&img, &RoiMethod::OtsuLargestComponent).unwrap(), ext);
    }
}

#[test]
fn otsu_roi_of_a_dark_ring_is_the_ring() {
    let img = annulus(32, 5.0, 9.0, 0.1, 0.9);
    let roi = extract_roi(&img, &RoiMethod::OtsuLargestComponent).unwrap().mask;
    let oracle = flood_fill(&img, (15, 15 + 7), false);
    assert!(oracle.iter().zip(roi.as_slice()).all(|(&o, &m)| !o || m));
    assert!(within_one_pixel(roi.as_slice(), &oracle, 32, 32));
    // the hole stays outside
    assert!(!roi.contains(15, 15));
}

#[test]
fn external_mask_round_trip_and_masking() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.pgm");
    let roi_img = GrayImage::from_fn(6, 6, |r, c| if r >= 2 && c >= 1 { 1.0 } else { 0.0 });
    save_image(&roi_img, &path, ImageFormat::PgmBinary).unwrap();
    let img = annulus(6, 1.0, 2.0, 0.2, 0.6);
    let ext = extract_roi(&img, &RoiMethod::ExternalMask(path.clone())).unwrap();
    assert_eq!(ext.mask.to_image(), roi_img);
    let masked = apply_mask(&img, &ext.mask).unwrap();
    for r in 0..6 {
        for c in 0..6 {
            let expect = if ext.mask.contains(r, c) { img.get(r, c) } else { 1.0 };
            assert_eq!(masked.get(r, c), expect);
        }
    }
    let wrong = GrayImage::constant(5, 6, 0.5);
    assert!(extract_roi(&wrong, &RoiMethod::ExternalMask(path)).is_err());
}

#[test]
fn constant_image_falls_back_to_full_mask() {
    let ext = extract_roi(&GrayImage::constant(5, 5, 0.4), &RoiMethod::OtsuLargestComponent).unwrap();
    assert!(ext.fallback);
    assert!(ext.mask.is_full());
}

proptest! {
    #[test]
    fn byte_images_round_trip(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let mut rng = topocl_core::rng::stream(seed, &[]);
        let bytes: Vec<u8> = (0..h * w).map(|_| rng.random()).collect();
        let img = GrayImage::from_u8(h, w, &bytes).unwrap();
        for fmt in [ImageFormat::PgmAscii, ImageFormat::PgmBinary, ImageFormat::PngGray8] {
            let enc = encode_image(&img, fmt).unwrap();
            prop_assert_eq!(decode_image(&enc, fmt).unwrap().to_u8(), bytes.clone());
        }
    }

    #[test]
    fn full_mask_is_identity(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let mut rng = topocl_core::rng::stream(seed, &[]);
        let img = dyadic_image(&mut rng, h, w);
        prop_assert_eq!(apply_mask(&img, &RoiMask::full(h, w)).unwrap(), img);
    }
}
