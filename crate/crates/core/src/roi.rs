//! Region-of-interest masks.
//!
//! The default extractor thresholds with Otsu's method, keeps the largest
//! 4-connected foreground component and closes it with a 3x3 square. Users
//! with segmentation masks from another tool can pass them in as PGM files.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::grid::GridTransform;
use crate::image::{load_image_auto, GrayImage};
use crate::morphology::binary_close3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "{} mask entries for a {height}x{width} grid",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![true; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn transformed(&self, transform: GridTransform) -> Self {
        let (height, width) = transform.output_dims(self.height, self.width);
        Self {
            height,
            width,
            mask: transform.apply(&self.mask, self.height, self.width),
        }
    }

    /// Mask as an image with 0 outside and 1 inside (written as 0/255 PGM).
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.height, self.width, |r, c| {
            if self.contains(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn check_dims(&self, img: &GrayImage) -> Result<()> {
        if img.dims() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: self.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoiMethod {
    OtsuLargestComponent,
    ExternalMask(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiExtraction {
    pub mask: RoiMask,
    /// Set when thresholding was undefined and the full image was used.
    pub fallback: bool,
}

pub fn extract_roi(img: &GrayImage, method: &RoiMethod) -> Result<RoiExtraction> {
    match method {
        RoiMethod::OtsuLargestComponent => Ok(otsu_largest_component(img)),
        RoiMethod::ExternalMask(path) => Ok(RoiExtraction {
            mask: load_mask(path, img.dims())?,
            fallback: false,
        }),
    }
}

/// Reads a 0/255 PGM (or PNG) mask; samples at or above one half are inside.
pub fn load_mask(path: &Path, dims: (usize, usize)) -> Result<RoiMask> {
    let img = load_image_auto(path)?;
    if img.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: img.dims(),
        });
    }
    RoiMask::new(
        img.height(),
        img.width(),
        img.data().iter().map(|&v| v >= 0.5).collect(),
    )
}

/// Otsu threshold over a 256-bin histogram of the 8-bit quantized image.
/// Returns the bin index `t` such that bins `0..=t` form the lower class, or
/// `None` when the image occupies a single bin.
pub fn otsu_threshold(img: &GrayImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for b in img.to_u8() {
        hist[b as usize] += 1;
    }
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return None;
    }
    let total = img.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (t, &h) in hist.iter().enumerate().take(255) {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

fn otsu_largest_component(img: &GrayImage) -> RoiExtraction {
    let (h, w) = img.dims();
    let Some(threshold) = otsu_threshold(img) else {
        warn!("otsu threshold undefined on a constant image; using the full image as ROI");
        return RoiExtraction {
            mask: RoiMask::full(h, w),
            fallback: true,
        };
    };
    let quantized = img.to_u8();
    let low: Vec<bool> = quantized.iter().map(|&q| q <= threshold).collect();
    let n_low = low.iter().filter(|&&b| b).count();
    // the minority class is the foreground; ties go to the bright class
    let foreground: Vec<bool> = if 2 * n_low < low.len() {
        low
    } else {
        low.iter().map(|&b| !b).collect()
    };
    let component = largest_component(&foreground, h, w);
    let closed = binary_close3(&component, h, w);
    RoiExtraction {
        mask: RoiMask {
            height: h,
            width: w,
            mask: closed,
        },
        fallback: false,
    }
}

/// Largest 4-connected component of `fg`; ties go to the component met first
/// in raster order.
pub(crate) fn largest_component(fg: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; fg.len()];
    let mut best: Option<(usize, usize)> = None; // (size, label)
    let mut stack = Vec::new();
    let mut next = 0;
    for start in 0..fg.len() {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if fg[q] && label[q] == usize::MAX {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, next));
        }
        next += 1;
    }
    match best {
        Some((_, keep)) => label.iter().map(|&l| l == keep).collect(),
        None => vec![false; fg.len()],
    }
}

/// Sets every pixel outside the ROI to 1.0, the last value to enter a
/// sublevel filtration.
pub fn apply_mask(img: &GrayImage, roi: &RoiMask) -> Result<GrayImage> {
    roi.check_dims(img)?;
    let data = img
        .data()
        .iter()
        .zip(roi.as_slice())
        .map(|(&v, &inside)| if inside { v } else { 1.0 })
        .collect();
    Ok(GrayImage::from_raw_unchecked(img.height(), img.width(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(size: usize, cr: f64, cc: f64, radius: f64, fg: f64, bg: f64) -> GrayImage {
        GrayImage::from_fn(size, size, |r, c| {
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            if d <= radius {
                fg
            } else {
                bg
            }
        })
    }

    #[test]
    fn constant_image_falls_back_to_full_mask() {
        let out = extract_roi(&GrayImage::constant(8, 8, 0.3), &RoiMethod::OtsuLargestComponent)
            .unwrap();
        assert!(out.fallback);
        assert!(out.mask.is_full());
    }

    #[test]
    fn bright_disk_is_recovered() {
        let img = disk(20, 9.5, 9.5, 5.0, 0.9, 0.1);
        let out = extract_roi(&img, &RoiMethod::OtsuLargestComponent).unwrap();
        assert!(!out.fallback);
        for r in 0..20usize {
            for c in 0..20usize {
                if img.get(r, c) > 0.5 {
                    assert!(out.mask.contains(r, c), "disk pixel ({r},{c}) missing");
                } else if out.mask.contains(r, c) {
                    // closing may only add pixels touching the disk
                    let near = (r.saturating_sub(1)..=(r + 1).min(19))
                        .any(|rr| (c.saturating_sub(1)..=(c + 1).min(19)).any(|cc| img.get(rr, cc) > 0.5));
                    assert!(near, "pixel ({r},{c}) added away from the disk");
                }
            }
        }
    }

    #[test]
    fn keeps_only_largest_component() {
        let mut img = disk(24, 8.0, 8.0, 5.0, 0.1, 0.9);
        let blob = disk(24, 20.0, 20.0, 1.5, 0.1, 0.9);
        img = GrayImage::from_fn(24, 24, |r, c| img.get(r, c).min(blob.get(r, c)));
        let out = extract_roi(&img, &RoiMethod::OtsuLargestComponent).unwrap();
        assert!(out.mask.contains(8, 8));
        assert!(!out.mask.contains(20, 20));
    }

    #[test]
    fn external_mask_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = RoiMask::new(3, 3, vec![true, false, true, false, true, false, true, true, false])
            .unwrap();
        crate::image::save_image(&mask.to_image(), &path, crate::image::ImageFormat::PgmAscii)
            .unwrap();
        let img = GrayImage::constant(3, 3, 0.2);
        let out = extract_roi(&img, &RoiMethod::ExternalMask(path.clone())).unwrap();
        assert_eq!(out.mask, mask);
        let wrong = GrayImage::constant(4, 3, 0.2);
        assert!(matches!(
            extract_roi(&wrong, &RoiMethod::ExternalMask(path)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn masking_fills_background_with_one() {
        let img = GrayImage::from_fn(5, 5, |r, c| ((r * 5 + c) as f64) / 30.0);
        let full = RoiMask::full(5, 5);
        assert_eq!(apply_mask(&img, &full).unwrap(), img);
        let mut m = vec![false; 25];
        m[12] = true;
        let roi = RoiMask::new(5, 5, m).unwrap();
        let out = apply_mask(&img, &roi).unwrap();
        assert_eq!(out.get(2, 2), img.get(2, 2));
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 24);
        assert!(apply_mask(&GrayImage::constant(4, 5, 0.0), &roi).is_err());
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(RoiMask::new(2, 2, vec![false; 4]), Err(Error::EmptyMask)));
    }
}
