//! Augmentation operators grouped by their effect on topology: pixel
//! permutations (flips, quarter turns), boundary perturbation (Gaussian
//! noise), smoothing (Gaussian blur), intensity maps (contrast, brightness)
//! and grayscale morphology (dilation, erosion).
//!
//! Every operator maps a valid image to a valid image: outputs are clamped to
//! `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridTransform;
use crate::image::{clamp_unit, GrayImage};
use crate::morphology::{max_filter, min_filter};
use crate::rng::{Gaussian, StreamRng};
use crate::roi::RoiMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationOp {
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turns, `k` in 1..=3.
    Rot90 { k: u8 },
    GaussianNoise { sigma: f64 },
    GaussianBlur { sigma: f64 },
    Contrast { c: f64 },
    Brightness { beta: f64 },
    Dilate { r: u8 },
    Erode { r: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Hflip,
    Vflip,
    Rot90,
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Dilate,
    Erode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamType {
    None,
    Real,
    Integer,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Hflip,
        OpKind::Vflip,
        OpKind::Rot90,
        OpKind::GaussianNoise,
        OpKind::GaussianBlur,
        OpKind::Contrast,
        OpKind::Brightness,
        OpKind::Dilate,
        OpKind::Erode,
    ];

    pub fn param_type(self) -> ParamType {
        match self {
            OpKind::Hflip | OpKind::Vflip => ParamType::None,
            OpKind::Rot90 | OpKind::Dilate | OpKind::Erode => ParamType::Integer,
            _ => ParamType::Real,
        }
    }

    /// Closed range of admissible parameter values.
    pub fn valid_range(self) -> (f64, f64) {
        match self {
            OpKind::Hflip | OpKind::Vflip => (0.0, 0.0),
            OpKind::Rot90 | OpKind::Dilate | OpKind::Erode => (1.0, 3.0),
            OpKind::GaussianNoise => (0.0, 1.0),
            OpKind::GaussianBlur => (0.0, 5.0),
            OpKind::Contrast => (-0.9, 2.0),
            OpKind::Brightness => (-0.5, 0.5),
        }
    }

    /// True for pure pixel permutations, which leave every diagram unchanged.
    pub fn is_homeomorphism(self) -> bool {
        matches!(self, OpKind::Hflip | OpKind::Vflip | OpKind::Rot90)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Hflip => "hflip",
            OpKind::Vflip => "vflip",
            OpKind::Rot90 => "rot90",
            OpKind::GaussianNoise => "gaussian_noise",
            OpKind::GaussianBlur => "gaussian_blur",
            OpKind::Contrast => "contrast",
            OpKind::Brightness => "brightness",
            OpKind::Dilate => "dilate",
            OpKind::Erode => "erode",
        }
    }

    /// Builds the operator for a parameter value (integers are rounded).
    pub fn instantiate(self, param: f64) -> Result<AugmentationOp> {
        let int = || -> Result<u8> {
            let r = param.round();
            if !(1.0..=3.0).contains(&r) {
                return Err(Error::InvalidParameter(format!(
                    "{} expects an integer in 1..=3, got {param}",
                    self.name()
                )));
            }
            Ok(r as u8)
        };
        let op = match self {
            OpKind::Hflip => AugmentationOp::HFlip,
            OpKind::Vflip => AugmentationOp::VFlip,
            OpKind::Rot90 => AugmentationOp::Rot90 { k: int()? },
            OpKind::GaussianNoise => AugmentationOp::GaussianNoise { sigma: param },
            OpKind::GaussianBlur => AugmentationOp::GaussianBlur { sigma: param },
            OpKind::Contrast => AugmentationOp::Contrast { c: param },
            OpKind::Brightness => AugmentationOp::Brightness { beta: param },
            OpKind::Dilate => AugmentationOp::Dilate { r: int()? },
            OpKind::Erode => AugmentationOp::Erode { r: int()? },
        };
        op.validate()?;
        Ok(op)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown augmentation `{s}`")))
    }
}

impl AugmentationOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugmentationOp::HFlip => OpKind::Hflip,
            AugmentationOp::VFlip => OpKind::Vflip,
            AugmentationOp::Rot90 { .. } => OpKind::Rot90,
            AugmentationOp::GaussianNoise { .. } => OpKind::GaussianNoise,
            AugmentationOp::GaussianBlur { .. } => OpKind::GaussianBlur,
            AugmentationOp::Contrast { .. } => OpKind::Contrast,
            AugmentationOp::Brightness { .. } => OpKind::Brightness,
            AugmentationOp::Dilate { .. } => OpKind::Dilate,
            AugmentationOp::Erode { .. } => OpKind::Erode,
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            AugmentationOp::HFlip | AugmentationOp::VFlip => None,
            AugmentationOp::Rot90 { k } => Some(k as f64),
            AugmentationOp::GaussianNoise { sigma } | AugmentationOp::GaussianBlur { sigma } => {
                Some(sigma)
            }
            AugmentationOp::Contrast { c } => Some(c),
            AugmentationOp::Brightness { beta } => Some(beta),
            AugmentationOp::Dilate { r } | AugmentationOp::Erode { r } => Some(r as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        if let Some(p) = self.param() {
            let (lo, hi) = kind.valid_range();
            if !p.is_finite() || p < lo || p > hi {
                return Err(Error::InvalidParameter(format!(
                    "{kind} parameter {p} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn grid_transform(&self) -> Option<GridTransform> {
        match *self {
            AugmentationOp::HFlip => Some(GridTransform::FlipHorizontal),
            AugmentationOp::VFlip => Some(GridTransform::FlipVertical),
            AugmentationOp::Rot90 { k } => Some(GridTransform::Rotate90(k)),
            _ => None,
        }
    }
}

pub fn apply_op<R: Rng + ?Sized>(
    img: &GrayImage,
    op: &AugmentationOp,
    rng: &mut R,
) -> Result<GrayImage> {
    op.validate()?;
    let (h, w) = img.dims();
    if let Some(t) = op.grid_transform() {
        let (oh, ow) = t.output_dims(h, w);
        return Ok(GrayImage::from_raw_unchecked(oh, ow, t.apply(img.data(), h, w)));
    }
    let out = match *op {
        AugmentationOp::GaussianNoise { sigma } => {
            let mut g = Gaussian::new();
            img.map(|v| v + sigma * g.sample(rng))
        }
        AugmentationOp::GaussianBlur { sigma } => gaussian_blur(img, sigma),
        // same as (v - 0.5)(1 + c) + 0.5, written so c = 0 is exact
        AugmentationOp::Contrast { c } => img.map(|v| v + c * (v - 0.5)),
        AugmentationOp::Brightness { beta } => img.map(|v| v + beta),
        AugmentationOp::Dilate { r } => {
            GrayImage::from_raw_unchecked(h, w, max_filter(img.data(), h, w, r as usize))
        }
        AugmentationOp::Erode { r } => {
            GrayImage::from_raw_unchecked(h, w, min_filter(img.data(), h, w, r as usize))
        }
        AugmentationOp::HFlip | AugmentationOp::VFlip | AugmentationOp::Rot90 { .. } => {
            unreachable!("handled as grid transforms")
        }
    };
    Ok(out)
}

/// Index into `0..n` after mirroring about the edge samples (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = img.dims();
    let src = img.data();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * src[r * w + reflect(c as isize + i as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = clamp_unit(
                kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[reflect(r as isize + i as isize - radius, h) * w + c])
                    .sum(),
            );
        }
    }
    GrayImage::from_raw_unchecked(h, w, out)
}

/// One operation of a combination with the interval its parameter is drawn
/// from. Parameterless operations carry `[0, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpTemplate {
    pub kind: OpKind,
    pub param_lo: f64,
    pub param_hi: f64,
}

impl OpTemplate {
    pub fn new(kind: OpKind, param_lo: f64, param_hi: f64) -> Self {
        Self {
            kind,
            param_lo,
            param_hi,
        }
    }

    pub fn fixed(kind: OpKind) -> Self {
        Self::new(kind, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.param_type() == ParamType::None {
            return Ok(());
        }
        let (lo, hi) = self.kind.valid_range();
        if !(self.param_lo <= self.param_hi && self.param_lo >= lo && self.param_hi <= hi) {
            return Err(Error::InvalidParameter(format!(
                "{} interval [{}, {}] not inside [{lo}, {hi}]",
                self.kind, self.param_lo, self.param_hi
            )));
        }
        Ok(())
    }

    /// Parameter at fraction `s` of the interval (rounded for integer kinds).
    pub fn param_at(&self, s: f64) -> f64 {
        let v = self.param_lo + s * (self.param_hi - self.param_lo);
        match self.kind.param_type() {
            ParamType::None => 0.0,
            ParamType::Real => v,
            ParamType::Integer => v.round(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind.param_type() {
            ParamType::None => 0.0,
            ParamType::Real => {
                if self.param_hi > self.param_lo {
                    rng.random_range(self.param_lo..=self.param_hi)
                } else {
                    self.param_lo
                }
            }
            ParamType::Integer => {
                let (lo, hi) = (self.param_lo.round() as i64, self.param_hi.round() as i64);
                rng.random_range(lo..=hi) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationCombo {
    pub ops: Vec<OpTemplate>,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentationCombo {
    pub fn new(ops: Vec<OpTemplate>) -> Self {
        Self { ops, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() || self.ops.len() > 3 {
            return Err(Error::InvalidParameter(format!(
                "a combination holds 1 to 3 operations, got {}",
                self.ops.len()
            )));
        }
        self.ops.iter().try_for_each(OpTemplate::validate)
    }

    pub fn name(&self) -> String {
        self.ops
            .iter()
            .map(|o| o.kind.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// True when at least one operation has a tunable intensity.
    pub fn has_intensity(&self) -> bool {
        self.ops
            .iter()
            .any(|o| o.kind.param_type() != ParamType::None && !o.kind.is_homeomorphism())
    }

    /// Operators at fraction `s` along every op's interval.
    pub fn ops_at(&self, s: f64) -> Result<Vec<AugmentationOp>> {
        self.ops
            .iter()
            .map(|o| o.kind.instantiate(o.param_at(s)))
            .collect()
    }

    pub fn rng(&self) -> StreamRng {
        crate::rng::stream(self.seed, &[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampledParam {
    pub kind: OpKind,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub image: GrayImage,
    /// The input ROI carried through any geometric transform.
    pub roi: RoiMask,
    pub params: Vec<SampledParam>,
}

/// Applies a fixed sequence of operators, moving the ROI along with any pixel
/// permutation.
pub fn apply_ops_with_roi<R: Rng + ?Sized>(
    img: &GrayImage,
    roi: &RoiMask,
    ops: &[AugmentationOp],
    rng: &mut R,
) -> Result<(GrayImage, RoiMask)> {
    roi.check_dims(img)?;
    let mut image = img.clone();
    let mut mask = roi.clone();
    for op in ops {
        image = apply_op(&image, op, rng)?;
        if let Some(t) = op.grid_transform() {
            mask = mask.transformed(t);
        }
    }
    Ok((image, mask))
}

/// Samples each operation's intensity uniformly from its interval and applies
/// the operations in order.
pub fn apply_combo<R: Rng + ?Sized>(
    img: &GrayImage,
    combo: &AugmentationCombo,
    rng: &mut R,
) -> Result<(GrayImage, Vec<SampledParam>)> {
    let roi = RoiMask::full(img.height(), img.width());
    let view = apply_combo_with_roi(img, &roi, combo, rng)?;
    Ok((view.image, view.params))
}

pub fn apply_combo_with_roi<R: Rng + ?Sized>(
    img: &GrayImage,
    roi: &RoiMask,
    combo: &AugmentationCombo,
    rng: &mut R,
) -> Result<AugmentedView> {
    combo.validate()?;
    let mut params = Vec::with_capacity(combo.ops.len());
    let mut ops = Vec::with_capacity(combo.ops.len());
    for t in &combo.ops {
        let value = t.sample(rng);
        ops.push(t.kind.instantiate(value)?);
        params.push(SampledParam {
            kind: t.kind,
            value: (t.kind.param_type() != ParamType::None).then_some(value),
        });
    }
    let (image, roi) = apply_ops_with_roi(img, roi, &ops, rng)?;
    Ok(AugmentedView { image, roi, params })
}

/// Appearance augmentations for the visual branch: random resized crop,
/// brightness/contrast jitter and optional blur. These are not calibrated
/// against topology.
pub mod visual {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct VisualAugment {
        /// Lower bound of the crop side as a fraction of the image side.
        pub min_crop: f64,
        pub brightness: f64,
        pub contrast: f64,
        pub blur_prob: f64,
        pub blur_sigma: (f64, f64),
        pub flip: bool,
    }

    impl VisualAugment {
        pub fn weak() -> Self {
            Self {
                min_crop: 0.85,
                brightness: 0.1,
                contrast: 0.1,
                blur_prob: 0.0,
                blur_sigma: (0.0, 0.0),
                flip: true,
            }
        }

        pub fn strong() -> Self {
            Self {
                min_crop: 0.6,
                brightness: 0.3,
                contrast: 0.4,
                blur_prob: 0.5,
                blur_sigma: (0.3, 1.2),
                flip: true,
            }
        }

        pub fn apply<R: Rng + ?Sized>(&self, img: &GrayImage, rng: &mut R) -> GrayImage {
            let mut out = random_resized_crop(img, self.min_crop, rng);
            if self.flip && rng.random_bool(0.5) {
                let (h, w) = out.dims();
                out = GrayImage::from_raw_unchecked(
                    h,
                    w,
                    GridTransform::FlipHorizontal.apply(out.data(), h, w),
                );
            }
            let beta = rng.random_range(-self.brightness..=self.brightness);
            let c = rng.random_range(-self.contrast..=self.contrast);
            out = out.map(|v| (v - 0.5) * (1.0 + c) + 0.5 + beta);
            if self.blur_prob > 0.0 && rng.random_bool(self.blur_prob) {
                let sigma = rng.random_range(self.blur_sigma.0..=self.blur_sigma.1);
                out = gaussian_blur(&out, sigma);
            }
            out
        }
    }

    /// Square crop of side `s * min(h, w)`, `s ~ U[min_crop, 1]`, resampled
    /// bilinearly back to the input size.
    pub fn random_resized_crop<R: Rng + ?Sized>(
        img: &GrayImage,
        min_crop: f64,
        rng: &mut R,
    ) -> GrayImage {
        let (h, w) = img.dims();
        let s = if min_crop < 1.0 {
            rng.random_range(min_crop..=1.0)
        } else {
            1.0
        };
        let ch = (s * h as f64).max(2.0);
        let cw = (s * w as f64).max(2.0);
        let top = rng.random_range(0.0..=(h as f64 - ch));
        let left = rng.random_range(0.0..=(w as f64 - cw));
        GrayImage::from_fn(h, w, |r, c| {
            let y = top + (r as f64 + 0.5) * ch / h as f64 - 0.5;
            let x = left + (c as f64 + 0.5) * cw / w as f64 - 0.5;
            bilinear(img, y, x)
        })
    }

    fn bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
        let (h, w) = img.dims();
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp() -> GrayImage {
        GrayImage::from_fn(6, 7, |r, c| ((r * 7 + c) as f64) / 41.0)
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = ramp();
        let mut rng = stream(0, &[]);
        let once = apply_op(&img, &AugmentationOp::HFlip, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_op(&once, &AugmentationOp::HFlip, &mut rng).unwrap(), img);
    }

    #[test]
    fn neutral_intensity_maps() {
        let img = ramp();
        let mut rng = stream(0, &[]);
        assert_eq!(
            apply_op(&img, &AugmentationOp::Contrast { c: 0.0 }, &mut rng).unwrap(),
            img
        );
        assert_eq!(
            apply_op(&img, &AugmentationOp::Brightness { beta: 0.0 }, &mut rng).unwrap(),
            img
        );
        assert_eq!(
            apply_op(&img, &AugmentationOp::GaussianBlur { sigma: 0.0 }, &mut rng).unwrap(),
            img
        );
    }

    #[test]
    fn dilation_grows_a_peak_into_a_block() {
        let img = GrayImage::from_fn(5, 5, |r, c| if r == 2 && c == 2 { 1.0 } else { 0.0 });
        let mut rng = stream(0, &[]);
        let out = apply_op(&img, &AugmentationOp::Dilate { r: 1 }, &mut rng).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(out.get(r, c), if inside { 1.0 } else { 0.0 });
            }
        }
        let eroded = apply_op(&out, &AugmentationOp::Erode { r: 1 }, &mut rng).unwrap();
        assert_eq!(eroded, img);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut rng = stream(0, &[]);
        let img = ramp();
        for op in [
            AugmentationOp::GaussianNoise { sigma: -0.1 },
            AugmentationOp::Contrast { c: -1.0 },
            AugmentationOp::Brightness { beta: 0.6 },
            AugmentationOp::Dilate { r: 4 },
            AugmentationOp::Rot90 { k: 0 },
        ] {
            assert!(apply_op(&img, &op, &mut rng).is_err(), "{op:?}");
        }
        let combo = AugmentationCombo::new(vec![OpTemplate::fixed(OpKind::Hflip); 4]);
        assert!(combo.validate().is_err());
    }

    #[test]
    fn blur_preserves_constants_and_range() {
        let img = GrayImage::constant(5, 5, 0.3);
        let out = gaussian_blur(&img, 2.0);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let noisy = GrayImage::from_fn(8, 8, |r, c| ((r + c) % 2) as f64);
        let out = gaussian_blur(&noisy, 1.0);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.max_value() < 1.0 && out.min_value() > 0.0);
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn combo_is_deterministic_for_a_seed() {
        let img = ramp();
        let combo = AugmentationCombo {
            ops: vec![
                OpTemplate::fixed(OpKind::Hflip),
                OpTemplate::new(OpKind::GaussianNoise, 0.05, 0.15),
                OpTemplate::new(OpKind::Contrast, 0.1, 0.2),
            ],
            seed: 42,
        };
        let a = apply_combo(&img, &combo, &mut combo.rng()).unwrap();
        let b = apply_combo(&img, &combo, &mut combo.rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1[0].value, None);
        let sigma = a.1[1].value.unwrap();
        assert!((0.05..=0.15).contains(&sigma));
    }

    #[test]
    fn flip_only_combo_samples_nothing() {
        let img = ramp();
        let combo = AugmentationCombo::new(vec![OpTemplate::fixed(OpKind::Hflip)]);
        let (out, params) = apply_combo(&img, &combo, &mut stream(3, &[])).unwrap();
        assert_eq!(out, apply_op(&img, &AugmentationOp::HFlip, &mut stream(0, &[])).unwrap());
        assert!(params.iter().all(|p| p.value.is_none()));
    }

    #[test]
    fn visual_augment_keeps_shape_and_range() {
        let img = ramp();
        let mut rng = stream(5, &[]);
        for aug in [visual::VisualAugment::weak(), visual::VisualAugment::strong()] {
            let out = aug.apply(&img, &mut rng);
            assert_eq!(out.dims(), img.dims());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
