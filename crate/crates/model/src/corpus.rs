//! Synthetic labelled shape corpus: dark disks with zero, one or two bright
//! holes on a bright background, plus a skin-lesion-like generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use topocl_core::augment::{AugmentationCombo, OpKind, OpTemplate};
use topocl_core::calibrate::{CalibrationImage, CalibrationSettings};
use topocl_core::rng::{stream, Gaussian};
use topocl_core::roi::{extract_roi, RoiMethod};
use topocl_core::{GrayImage, RoiMask};

use crate::error::{Error, Result};

/// Minimum wall thickness, in pixels, between a hole and anything else.
const MIN_WALL: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Disk,
    Annulus,
    DoubleAnnulus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Disk, ShapeClass::Annulus, ShapeClass::DoubleAnnulus];

    pub fn label(self) -> usize {
        self as usize
    }

    /// Number of holes, i.e. the first Betti number of the shape.
    pub fn holes(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Disk => "disk",
            Self::Annulus => "annulus",
            Self::DoubleAnnulus => "double-annulus",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_per_class: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Outer radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Shape and background intensity ranges.
    pub dark: (f64, f64),
    pub bright: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 300,
            size: 32,
            noise: 0.03,
            radius: (0.26, 0.38),
            dark: (0.05, 0.2),
            bright: (0.75, 0.95),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Infeasible(format!("image side {} is below 16", self.size)));
        }
        let (lo, hi) = self.radius;
        // a disk wider than this covers half the image and the ROI would
        // pick the background instead
        if !(0.0 < lo && lo <= hi && hi <= 0.39) {
            return Err(Error::Infeasible(format!("radius fraction range {:?}", self.radius)));
        }
        // two holes plus three walls must fit across the smallest disk
        let r = lo * self.size as f64;
        if 0.23 * r < MIN_WALL {
            return Err(Error::Infeasible(format!(
                "outer radius {r:.1} px leaves walls thinner than {MIN_WALL} px"
            )));
        }
        if !(self.noise >= 0.0) || self.dark.1 >= self.bright.0 {
            return Err(Error::Infeasible("noise must be non-negative and dark below bright".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub roi: RoiMask,
    pub class: ShapeClass,
}

impl Sample {
    pub fn label(&self) -> usize {
        self.class.label()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCorpus {
    pub config: CorpusConfig,
    pub samples: Vec<Sample>,
}

impl ShapeCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(Sample::label).collect()
    }

    pub fn calibration_images(&self) -> Vec<CalibrationImage> {
        self.samples
            .iter()
            .map(|s| CalibrationImage {
                image: s.image.clone(),
                roi: s.roi.clone(),
            })
            .collect()
    }
}

/// Geometry of one shape, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeGeometry {
    pub center: (f64, f64),
    pub radius: f64,
    pub holes: Vec<((f64, f64), f64)>,
    pub dark: f64,
    pub bright: f64,
}

impl ShapeGeometry {
    pub fn sample<R: Rng + ?Sized>(class: ShapeClass, config: &CorpusConfig, rng: &mut R) -> Self {
        let s = config.size as f64;
        let radius = rng.random_range(config.radius.0..=config.radius.1) * s;
        let slack = (s / 2.0 - radius - 1.0).max(0.0);
        let center = (
            s / 2.0 + rng.random_range(-slack..=slack),
            s / 2.0 + rng.random_range(-slack..=slack),
        );
        let holes = match class {
            ShapeClass::Disk => vec![],
            ShapeClass::Annulus => {
                let r = rng.random_range(0.3..=0.6) * radius;
                let room = (radius - r - MIN_WALL - 0.5).max(0.0) * 0.5;
                let off = (rng.random_range(-room..=room), rng.random_range(-room..=room));
                vec![((center.0 + off.0, center.1 + off.1), r)]
            }
            ShapeClass::DoubleAnnulus => {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                let r = rng.random_range(0.22..=0.32) * radius;
                let d = 0.45 * radius;
                vec![
                    ((center.0 + d * dy, center.1 + d * dx), r),
                    ((center.0 - d * dy, center.1 - d * dx), r),
                ]
            }
        };
        Self {
            center,
            radius,
            holes,
            dark: rng.random_range(config.dark.0..=config.dark.1),
            bright: rng.random_range(config.bright.0..=config.bright.1),
        }
    }

    /// Noiseless rendering; a pixel belongs to a region when its center does.
    pub fn render(&self, size: usize) -> GrayImage {
        let inside = |(cy, cx): (f64, f64), r: f64, y: f64, x: f64| (y - cy).powi(2) + (x - cx).powi(2) <= r * r;
        GrayImage::from_fn(size, size, |row, col| {
            let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
            let in_shape = inside(self.center, self.radius, y, x) && !self.holes.iter().any(|&(c, r)| inside(c, r, y, x));
            if in_shape {
                self.dark
            } else {
                self.bright
            }
        })
    }
}

/// Adds clamped Gaussian noise of deviation `sigma`.
pub fn add_noise<R: Rng + ?Sized>(img: &GrayImage, sigma: f64, rng: &mut R) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut gauss = Gaussian::new();
    img.map(|v| (v + sigma * gauss.sample(rng)).clamp(0.0, 1.0))
}

/// One sample of `class`; sample `index` uses its own random stream.
pub fn generate_sample(config: &CorpusConfig, class: ShapeClass, index: usize) -> Result<Sample> {
    let mut rng = stream(config.seed, &[0xc0, class.label() as u64, index as u64]);
    let geom = ShapeGeometry::sample(class, config, &mut rng);
    let image = add_noise(&geom.render(config.size), config.noise, &mut rng);
    let roi = extract_roi(&image, &RoiMethod::OtsuLargestComponent)?.mask;
    Ok(Sample { image, roi, class })
}

/// Class-interleaved corpus: disk, annulus, double-annulus, disk, ...
pub fn generate_corpus(config: &CorpusConfig) -> Result<ShapeCorpus> {
    config.validate()?;
    let mut samples = Vec::with_capacity(3 * config.n_per_class);
    for i in 0..config.n_per_class {
        for class in ShapeClass::ALL {
            samples.push(generate_sample(config, class, i)?);
        }
    }
    Ok(ShapeCorpus {
        config: config.clone(),
        samples,
    })
}

/// Corpus the shipped calibration table was measured on.
pub fn toy_calibration_corpus_config() -> CorpusConfig {
    CorpusConfig {
        n_per_class: 20,
        seed: 0xca1,
        ..CorpusConfig::default()
    }
}

/// Sweep templates of the shipped toy calibration table.
pub fn toy_calibration_templates() -> Vec<AugmentationCombo> {
    use OpKind::*;
    let t = OpTemplate::new;
    [
        vec![t(GaussianNoise, 0.0, 0.2)],
        vec![t(GaussianBlur, 0.5, 2.5)],
        vec![t(Brightness, 0.0, 0.2)],
        vec![t(Contrast, 0.0, 0.8)],
        vec![OpTemplate::fixed(Hflip), t(GaussianNoise, 0.0, 0.2)],
        vec![t(Rot90, 1.0, 1.0), t(GaussianBlur, 0.5, 2.5)],
        vec![t(GaussianNoise, 0.0, 0.16), t(Contrast, 0.0, 0.5)],
    ]
    .into_iter()
    .map(AugmentationCombo::new)
    .collect()
}

pub fn toy_calibration_settings() -> CalibrationSettings {
    CalibrationSettings {
        grid: 21,
        samples: 256,
        seed: 0,
        ..CalibrationSettings::default()
    }
}

/// Pigmented-lesion stand-in: an irregular dark blob with a darker rim
/// gradient, a pale regression patch inside and smooth mottling, on bright
/// skin.
pub fn render_lesion<R: Rng + ?Sized>(size: usize, rng: &mut R) -> GrayImage {
    let s = size as f64;
    let radius = rng.random_range(0.22..0.32) * s;
    let center = (
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
    );
    let harmonics: Vec<(f64, f64)> = (2..=5)
        .map(|_| (rng.random_range(0.0..0.08), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let core = rng.random_range(0.0..0.05);
    let rim = rng.random_range(0.3..0.4);
    let skin = rng.random_range(0.75..0.85);
    let pale = rng.random_range(0.8..0.9);
    let patch_r = rng.random_range(0.3..0.4) * radius;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let off = rng.random_range(0.0..0.2) * radius;
    let patch = (center.0 + off * angle.sin(), center.1 + off * angle.cos());
    let mut gauss = Gaussian::new();
    let field: Vec<f64> = (0..size * size).map(|_| gauss.sample(rng)).collect();
    let field = GrayImage::from_fn(size, size, |r, c| (0.5 + 0.1 * field[r * size + c]).clamp(0.0, 1.0));
    let mottling = topocl_core::augment::gaussian_blur(&field, 1.5);
    GrayImage::from_fn(size, size, |row, col| {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        let (dy, dx) = (y - center.0, x - center.1);
        let theta = dy.atan2(dx);
        let boundary = radius
            * (1.0
                + harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, p))| a * ((k + 2) as f64 * theta + p).cos())
                    .sum::<f64>());
        let rho = (dy * dy + dx * dx).sqrt() / boundary;
        let texture = mottling.get(row, col) - 0.5;
        let v = if rho <= 1.0 {
            let d = ((y - patch.0).powi(2) + (x - patch.1).powi(2)).sqrt() / patch_r;
            // smooth step from the patch to the pigmented body
            let w = ((1.5 - d) / 0.5).clamp(0.0, 1.0);
            let body = core + (rim - core) * rho * rho;
            body + w * (pale - body) + texture
        } else {
            skin + 0.5 * texture
        };
        v.clamp(0.0, 1.0)
    })
}
