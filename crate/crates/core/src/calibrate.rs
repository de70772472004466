//! Calibration of augmentation intensities against relative bottleneck
//! distance, and the training-time weak/strong view sampler.
//!
//! Each combination template is swept along a single scalar `s` in `[0, 1]`
//! that moves every operation's parameter linearly across its template
//! interval. At every grid point the median relative bottleneck distance is
//! measured over `M` drawn images; the widest run of consecutive grid points
//! whose medians fall inside a band becomes that band's interval. Sample `m`
//! uses the same image and random stream at every grid point, so a sweep
//! compares like with like.

use std::fmt;
use std::fs;
use std::path::Path;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_combo_with_roi, apply_ops_with_roi, AugmentationCombo, OpTemplate};
use crate::cubical::restrict_and_compute;
use crate::diagram::PersistenceDiagram;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::relative_bottleneck_pd;
use crate::rng::stream;
use crate::roi::RoiMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Weak,
    Strong,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Weak => "weak",
            Band::Strong => "strong",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub weak: (f64, f64),
    pub strong: (f64, f64),
}

impl Default for Bands {
    fn default() -> Self {
        Self {
            weak: (0.05, 0.15),
            strong: (0.15, 0.25),
        }
    }
}

impl Bands {
    pub fn range(&self, band: Band) -> (f64, f64) {
        match band {
            Band::Weak => self.weak,
            Band::Strong => self.strong,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    /// Grid points along the sweep, at least 5.
    pub grid: usize,
    /// Images drawn per grid point (`M`).
    pub samples: usize,
    pub bands: Bands,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            grid: 11,
            samples: 24,
            bands: Bands::default(),
            seed: 0,
        }
    }
}

/// An image of the calibration corpus with its region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationImage {
    pub image: GrayImage,
    pub roi: RoiMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCombo {
    pub ops: Vec<OpTemplate>,
    pub band: Band,
    pub median_lo: f64,
    pub median_hi: f64,
    #[serde(rename = "M")]
    pub samples: usize,
}

impl CalibratedCombo {
    pub fn combo(&self) -> AugmentationCombo {
        AugmentationCombo::new(self.ops.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnusableCombo {
    pub name: String,
    pub band: Band,
    pub median_min: f64,
    pub median_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub dataset: String,
    pub combos: Vec<CalibratedCombo>,
    #[serde(default)]
    pub bands: Bands,
    #[serde(default)]
    pub unusable: Vec<UnusableCombo>,
}

impl CalibrationTable {
    pub fn band(&self, band: Band) -> impl Iterator<Item = &CalibratedCombo> {
        self.combos.iter().filter(move |c| c.band == band)
    }

    pub fn is_usable(&self) -> bool {
        self.band(Band::Weak).next().is_some() && self.band(Band::Strong).next().is_some()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub s: f64,
    pub params: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComboSweep {
    pub name: String,
    pub template: AugmentationCombo,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub table: CalibrationTable,
    pub sweeps: Vec<ComboSweep>,
}

/// Precomputed reference diagrams for a corpus.
pub struct Measurer<'a> {
    corpus: &'a [CalibrationImage],
    reference: Vec<PersistenceDiagram>,
}

impl<'a> Measurer<'a> {
    pub fn new(corpus: &'a [CalibrationImage]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let reference = corpus
            .iter()
            .map(|c| restrict_and_compute(&c.image, &c.roi))
            .collect::<Result<_>>()?;
        Ok(Self { corpus, reference })
    }

    /// Relative bottleneck distances of `samples` draws for `combo` at sweep
    /// position `s`. Draw `m` uses stream `(seed, stream_id, m)`.
    pub fn measure(
        &self,
        combo: &AugmentationCombo,
        s: f64,
        samples: usize,
        seed: u64,
        stream_id: u64,
    ) -> Result<Vec<f64>> {
        let ops = combo.ops_at(s)?;
        (0..samples)
            .map(|m| {
                let mut rng = stream(seed, &[stream_id, m as u64]);
                let idx = rng.random_range(0..self.corpus.len());
                let entry = &self.corpus[idx];
                let (aug, roi) = apply_ops_with_roi(&entry.image, &entry.roi, &ops, &mut rng)?;
                let pd = restrict_and_compute(&aug, &roi)?;
                Ok(relative_bottleneck_pd(&self.reference[idx], &pd).max_ratio)
            })
            .collect()
    }

    pub fn median(
        &self,
        combo: &AugmentationCombo,
        s: f64,
        samples: usize,
        seed: u64,
        stream_id: u64,
    ) -> Result<f64> {
        Ok(median(&self.measure(combo, s, samples, seed, stream_id)?))
    }

    pub fn sweep(
        &self,
        combo: &AugmentationCombo,
        settings: &CalibrationSettings,
        stream_id: u64,
    ) -> Result<ComboSweep> {
        let points = (0..settings.grid)
            .map(|g| {
                let s = g as f64 / (settings.grid - 1) as f64;
                Ok(SweepPoint {
                    s,
                    params: combo.ops.iter().map(|o| o.param_at(s)).collect(),
                    median: self.median(combo, s, settings.samples, settings.seed, stream_id)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ComboSweep {
            name: combo.name(),
            template: combo.clone(),
            points,
        })
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Widest run of consecutive points with median inside `[lo, hi]`; ties go to
/// the run at smaller `s`. Returns inclusive grid indices.
pub fn widest_run(points: &[SweepPoint], lo: f64, hi: f64) -> Option<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, p) in points.iter().enumerate() {
        let inside = p.median >= lo && p.median <= hi;
        match (inside, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                runs.push((s0, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        runs.push((s0, points.len() - 1));
    }
    if runs.len() > 1 {
        info!("{} disjoint runs inside [{lo}, {hi}], keeping the widest", runs.len());
    }
    runs.into_iter()
        .fold(None, |best: Option<(usize, usize)>, r| match best {
            Some(b) if b.1 - b.0 >= r.1 - r.0 => Some(b),
            _ => Some(r),
        })
}

/// Sweeps every template and records, per band, the widest parameter region
/// whose median relative bottleneck distance lies inside the band.
pub fn calibrate(
    dataset: &str,
    corpus: &[CalibrationImage],
    templates: &[AugmentationCombo],
    settings: &CalibrationSettings,
) -> Result<CalibrationReport> {
    if settings.grid < 5 {
        return Err(Error::InvalidCalibration(format!(
            "grid of {} points; at least 5 are required",
            settings.grid
        )));
    }
    if settings.samples == 0 {
        return Err(Error::InvalidCalibration("zero samples per grid point".into()));
    }
    for t in templates {
        t.validate()?;
    }
    let measurer = Measurer::new(corpus)?;
    let mut table = CalibrationTable {
        dataset: dataset.to_string(),
        combos: Vec::new(),
        bands: settings.bands,
        unusable: Vec::new(),
    };
    let mut sweeps = Vec::with_capacity(templates.len());
    for (ci, template) in templates.iter().enumerate() {
        let sweep = measurer.sweep(template, settings, ci as u64)?;
        let (min, max) = sweep
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.median), b.max(p.median))
            });
        for band in [Band::Weak, Band::Strong] {
            let (lo, hi) = settings.bands.range(band);
            match widest_run(&sweep.points, lo, hi) {
                Some((a, b)) => {
                    let (sa, sb) = (sweep.points[a].s, sweep.points[b].s);
                    let ops = template
                        .ops
                        .iter()
                        .map(|o| OpTemplate::new(o.kind, o.param_at(sa), o.param_at(sb)))
                        .collect();
                    table.combos.push(CalibratedCombo {
                        ops,
                        band,
                        median_lo: sweep.points[a].median,
                        median_hi: sweep.points[b].median,
                        samples: settings.samples,
                    });
                }
                None => table.unusable.push(UnusableCombo {
                    name: sweep.name.clone(),
                    band,
                    median_min: min,
                    median_max: max,
                }),
            }
        }
        sweeps.push(sweep);
    }
    for band in [Band::Weak, Band::Strong] {
        if table.band(band).next().is_none() {
            let measured = sweeps
                .iter()
                .map(|s| {
                    let (a, b) = s.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| {
                        (acc.0.min(p.median), acc.1.max(p.median))
                    });
                    format!("{}: [{a:.4}, {b:.4}]", s.name)
                })
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Uncalibratable {
                band: band.to_string(),
                measured,
            });
        }
    }
    Ok(CalibrationReport { table, sweeps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub weak: GrayImage,
    pub weak_roi: RoiMask,
    pub strong: GrayImage,
    pub strong_roi: RoiMask,
}

/// Draws one combination uniformly from the band and applies it with freshly
/// sampled intensities.
pub fn sample_view<R: Rng + ?Sized>(
    img: &GrayImage,
    roi: &RoiMask,
    table: &CalibrationTable,
    band: Band,
    rng: &mut R,
) -> Result<(GrayImage, RoiMask)> {
    let choices: Vec<&CalibratedCombo> = table.band(band).collect();
    if choices.is_empty() {
        return Err(Error::EmptyBand(band.to_string()));
    }
    let pick = choices[rng.random_range(0..choices.len())];
    let view = apply_combo_with_roi(img, roi, &pick.combo(), rng)?;
    Ok((view.image, view.roi))
}

/// A topology-weak and a topology-strong view of the same image. No distance
/// is computed here; the calibrated intervals stand in for it.
pub fn sample_view_pair<R: Rng + ?Sized>(
    img: &GrayImage,
    roi: &RoiMask,
    table: &CalibrationTable,
    rng: &mut R,
) -> Result<ViewPair> {
    sample_view_pair_with(img, roi, table, (Band::Weak, Band::Strong), rng)
}

/// Same as [`sample_view_pair`] with arbitrary band assignment, e.g.
/// `(Weak, Weak)` for symmetric pairs.
pub fn sample_view_pair_with<R: Rng + ?Sized>(
    img: &GrayImage,
    roi: &RoiMask,
    table: &CalibrationTable,
    bands: (Band, Band),
    rng: &mut R,
) -> Result<ViewPair> {
    let (weak, weak_roi) = sample_view(img, roi, table, bands.0, rng)?;
    let (strong, strong_roi) = sample_view(img, roi, table, bands.1, rng)?;
    Ok(ViewPair {
        weak,
        weak_roi,
        strong,
        strong_roi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::OpKind;

    fn point(median: f64) -> SweepPoint {
        SweepPoint {
            s: 0.0,
            params: vec![],
            median,
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn widest_run_prefers_longest_then_first() {
        let pts: Vec<_> = [0.0, 0.06, 0.07, 0.2, 0.08, 0.09, 0.1, 0.3]
            .iter()
            .map(|&m| point(m))
            .collect();
        assert_eq!(widest_run(&pts, 0.05, 0.15), Some((4, 6)));
        let pts: Vec<_> = [0.06, 0.2, 0.07].iter().map(|&m| point(m)).collect();
        assert_eq!(widest_run(&pts, 0.05, 0.15), Some((0, 0)));
        assert_eq!(widest_run(&pts, 0.5, 0.6), None);
    }

    #[test]
    fn empty_corpus_and_coarse_grid_fail() {
        let t = vec![AugmentationCombo::new(vec![OpTemplate::fixed(OpKind::Hflip)])];
        let err = calibrate("x", &[], &t, &CalibrationSettings::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
        let coarse = CalibrationSettings {
            grid: 4,
            ..Default::default()
        };
        assert!(matches!(
            calibrate("x", &[], &t, &coarse),
            Err(Error::InvalidCalibration(_))
        ));
    }

    #[test]
    fn sampler_needs_both_bands() {
        let table = CalibrationTable {
            dataset: "t".into(),
            combos: vec![],
            bands: Bands::default(),
            unusable: vec![],
        };
        let img = GrayImage::constant(4, 4, 0.5);
        let err = sample_view_pair(&img, &RoiMask::full(4, 4), &table, &mut stream(0, &[]))
            .unwrap_err();
        assert!(matches!(err, Error::EmptyBand(_)));
    }

    #[test]
    fn table_json_field_names() {
        let table = CalibrationTable {
            dataset: "toy".into(),
            combos: vec![CalibratedCombo {
                ops: vec![OpTemplate::new(OpKind::GaussianNoise, 0.05, 0.1)],
                band: Band::Weak,
                median_lo: 0.06,
                median_hi: 0.14,
                samples: 16,
            }],
            bands: Bands::default(),
            unusable: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        let combo = &v["combos"][0];
        assert_eq!(v["dataset"], "toy");
        assert_eq!(combo["band"], "weak");
        assert_eq!(combo["M"], 16);
        assert_eq!(combo["ops"][0]["kind"], "gaussian_noise");
        assert_eq!(combo["ops"][0]["param_lo"], 0.05);
        assert_eq!(CalibrationTable::from_json(&table.to_json().unwrap()).unwrap(), table);
    }
}
