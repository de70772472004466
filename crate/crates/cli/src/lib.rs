//! The `topocl` command line: diagrams, distances, calibration, augmentation,
//! encoding and the toy training and evaluation runs.
//!
//! `--out` is global. Commands with a single result treat it as a file path
//! and print to stdout when it is absent; `gen-corpus`, `train-toy` and
//! `probe` treat it as a directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use topocl_core::augment::{apply_combo_with_roi, AugmentationCombo};
use topocl_core::calibrate::{calibrate, sample_view, CalibrationImage, CalibrationSettings};
use topocl_core::image::{load_image_auto, save_image};
use topocl_core::metrics::relative_bottleneck_pd;
use topocl_core::roi::{extract_roi, RoiMethod};
use topocl_core::rng::stream;
use topocl_core::{restrict_and_compute, Band, CalibrationTable, GrayImage, ImageFormat, PersistenceDiagram, RoiMask};
use topocl_model::experiment::{run_seed, Data, ExperimentConfig, SeedReport, Variant};
use topocl_model::train::losses_to_csv;
use topocl_model::{
    generate_corpus, linear_probe, paired_ttest, toy_calibration_table, CorpusConfig, ProbeConfig, ShapeClass,
    ShapeCorpus, TTest, TopoCl, TrainConfig, Trainer, View,
};

#[derive(Debug, Parser)]
#[command(name = "topocl", version, about = "Topology-aware contrastive learning toolkit")]
pub struct Cli {
    /// Seed of every random draw the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration (see `ToyConfig`); missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file, or directory for commands writing several files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Persistence diagram of an image as `dim,birth,death` CSV.
    Pd {
        #[arg(long)]
        img: PathBuf,
        #[command(flatten)]
        roi: RoiArgs,
    },
    /// Relative bottleneck distance of `b` from the reference `a`. Inputs
    /// are diagram CSV files or images.
    Dist {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        roi: RoiArgs,
    },
    /// Sweeps augmentation templates over a corpus directory and writes the
    /// calibration table.
    Calibrate {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON array of combinations, each `{"ops":[{kind,param_lo,param_hi}]}`.
        #[arg(long)]
        combos: PathBuf,
        #[arg(long, default_value_t = 11)]
        grid: usize,
        #[arg(long, default_value_t = 24)]
        samples: usize,
        /// Dataset name stored in the table; defaults to the directory name.
        #[arg(long)]
        dataset: Option<String>,
        /// Also write the full sweeps as JSON.
        #[arg(long)]
        sweeps: Option<PathBuf>,
    },
    /// Augments one image, either with a fixed combination or with a
    /// combination drawn from a calibration band.
    Augment {
        #[arg(long)]
        img: PathBuf,
        /// Combination as a JSON file or inline JSON.
        #[arg(long, conflicts_with = "band")]
        combo: Option<String>,
        #[arg(long, value_enum)]
        band: Option<BandArg>,
        /// Calibration table for `--band`; the shipped toy table by default.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        roi: RoiArgs,
    },
    /// Topological feature vector `t` of a diagram.
    Encode {
        #[arg(long)]
        pd: PathBuf,
        /// `topo.bin` group checkpoint, or a bundle directory.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Final embedding `z` of an image under a checkpoint bundle.
    Embed {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Binary ROI mask; Otsu thresholding when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Writes the synthetic shape corpus as PGM images, masks and labels.
    GenCorpus {
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Runs the three training stages and writes the loss curve and bundle.
    TrainToy {
        /// Calibration table; the shipped toy table by default.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Linear probe of a bundle, or the toy comparison of training variants.
    Probe {
        #[arg(long, required_unless_present = "compare")]
        ckpt: Option<PathBuf>,
        /// Train and compare every configured variant.
        #[arg(long)]
        compare: bool,
        /// Seeds of the comparison, starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Two-sided paired t-test of two score lists.
    Ttest {
        /// Comma-separated scores.
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BandArg {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Args)]
pub struct RoiArgs {
    /// Binary ROI mask (PGM or PNG, bright = inside).
    #[arg(long, conflicts_with = "otsu")]
    pub mask: Option<PathBuf>,
    /// Restrict to the largest Otsu foreground component; the whole image
    /// otherwise.
    #[arg(long)]
    pub otsu: bool,
}

impl RoiArgs {
    fn resolve(&self, img: &GrayImage) -> Result<RoiMask> {
        let method = match (&self.mask, self.otsu) {
            (Some(p), _) => RoiMethod::ExternalMask(p.clone()),
            (None, true) => RoiMethod::OtsuLargestComponent,
            (None, false) => return Ok(RoiMask::full(img.height(), img.width())),
        };
        Ok(extract_roi(img, &method)?.mask)
    }
}

/// Configuration shared by `gen-corpus`, `train-toy` and `probe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub test_corpus: CorpusConfig,
    pub probe: ProbeConfig,
    pub variants: Vec<Variant>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            test_corpus: CorpusConfig {
                seed: 1,
                ..CorpusConfig::default()
            },
            probe: ProbeConfig::default(),
            variants: vec![
                Variant::Full,
                Variant::WeakWeak,
                Variant::NoSelfAttention,
                Variant::NoCrossAttention,
            ],
        }
    }
}

impl ToyConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            corpus: self.corpus.clone(),
            test_corpus: self.test_corpus.clone(),
            probe: self.probe,
            variants: self.variants.clone(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ToyConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ToyConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_table(path: Option<&Path>) -> Result<CalibrationTable> {
    Ok(match path {
        Some(p) => CalibrationTable::load(p)?,
        None => toy_calibration_table()?,
    })
}

fn read_diagram(path: &Path, roi: &RoiArgs) -> Result<PersistenceDiagram> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(PersistenceDiagram::from_csv(&text)?);
    }
    let img = load_image_auto(path)?;
    Ok(restrict_and_compute(&img, &roi.resolve(&img)?)?)
}

/// One comma-separated line of full-precision values.
fn vector_csv(values: &[f64]) -> String {
    let mut line = values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

fn image_format(path: &Path) -> ImageFormat {
    ImageFormat::from_extension(path).unwrap_or(ImageFormat::PgmBinary)
}

/// Writes `<class>_<index>.pgm`, `<class>_<index>_mask.pgm` and `labels.csv`.
pub fn write_corpus(dir: &Path, corpus: &ShapeCorpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("file,label,class\n");
    let mut counts = [0usize; 3];
    for s in &corpus.samples {
        let i = &mut counts[s.label()];
        let name = format!("{}_{:04}", s.class.name(), i);
        *i += 1;
        save_image(&s.image, dir.join(format!("{name}.pgm")), ImageFormat::PgmBinary)?;
        save_image(&s.roi.to_image(), dir.join(format!("{name}_mask.pgm")), ImageFormat::PgmBinary)?;
        let _ = writeln!(labels, "{name}.pgm,{},{}", s.label(), s.class.name());
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

/// Images of a corpus directory in name order. A `<name>_mask.*` sibling
/// supplies the ROI; otherwise the largest Otsu component is used.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<CalibrationImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| Ok(e?.path()))
        .collect::<Result<_>>()?;
    paths.retain(|p| {
        ImageFormat::from_extension(p).is_some()
            && !p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with("_mask"))
    });
    paths.sort();
    ensure!(!paths.is_empty(), "no PGM or PNG images in {}", dir.display());
    paths
        .iter()
        .map(|p| {
            let image = load_image_auto(p)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let ext = p.extension().and_then(|s| s.to_str()).unwrap_or_default();
            let mask = p.with_file_name(format!("{stem}_mask.{ext}"));
            let method = if mask.exists() {
                RoiMethod::ExternalMask(mask)
            } else {
                RoiMethod::OtsuLargestComponent
            };
            let roi = extract_roi(&image, &method)?.mask;
            Ok(CalibrationImage { image, roi })
        })
        .collect()
}

fn parse_combo(arg: &str) -> Result<AugmentationCombo> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg)?
    } else {
        arg.to_string()
    };
    let combo: AugmentationCombo = serde_json::from_str(&text).context("parsing the combination")?;
    combo.validate()?;
    Ok(combo)
}

#[derive(Debug, Serialize)]
struct AugmentReport {
    combo: String,
    params: serde_json::Value,
    rel_bottleneck: f64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub runs: Vec<f64>,
}

impl Summary {
    fn new(runs: Vec<f64>) -> Self {
        let mean = runs.iter().sum::<f64>() / runs.len().max(1) as f64;
        Self { mean, runs }
    }
}

#[derive(Debug, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Serialize)]
pub struct ComparisonReport {
    pub visual_only: Summary,
    pub topo_only: Summary,
    pub variants: Vec<VariantSummary>,
    /// Full pipeline against visual-only pretraining.
    pub ttest_full_vs_visual: Option<TTest>,
    pub seeds: Vec<SeedReport>,
}

/// Trains every configured variant for each seed and summarizes the probes.
pub fn compare(config: &ExperimentConfig, table: &CalibrationTable, seeds: impl IntoIterator<Item = u64>) -> Result<ComparisonReport> {
    let data = Data::generate(config)?;
    let reports = seeds
        .into_iter()
        .map(|s| run_seed(config, &data, table, s))
        .collect::<topocl_model::Result<Vec<_>>>()?;
    let visual: Vec<f64> = reports.iter().map(|r| r.visual_only).collect();
    let variants = config
        .variants
        .iter()
        .map(|&v| VariantSummary {
            variant: v,
            summary: Summary::new(reports.iter().filter_map(|r| r.accuracy(v)).collect()),
        })
        .collect();
    let full: Vec<f64> = reports.iter().filter_map(|r| r.accuracy(Variant::Full)).collect();
    let ttest = if full.len() == visual.len() && full.len() >= 2 {
        Some(paired_ttest(&full, &visual)?)
    } else {
        None
    };
    Ok(ComparisonReport {
        visual_only: Summary::new(visual),
        topo_only: Summary::new(reports.iter().filter_map(|r| r.topo_only).collect()),
        variants,
        ttest_full_vs_visual: ttest,
        seeds: reports,
    })
}

fn views(corpus: &ShapeCorpus) -> Vec<View> {
    corpus
        .samples
        .iter()
        .map(|s| View {
            image: s.image.clone(),
            roi: s.roi.clone(),
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Pd { img, roi } => {
            let image = load_image_auto(img)?;
            let pd = restrict_and_compute(&image, &roi.resolve(&image)?)?;
            emit(out, &pd.to_csv())
        }
        Command::Dist { a, b, roi } => {
            let (a, b) = (read_diagram(a, roi)?, read_diagram(b, roi)?);
            emit(out, &relative_bottleneck_pd(&a, &b).to_csv())
        }
        Command::Calibrate {
            corpus,
            combos,
            grid,
            samples,
            dataset,
            sweeps,
        } => {
            let images = read_corpus_dir(corpus)?;
            let text = fs::read_to_string(combos).with_context(|| format!("reading {}", combos.display()))?;
            let templates: Vec<AugmentationCombo> = serde_json::from_str(&text).context("parsing the combinations")?;
            let settings = CalibrationSettings {
                grid: *grid,
                samples: *samples,
                seed,
                ..Default::default()
            };
            let name = dataset.clone().unwrap_or_else(|| {
                corpus
                    .file_name()
                    .map_or("corpus".into(), |n| n.to_string_lossy().into_owned())
            });
            info!("calibrating {} templates on {} images", templates.len(), images.len());
            let report = calibrate(&name, &images, &templates, &settings)?;
            for u in &report.table.unusable {
                log::warn!("{} has no {} interval (medians {:.3}..{:.3})", u.name, u.band, u.median_min, u.median_max);
            }
            if let Some(p) = sweeps {
                fs::write(p, serde_json::to_string_pretty(&report.sweeps)?)?;
            }
            emit(out, &report.table.to_json()?)
        }
        Command::Augment {
            img,
            combo,
            band,
            table,
            roi,
        } => {
            let Some(out) = out else {
                bail!("augment needs --out for the augmented image");
            };
            let image = load_image_auto(img)?;
            let roi = roi.resolve(&image)?;
            let mut rng = stream(seed, &[0xa0]);
            let (view, roi_out, name, params) = match (combo, band) {
                (Some(c), _) => {
                    let combo = parse_combo(c)?;
                    let v = apply_combo_with_roi(&image, &roi, &combo, &mut rng)?;
                    (v.image, v.roi, combo.name(), serde_json::to_value(&v.params)?)
                }
                (None, Some(b)) => {
                    let band = match b {
                        BandArg::Weak => Band::Weak,
                        BandArg::Strong => Band::Strong,
                    };
                    let table = load_table(table.as_deref())?;
                    let (v, r) = sample_view(&image, &roi, &table, band, &mut rng)?;
                    (v, r, format!("{band} band"), serde_json::Value::Null)
                }
                (None, None) => bail!("augment needs --combo or --band"),
            };
            let before = restrict_and_compute(&image, &roi)?;
            let after = restrict_and_compute(&view, &roi_out)?;
            save_image(&view, out, image_format(out))?;
            let report = AugmentReport {
                combo: name,
                params,
                rel_bottleneck: relative_bottleneck_pd(&before, &after).value(),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Encode { pd, ckpt } => {
            let text = fs::read_to_string(pd).with_context(|| format!("reading {}", pd.display()))?;
            let diagram = PersistenceDiagram::from_csv(&text)?;
            let model = if ckpt.is_dir() {
                TopoCl::load(ckpt)?.0
            } else {
                TopoCl::load_topo_group(ckpt)?
            };
            let t = model.topo.encode_diagram(&model.topo_set, &diagram)?;
            emit(out, &vector_csv(t.data()))
        }
        Command::Embed { img, ckpt, mask } => {
            let (model, _) = TopoCl::load(ckpt)?;
            let image = load_image_auto(img)?;
            let method = mask
                .clone()
                .map_or(RoiMethod::OtsuLargestComponent, RoiMethod::ExternalMask);
            let z = model.infer_single(&image, &method)?;
            emit(out, &vector_csv(z.data()))
        }
        Command::GenCorpus { n_per_class } => {
            let mut config = load_config(&cli)?.corpus;
            if let Some(n) = n_per_class {
                config.n_per_class = *n;
            }
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let corpus = generate_corpus(&config)?;
            let dir = out_dir(out)?;
            write_corpus(&dir, &corpus)?;
            info!("wrote {} images to {}", corpus.len(), dir.display());
            Ok(())
        }
        Command::TrainToy { table } => {
            let config = load_config(&cli)?;
            let table = load_table(table.as_deref())?;
            let corpus = generate_corpus(&config.corpus)?;
            let dir = out_dir(out)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
            let mut trainer = Trainer::new(&corpus, &table, config.train.clone())?;
            trainer.run()?;
            trainer.save(&dir.join("ckpt"))?;
            fs::write(dir.join("losses.csv"), losses_to_csv(trainer.losses()))?;
            info!("wrote the loss curve and bundle to {}", dir.display());
            Ok(())
        }
        Command::Probe {
            ckpt,
            compare: comparing,
            seeds,
            table,
        } => {
            let config = load_config(&cli)?;
            let dir = out_dir(out)?;
            let json = if *comparing {
                let table = load_table(table.as_deref())?;
                let first = config.train.seed;
                let report = compare(&config.experiment(), &table, first..first + seeds)?;
                serde_json::to_string_pretty(&report)?
            } else {
                let ckpt = ckpt.as_ref().expect("clap requires --ckpt");
                let (model, _) = TopoCl::load(ckpt)?;
                let (train, test) = (generate_corpus(&config.corpus)?, generate_corpus(&config.test_corpus)?);
                let result = linear_probe(
                    &model.embed(&views(&train))?,
                    &train.labels(),
                    &model.embed(&views(&test))?,
                    &test.labels(),
                    &config.probe,
                )?;
                let classes: Vec<&str> = ShapeClass::ALL.iter().map(|c| c.name()).collect();
                serde_json::to_string_pretty(&serde_json::json!({"classes": classes, "result": result}))?
            };
            fs::write(dir.join("probe.json"), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::Ttest { a, b } => {
            let result = paired_ttest(a, b)?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&result)?))
        }
    }
}
