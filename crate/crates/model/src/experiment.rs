//! Toy comparison runs: one seed trains every requested variant and probes
//! the frozen features of each on a held-out corpus.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use topocl_core::{Band, CalibrationTable};
use topocl_nn::Tensor;

use crate::corpus::{generate_corpus, CorpusConfig, ShapeCorpus};
use crate::error::Result;
use crate::model::{TopoCl, View};
use crate::probe::{linear_probe, ProbeConfig};
use crate::train::{LossRecord, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Weak and strong topology-aware views, full encoder.
    Full,
    /// Two topology-weak views.
    WeakWeak,
    #[serde(rename = "no-self-attn")]
    NoSelfAttention,
    #[serde(rename = "no-cross-attn")]
    NoCrossAttention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WeakWeak => "weak-weak",
            Self::NoSelfAttention => "no-self-attn",
            Self::NoCrossAttention => "no-cross-attn",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::WeakWeak => c.bands = (Band::Weak, Band::Weak),
            Self::NoSelfAttention => c.model.topo.self_attention = false,
            Self::NoCrossAttention => c.model.topo.cross_attention = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    /// Held-out corpus the probe is tested on.
    pub test_corpus: CorpusConfig,
    pub probe: ProbeConfig,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub accuracy: f64,
    pub losses: Vec<LossRecord>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Probe on the raw features of the visually pretrained encoder.
    pub visual_only: f64,
    /// Probe on `t` of the topology encoder after its pretraining stage
    /// (full variant).
    pub topo_only: Option<f64>,
    pub variants: Vec<VariantReport>,
}

impl SeedReport {
    pub fn accuracy(&self, v: Variant) -> Option<f64> {
        self.variants.iter().find(|r| r.variant == v).map(|r| r.accuracy)
    }
}

/// Corpora of an experiment: training images (also the probe's training
/// split) and the held-out test images.
pub struct Data {
    pub train: ShapeCorpus,
    pub test: ShapeCorpus,
}

impl Data {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            train: generate_corpus(&config.corpus)?,
            test: generate_corpus(&config.test_corpus)?,
        })
    }
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

fn probe(train: Tensor, test: Tensor, data: &Data, config: &ProbeConfig) -> Result<f64> {
    Ok(linear_probe(&train, &data.train.labels(), &test, &data.test.labels(), config)?.accuracy)
}

fn probe_visual(model: &TopoCl, data: &Data, config: &ProbeConfig) -> Result<f64> {
    let imgs = |c: &ShapeCorpus| c.samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
    probe(
        model.visual_features(&imgs(&data.train))?,
        model.visual_features(&imgs(&data.test))?,
        data,
        config,
    )
}

fn probe_topo(model: &TopoCl, data: &Data, config: &ProbeConfig) -> Result<f64> {
    let pts = |c: &ShapeCorpus| -> Result<Vec<_>> { views(c).iter().map(|v| Ok(model.select(&v.diagram()?))).collect() };
    probe(
        model.topo_features(&pts(&data.train)?)?,
        model.topo_features(&pts(&data.test)?)?,
        data,
        config,
    )
}

fn probe_fused(model: &TopoCl, data: &Data, config: &ProbeConfig) -> Result<f64> {
    probe(model.embed(&views(&data.train))?, model.embed(&views(&data.test))?, data, config)
}

/// Trains all variants for one seed, sharing the visual stage.
pub fn run_seed(config: &ExperimentConfig, data: &Data, table: &CalibrationTable, seed: u64) -> Result<SeedReport> {
    let base = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let start = Instant::now();
    let mut visual = Trainer::new(&data.train, table, Variant::Full.apply(&base))?;
    visual.run_through(1)?;
    let visual_only = probe_visual(&visual.model, data, &config.probe)?;
    info!("seed {seed}: visual stage {:.1}s, probe {visual_only:.3}", start.elapsed().as_secs_f64());

    let mut topo_only = None;
    let mut variants = Vec::new();
    for &variant in &config.variants {
        let start = Instant::now();
        let mut t = visual.fork_after_visual(variant.apply(&base))?;
        t.run_through(2)?;
        if variant == Variant::Full {
            topo_only = Some(probe_topo(&t.model, data, &config.probe)?);
        }
        t.run()?;
        let accuracy = probe_fused(&t.model, data, &config.probe)?;
        let seconds = start.elapsed().as_secs_f64();
        info!("seed {seed}: {} probe {accuracy:.3} in {seconds:.1}s", variant.name());
        variants.push(VariantReport {
            variant,
            accuracy,
            losses: t.losses().to_vec(),
            seconds,
        });
    }
    Ok(SeedReport {
        seed,
        visual_only,
        topo_only,
        variants,
    })
}
