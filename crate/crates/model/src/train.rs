//! Three-stage contrastive training: visual pretraining on appearance
//! augmentations, topology-encoder pretraining on calibrated view pairs, and
//! joint fine-tuning of both encoders with the fusion module.
//!
//! Every random draw comes from a stream keyed by (seed, stage, epoch, ...),
//! so an epoch gives the same result whether the run was resumed or not.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use topocl_core::augment::visual::VisualAugment;
use topocl_core::calibrate::sample_view_pair_with;
use topocl_core::rng::stream;
use topocl_core::{restrict_and_compute, Band, CalibrationTable, GrayImage};
use topocl_nn::{AdamW, AdamWConfig, CosineSchedule, Graph, ParameterSet};

use crate::config::ModelConfig;
use crate::corpus::ShapeCorpus;
use crate::error::{Error, Result};
use crate::loss::ContrastiveLoss;
use crate::model::TopoCl;
use crate::topo::SelectedPoints;

const TAG_SHUFFLE: u64 = 0x5_0001;
const TAG_VIEWS: u64 = 0x5_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Epochs of the visual, topology and joint stages.
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: ContrastiveLoss,
    /// Bands of the two topology-aware views.
    pub bands: (Band, Band),
    /// Keep both encoders fixed during the joint stage.
    pub freeze_encoders: bool,
    /// Run the two single-encoder stages; when false the joint stage starts
    /// from randomly initialized encoders.
    pub pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            epochs: [30, 30, 30],
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.01,
            loss: ContrastiveLoss::default(),
            bands: (Band::Weak, Band::Strong),
            freeze_encoders: false,
            pretrain: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
}

pub fn losses_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("stage,epoch,loss\n");
    for r in records {
        let _ = writeln!(out, "{},{},{:e}", r.stage, r.epoch, r.loss);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    stage: u8,
    epoch: usize,
    losses: Vec<LossRecord>,
    optimizers: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    corpus: &'a ShapeCorpus,
    table: &'a CalibrationTable,
    config: TrainConfig,
    pub model: TopoCl,
    /// Current stage (1..=3), or 4 when finished.
    stage: u8,
    /// Next epoch within the current stage.
    epoch: usize,
    optimizers: Vec<AdamW>,
    losses: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a ShapeCorpus, table: &'a CalibrationTable, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.len() < 2 {
            return Err(Error::BatchTooSmall(corpus.len()));
        }
        let model = TopoCl::new(&config.model, config.seed)?;
        let mut t = Self {
            corpus,
            table,
            stage: if config.pretrain { 1 } else { 3 },
            config,
            model,
            epoch: 0,
            optimizers: Vec::new(),
            losses: Vec::new(),
        };
        t.skip_empty_stages();
        Ok(t)
    }

    /// A trainer for `config` that reuses this trainer's finished visual
    /// stage. The visual stage depends only on the seed and the visual
    /// settings, so forking equals training `config` from scratch when those
    /// agree.
    pub fn fork_after_visual(&self, config: TrainConfig) -> Result<Trainer<'a>> {
        if self.stage < 2 {
            return Err(Error::Config("visual stage has not finished".into()));
        }
        if config.seed != self.config.seed
            || config.model.visual != self.config.model.visual
            || config.model.head != self.config.model.head
            || config.epochs[0] != self.config.epochs[0]
            || config.batch_size != self.config.batch_size
            || config.lr != self.config.lr
            || config.loss != self.config.loss
            || !config.pretrain
        {
            return Err(Error::Config("fork changes the visual stage".into()));
        }
        let mut t = Trainer::new(self.corpus, self.table, config)?;
        t.model.visual_set.copy_values_from(&self.model.visual_set)?;
        t.losses = self.losses.iter().filter(|r| r.stage == 1).copied().collect();
        t.stage = 2;
        t.epoch = 0;
        t.skip_empty_stages();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn is_done(&self) -> bool {
        self.stage > 3
    }

    fn skip_empty_stages(&mut self) {
        while self.stage <= 3 && self.epoch >= self.config.epochs[self.stage as usize - 1] {
            self.stage += 1;
            self.epoch = 0;
            self.optimizers.clear();
        }
    }

    fn batches_per_epoch(&self) -> usize {
        (self.corpus.len() / self.config.batch_size).max(1)
    }

    fn trained_sets(&mut self) -> Vec<&mut ParameterSet> {
        let m = &mut self.model;
        match self.stage {
            1 => vec![&mut m.visual_set],
            2 => vec![&mut m.topo_set],
            _ => vec![&mut m.visual_set, &mut m.topo_set, &mut m.fusion_set],
        }
    }

    fn ensure_optimizers(&mut self) {
        if !self.optimizers.is_empty() {
            return;
        }
        let cfg = AdamWConfig {
            weight_decay: self.config.weight_decay,
            ..AdamWConfig::default()
        };
        let optimizers = self.trained_sets().iter().map(|s| AdamW::new(s, cfg)).collect();
        self.optimizers = optimizers;
    }

    /// Runs the remaining epochs of all stages.
    pub fn run(&mut self) -> Result<()> {
        while self.step_epoch()?.is_some() {}
        Ok(())
    }

    /// Runs until `stage` has finished.
    pub fn run_through(&mut self, stage: u8) -> Result<()> {
        while self.stage <= stage && self.step_epoch()?.is_some() {}
        Ok(())
    }

    /// One epoch of the current stage; `None` when training is complete.
    pub fn step_epoch(&mut self) -> Result<Option<LossRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        self.ensure_optimizers();
        let stage = self.stage;
        let epoch = self.epoch;
        let per_epoch = self.batches_per_epoch();
        let schedule = CosineSchedule::new(self.config.lr, per_epoch * self.config.epochs[stage as usize - 1]);
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut stream(self.config.seed, &[TAG_SHUFFLE, stage as u64, epoch as u64]));
        let bs = self.config.batch_size.min(self.corpus.len());
        let mut total = 0.0;
        let mut counted = 0;
        for b in 0..per_epoch {
            let batch = &order[b * bs..(b + 1) * bs];
            let lr = schedule.lr(epoch * per_epoch + b);
            if let Some(loss) = self.train_step(batch, lr)? {
                total += loss;
                counted += 1;
            }
        }
        let record = LossRecord {
            stage,
            epoch,
            loss: if counted > 0 { total / counted as f64 } else { f64::NAN },
        };
        info!("stage {stage} epoch {epoch}: loss {:.6}", record.loss);
        self.losses.push(record);
        self.epoch += 1;
        self.skip_empty_stages();
        Ok(Some(record))
    }

    /// Augmented inputs of one image at the current stage and epoch.
    fn views(&self, index: usize) -> Result<(GrayImage, GrayImage, Option<(SelectedPoints, SelectedPoints)>)> {
        let sample = &self.corpus.samples[index];
        let mut rng = stream(
            self.config.seed,
            &[TAG_VIEWS, self.stage as u64, self.epoch as u64, index as u64],
        );
        if self.stage == 1 {
            let aug = VisualAugment::strong();
            let a = aug.apply(&sample.image, &mut rng);
            let b = aug.apply(&sample.image, &mut rng);
            return Ok((a, b, None));
        }
        let pair = sample_view_pair_with(&sample.image, &sample.roi, self.table, self.config.bands, &mut rng)?;
        let pw = self.model.select(&restrict_and_compute(&pair.weak, &pair.weak_roi)?);
        let ps = self.model.select(&restrict_and_compute(&pair.strong, &pair.strong_roi)?);
        Ok((pair.weak, pair.strong, Some((pw, ps))))
    }

    /// Loss of a batch at the current parameters, without updating them.
    pub fn batch_loss(&self, batch: &[usize]) -> Result<Option<f64>> {
        let mut g = Graph::new();
        Ok(self.build_loss(&mut g, batch)?.map(|l| g.value(l).item()))
    }

    /// Loss of a batch and its gradients at the current parameters.
    pub fn batch_gradients(&self, batch: &[usize]) -> Result<Option<(f64, topocl_nn::Gradients)>> {
        let mut g = Graph::new();
        let Some(loss) = self.build_loss(&mut g, batch)? else {
            return Ok(None);
        };
        Ok(Some((g.value(loss).item(), g.backward(loss)?)))
    }

    fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<Option<topocl_nn::Var>> {
        let n = batch.len();
        let mut images = vec![None; 2 * n];
        let mut points = vec![None; 2 * n];
        for (i, &idx) in batch.iter().enumerate() {
            let (a, b, pts) = self.views(idx)?;
            images[i] = Some(a);
            images[n + i] = Some(b);
            if let Some((pa, pb)) = pts {
                points[i] = Some(pa);
                points[n + i] = Some(pb);
            }
        }
        let images: Vec<GrayImage> = images.into_iter().flatten().collect();
        let points: Vec<SelectedPoints> = points.into_iter().flatten().collect();
        let m = &self.model;
        let z = match self.stage {
            1 => {
                let v = m.forward_visual(g, &images)?;
                m.visual_head.forward(g, &m.visual_set, v)?
            }
            2 => {
                if points.iter().all(SelectedPoints::is_all_padding) {
                    warn!("skipping a batch whose diagrams are all empty");
                    return Ok(None);
                }
                let t = m.forward_topo(g, &points)?;
                m.topo_head.forward(g, &m.topo_set, t)?
            }
            _ => m.forward_fused(g, &images, &points)?.z,
        };
        let zw = g.slice_rows(z, 0..n)?;
        let zs = g.slice_rows(z, n..2 * n)?;
        Ok(Some(self.config.loss.apply(g, zw, zs)?))
    }

    /// One optimizer update of the current stage on `batch`; returns the
    /// loss before the update, or `None` for a skipped batch.
    pub fn train_batch(&mut self, batch: &[usize], lr: f64) -> Result<Option<f64>> {
        self.ensure_optimizers();
        self.train_step(batch, lr)
    }

    fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<Option<f64>> {
        let frozen = self.stage == 3 && self.config.freeze_encoders;
        self.model.visual_set.set_frozen(frozen);
        self.model.topo_set.set_frozen(frozen);
        let mut g = Graph::new();
        let Some(loss) = self.build_loss(&mut g, batch)? else {
            return Ok(None);
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at stage {}", self.stage)));
        }
        let grads = g.backward(loss)?;
        let mut optimizers = std::mem::take(&mut self.optimizers);
        for (set, opt) in self.trained_sets().into_iter().zip(&mut optimizers) {
            if set.is_frozen() {
                continue;
            }
            opt.step(set, &grads.for_set(set), lr)?;
        }
        self.optimizers = optimizers;
        Ok(Some(value))
    }

    /// Writes the model bundle plus optimizer moments and progress.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir, serde_json::json!({"seed": self.config.seed}))?;
        for (i, opt) in self.optimizers.iter().enumerate() {
            let (state, meta) = opt.state()?;
            state.save(&dir.join(format!("optim{i}.bin")), meta)?;
        }
        let state = TrainState {
            config: self.config.clone(),
            stage: self.stage,
            epoch: self.epoch,
            losses: self.losses.clone(),
            optimizers: self.optimizers.len(),
        };
        let path = dir.join("train_state.json");
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("losses.csv");
        fs::write(&path, losses_to_csv(&self.losses)).map_err(|e| Error::io(&path, e))
    }

    pub fn resume(dir: &Path, corpus: &'a ShapeCorpus, table: &'a CalibrationTable) -> Result<Self> {
        let path = dir.join("train_state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        let (model, _) = TopoCl::load(dir)?;
        if model.config != state.config.model {
            return Err(Error::Checkpoint("bundle and training state disagree on the model".into()));
        }
        let optimizers = (0..state.optimizers)
            .map(|i| {
                let (s, meta) = ParameterSet::load(&dir.join(format!("optim{i}.bin")))?;
                Ok(AdamW::from_state(&s, &meta)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            corpus,
            table,
            config: state.config,
            model,
            stage: state.stage,
            epoch: state.epoch,
            optimizers,
            losses: state.losses,
        })
    }
}
