//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; `1 x n` bias rows are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(set: &ParameterSet, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = set.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, set: &mut ParameterSet, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != set.len() || self.m.len() != set.len() {
            return Err(Error::Invalid(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                set.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, ((_, p), g)) in set.values_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let decay = if p.rows() > 1 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
        Ok(())
    }

    /// Moment buffers as a parameter set, for checkpointing.
    pub fn state(&self) -> Result<(ParameterSet, serde_json::Value)> {
        let mut set = ParameterSet::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            set.add(format!("m.{i}"), m.clone())?;
            set.add(format!("v.{i}"), v.clone())?;
        }
        Ok((set, serde_json::json!({ "step": self.step, "config": self.config })))
    }

    pub fn from_state(state: &ParameterSet, meta: &serde_json::Value) -> Result<Self> {
        let n = state.len() / 2;
        let get = |k: &str| {
            state
                .by_name(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{k}`")))
        };
        let m = (0..n).map(|i| get(&format!("m.{i}"))).collect::<Result<_>>()?;
        let v = (0..n).map(|i| get(&format!("v.{i}"))).collect::<Result<_>>()?;
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks a step count".into()))?;
        let config = serde_json::from_value(meta["config"].clone())?;
        Ok(Self { config, step, m, v })
    }
}

/// Cosine annealing from `base` to `floor` over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total: usize) -> Self {
        Self { base, floor: 0.0, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let t = (step.min(self.total)) as f64 / self.total as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
