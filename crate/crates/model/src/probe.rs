//! Linear probing of frozen features with multinomial logistic regression.

use serde::{Deserialize, Serialize};
use topocl_nn::{Graph, Init, Linear, ParameterSet, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Per-seed accuracies when several runs are aggregated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<f64>,
}

/// Per-column mean and population deviation of the training features.
fn column_stats(x: &Tensor) -> Vec<(f64, f64)> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|c| {
            let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = (0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

fn standardize(x: &Tensor, stats: &[(f64, f64)]) -> Tensor {
    Tensor::from_fn(x.rows(), x.cols(), |r, c| {
        let (m, s) = stats[c];
        if s > 1e-12 {
            (x.get(r, c) - m) / s
        } else {
            0.0
        }
    })
}

/// Trains a zero-initialized softmax classifier on standardized training
/// features with full-batch gradient descent and reports test accuracy.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::ShapeContract("probe features and labels disagree".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |&m| m + 1);
    let mut present = vec![false; classes];
    train_y.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClass);
    }
    let stats = column_stats(train_x);
    let xtr = standardize(train_x, &stats);
    let xte = standardize(test_x, &stats);

    let mut set = ParameterSet::new();
    let mut rng = topocl_core::rng::stream(0, &[]);
    let layer = Linear::new(&mut set, "probe", xtr.cols(), classes, Init::Zeros, true, &mut rng)?;
    let ids: Vec<_> = set.ids().collect();
    let n = xtr.rows() as f64;
    for _ in 0..config.epochs {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let logits = layer.forward(&mut g, &set, x)?;
        let lse = g.logsumexp_rows(logits, None)?;
        let picked = g.pick(logits, train_y.iter().enumerate().map(|(i, &y)| (i, y)).collect())?;
        let a = g.sum(lse);
        let b = g.sum(picked);
        let diff = g.sub(a, b)?;
        let loss = g.scale(diff, 1.0 / n);
        let grads = g.backward(loss)?;
        for &id in &ids {
            if let Some(grad) = grads.param(id) {
                let mut step = grad.clone();
                step.scale_assign(-config.lr);
                set.get_mut(id).add_assign(&step);
            }
        }
    }

    let w = set.get(layer.weight);
    let mut logits = xte.matmul(w)?;
    if let Some(b) = layer.bias {
        let b = set.get(b);
        for r in 0..logits.rows() {
            logits.row_mut(r).iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
    }
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (r, &y) in test_y.iter().enumerate() {
        let row = logits.row(r);
        // first maximum wins
        let pred = (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        total[y] += 1;
        if pred == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(ProbeResult {
        accuracy: hits as f64 / test_y.len().max(1) as f64,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { f64::NAN } else { c as f64 / t as f64 })
            .collect(),
        runs: vec![],
    })
}
