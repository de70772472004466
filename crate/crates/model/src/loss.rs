//! Contrastive objectives over paired view embeddings.

use serde::{Deserialize, Serialize};
use topocl_nn::{Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContrastiveLoss {
    NtXent { temperature: f64 },
    Barlow { lambda: f64 },
}

impl Default for ContrastiveLoss {
    fn default() -> Self {
        Self::NtXent { temperature: 0.2 }
    }
}

impl ContrastiveLoss {
    pub fn apply(&self, g: &mut Graph, zw: Var, zs: Var) -> Result<Var> {
        match *self {
            Self::NtXent { temperature } => nt_xent(g, zw, zs, temperature),
            Self::Barlow { lambda } => barlow(g, zw, zs, lambda),
        }
    }
}

fn check_pair(g: &Graph, zw: Var, zs: Var) -> Result<usize> {
    let (a, b) = (g.shape(zw), g.shape(zs));
    if a != b {
        return Err(topocl_nn::Error::Shape {
            op: "contrastive pair",
            left: a,
            right: b,
        }
        .into());
    }
    if a.0 < 2 {
        return Err(Error::BatchTooSmall(a.0));
    }
    Ok(a.0)
}

/// Normalized-temperature cross-entropy. Rows `i` of `zw` and `zs` are
/// positives; every other row of the `2N` stacked embeddings is a negative.
/// Returns the mean over all `2N` anchors.
pub fn nt_xent(g: &mut Graph, zw: Var, zs: Var, temperature: f64) -> Result<Var> {
    let n = check_pair(g, zw, zs)?;
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let z = g.concat_rows(&[zw, zs])?;
    let z = g.normalize_rows(z);
    let zt = g.transpose(z);
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let m = 2 * n;
    let exclude: Vec<bool> = (0..m * m).map(|k| k / m == k % m).collect();
    let lse = g.logsumexp_rows(logits, Some(exclude))?;
    let positives = g.pick(logits, (0..m).map(|i| (i, (i + n) % m)).collect())?;
    let total = g.sum(lse);
    let pos = g.sum(positives);
    let diff = g.sub(total, pos)?;
    Ok(g.scale(diff, 1.0 / m as f64))
}

/// Redundancy reduction: both views are standardized per feature (population
/// deviation plus 1e-8), `C = zw^T zs / N`, and the loss is
/// `sum_i (C_ii - 1)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow(g: &mut Graph, zw: Var, zs: Var, lambda: f64) -> Result<Var> {
    let n = check_pair(g, zw, zs)?;
    let d = g.shape(zw).1;
    let a = g.standardize_cols(zw, 1e-8);
    let b = g.standardize_cols(zs, 1e-8);
    let at = g.transpose(a);
    let c = g.matmul(at, b)?;
    let c = g.scale(c, 1.0 / n as f64);
    let eye = g.constant(Tensor::identity(d));
    let diff = g.sub(c, eye)?;
    let sq = g.mul(diff, diff)?;
    let weights = g.constant(Tensor::from_fn(d, d, |i, j| if i == j { 1.0 } else { lambda }));
    let weighted = g.mul(sq, weights)?;
    Ok(g.sum(weighted))
}
