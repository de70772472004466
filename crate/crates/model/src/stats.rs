//! Two-sided paired t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TTest {
    Test { t: f64, p: f64, dof: usize, mean_diff: f64 },
    /// Every difference is identical, so the statistic is undefined.
    Degenerate { mean_diff: f64 },
}

impl TTest {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            Self::Test { p, .. } => Some(*p),
            Self::Degenerate { .. } => None,
        }
    }
}

/// Two-sided p-value of a Student t statistic with `dof` degrees of freedom:
/// `I_{dof / (dof + t^2)}(dof / 2, 1 / 2)`.
pub fn student_t_two_sided(t: f64, dof: usize) -> f64 {
    let v = dof as f64;
    beta_reg(v / 2.0, 0.5, v / (v + t * t))
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!("{} versus {} scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("a paired t-test needs at least two runs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite score".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(TTest::Degenerate { mean_diff: mean });
    }
    let t = mean / (var / n).sqrt();
    let dof = a.len() - 1;
    Ok(TTest::Test {
        t,
        p: student_t_two_sided(t, dof),
        dof,
        mean_diff: mean,
    })
}
