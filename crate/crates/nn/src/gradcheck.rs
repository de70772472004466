//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative error, turning into absolute
/// error for gradients too small for a ratio to be meaningful.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// A seeded uniform sample of this many scalar coordinates.
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub set: usize,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

/// Compares reverse-mode gradients of `loss` with `(f(x+h) - f(x-h)) / 2h`
/// over the selected coordinates of all `sets`.
pub fn check_gradients<F>(sets: &mut [ParameterSet], coords: Coordinates, h: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[ParameterSet]) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, sets)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<Option<_>>> = sets.iter().map(|s| grads.for_set(s)).collect();

    // flat index over (set, tensor, element)
    let mut all = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        for (ti, (_, t)) in set.iter().enumerate() {
            for e in 0..t.len() {
                all.push((si, ti, e));
            }
        }
    }
    let chosen: Vec<(usize, usize, usize)> = match coords {
        Coordinates::All => all,
        Coordinates::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, all.len(), count.min(all.len()))
                .into_iter()
                .map(|i| all[i])
                .collect()
        }
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (si, ti, e) in chosen {
        let id = sets[si].ids().nth(ti).expect("tensor index");
        let original = sets[si].get(id).data()[e];
        let mut eval = |sets: &mut [ParameterSet], x: f64| -> Result<f64> {
            sets[si].get_mut(id).data_mut()[e] = x;
            let mut g = Graph::new();
            let out = loss(&mut g, sets)?;
            Ok(g.value(out).item())
        };
        let plus = eval(sets, original + h)?;
        let minus = eval(sets, original - h)?;
        sets[si].get_mut(id).data_mut()[e] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[si][ti].as_ref().map_or(0.0, |t| t.data()[e]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(Worst {
                set: si,
                name: sets[si].name(id).to_string(),
                index: e,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
