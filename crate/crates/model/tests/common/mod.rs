#![allow(dead_code)]

use rand::Rng;
use topocl_core::{PersistenceDiagram, PersistencePair};
use topocl_nn::ParameterSet;

pub fn rng(seed: u64) -> topocl_core::rng::StreamRng {
    topocl_core::rng::stream(seed, &[0x7e57])
}

pub fn random_pairs<R: Rng>(n: usize, rng: &mut R) -> Vec<PersistencePair> {
    (0..n)
        .map(|_| {
            let b: f64 = rng.random_range(0.0..0.8);
            PersistencePair::new(b, rng.random_range(b + 1e-3..1.0))
        })
        .collect()
}

/// One essential H0 class plus `n0 - 1` finite H0 pairs and `n1` H1 pairs.
pub fn random_diagram<R: Rng>(n0: usize, n1: usize, rng: &mut R) -> PersistenceDiagram {
    let mut dim0 = vec![PersistencePair::essential(rng.random_range(0.0..0.2))];
    dim0.extend(random_pairs(n0.saturating_sub(1), rng));
    PersistenceDiagram {
        dim0,
        dim1: random_pairs(n1, rng),
        ..Default::default()
    }
}

/// Moves every parameter (biases included) off its initial value.
pub fn jitter<R: Rng>(set: &mut ParameterSet, scale: f64, rng: &mut R) {
    for (_, t) in set.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

pub fn zero_param(set: &mut ParameterSet, id: topocl_nn::ParamId) {
    set.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Adapts a model result for closures that must return the autodiff error.
pub fn nn<T>(r: topocl_model::Result<T>) -> topocl_nn::Result<T> {
    r.map_err(|e| topocl_nn::Error::Invalid(e.to_string()))
}
