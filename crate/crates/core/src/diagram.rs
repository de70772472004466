//! Persistence diagrams and their CSV serialization.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Death value given to classes that never die in the filtration.
pub const ESSENTIAL_DEATH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    /// True for classes alive at the end of the filtration (death capped).
    #[serde(default)]
    pub essential: bool,
}

impl PersistencePair {
    pub fn new(birth: f64, death: f64) -> Self {
        Self {
            birth,
            death,
            essential: false,
        }
    }

    pub fn essential(birth: f64) -> Self {
        Self {
            birth,
            death: ESSENTIAL_DEATH,
            essential: true,
        }
    }

    #[inline]
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    /// Total order on `(birth, death)`, used for canonical sorting.
    pub fn cmp_coords(&self, other: &Self) -> Ordering {
        self.birth
            .total_cmp(&other.birth)
            .then(self.death.total_cmp(&other.death))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub dim0: Vec<PersistencePair>,
    pub dim1: Vec<PersistencePair>,
    pub essential_death: f64,
}

impl Default for PersistenceDiagram {
    fn default() -> Self {
        Self {
            dim0: Vec::new(),
            dim1: Vec::new(),
            essential_death: ESSENTIAL_DEATH,
        }
    }
}

impl PersistenceDiagram {
    pub fn dim(&self, q: usize) -> &[PersistencePair] {
        match q {
            0 => &self.dim0,
            1 => &self.dim1,
            _ => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.dim0.len() + self.dim1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dim0.is_empty() && self.dim1.is_empty()
    }

    /// Sorts both dimensions by `(birth, death)`.
    pub fn canonicalize(&mut self) {
        self.dim0.sort_by(PersistencePair::cmp_coords);
        self.dim1.sort_by(PersistencePair::cmp_coords);
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// `(birth, death)` coordinates of one dimension in canonical order, the
    /// representation used for multiset comparisons.
    pub fn coords(&self, q: usize) -> Vec<(f64, f64)> {
        let mut pts: Vec<_> = self.dim(q).iter().map(|p| (p.birth, p.death)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts
    }

    /// Multiset equality of the `(birth, death)` points in both dimensions.
    pub fn same_points(&self, other: &Self) -> bool {
        (0..2).all(|q| self.coords(q) == other.coords(q))
    }

    /// CSV with header `dim,birth,death`, rows sorted by `(dim, birth, death)`,
    /// nine decimal digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,birth,death\n");
        for q in 0..2 {
            for (b, d) in self.coords(q) {
                writeln!(out, "{q},{b:.9},{d:.9}").unwrap();
            }
        }
        out
    }

    /// Parses the CSV format written by [`to_csv`](Self::to_csv). Pairs whose
    /// death equals the essential cap are not flagged essential: the format
    /// does not record that distinction.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("dim,birth,death") => {}
            other => {
                return Err(Error::DiagramParse(format!("unexpected header {other:?}")));
            }
        }
        let mut pd = Self::default();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::DiagramParse(format!("row {}: expected 3 fields", i + 1)));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::DiagramParse(format!("row {}: bad number `{s}`", i + 1)))
            };
            let (birth, death) = (num(fields[1])?, num(fields[2])?);
            if !(0.0..=1.0).contains(&birth) || !(0.0..=1.0).contains(&death) || death < birth {
                return Err(Error::DiagramParse(format!(
                    "row {}: invalid pair ({birth}, {death})",
                    i + 1
                )));
            }
            let pair = PersistencePair::new(birth, death);
            match fields[0] {
                "0" => pd.dim0.push(pair),
                "1" => pd.dim1.push(pair),
                d => return Err(Error::DiagramParse(format!("row {}: bad dim `{d}`", i + 1))),
            }
        }
        Ok(pd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_sorted_with_nine_digits() {
        let pd = PersistenceDiagram {
            dim0: vec![PersistencePair::essential(0.0), PersistencePair::new(0.0, 0.5)],
            dim1: vec![PersistencePair::new(0.25, 0.75)],
            essential_death: 1.0,
        };
        assert_eq!(
            pd.to_csv(),
            "dim,birth,death\n0,0.000000000,0.500000000\n0,0.000000000,1.000000000\n1,0.250000000,0.750000000\n"
        );
        let back = PersistenceDiagram::from_csv(&pd.to_csv()).unwrap();
        assert!(back.same_points(&pd));
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(PersistenceDiagram::from_csv("dim,b,d\n").is_err());
        assert!(PersistenceDiagram::from_csv("dim,birth,death\n2,0,1\n").is_err());
        assert!(PersistenceDiagram::from_csv("dim,birth,death\n0,0.5,0.2\n").is_err());
    }
}
