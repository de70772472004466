//! Named parameter sets, seeded initialization and checkpoint files.
//!
//! Checkpoint layout: the 8 magic bytes `TOPOCLP1`, a little-endian `u64`
//! header length, a JSON header `{meta, tensors: [{name, shape, offset}]}`,
//! then every tensor's values as little-endian f64, `offset` counting values
//! from the start of that payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TOPOCLP1";

static NEXT_SET: AtomicU64 = AtomicU64::new(1);

/// Identifies one tensor of one [`ParameterSet`]. Clones of a set share its
/// identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    set: u64,
    index: usize,
}

impl ParamId {
    pub fn set(&self) -> u64 {
        self.set
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform,
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
}

/// A `fan_in x fan_out` matrix drawn from `init`.
pub fn init_tensor<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Tensor {
    let bound = match init {
        Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
        Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(fan_in, fan_out),
    };
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct ParameterSet {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
    frozen: bool,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            id: NEXT_SET.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
            frozen: false,
        }
    }

    pub fn set_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let index = self.values.len();
        self.lookup.insert(name.clone(), index);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId { set: self.id, index })
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&index| ParamId { set: self.id, index })
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|index| ParamId { set: self.id, index })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert_eq!(id.set, self.id, "parameter id from another set");
        &self.values[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert_eq!(id.set, self.id, "parameter id from another set");
        &mut self.values[id.index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen set enters graphs as constants and receives no gradient.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Copies values from a set with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, value) in other.iter() {
            let i = *self
                .lookup
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if self.values[i].shape() != value.shape() {
                return Err(Error::shape("copy_values_from", self.values[i].shape(), value.shape()));
            }
            self.values[i] = value.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors supplied for a set of {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.to_string(),
                    shape: [t.rows(), t.cols()],
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta, tensors })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic bytes".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + len..];
        let mut set = ParameterSet::new();
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = 8 * e.offset;
            let raw = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            set.add(e.name, Tensor::new(e.shape[0], e.shape[1], data)?)?;
        }
        Ok((set, header.meta))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        fs::write(path, self.to_bytes(meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint into this set, requiring matching names and shapes.
    pub fn load_into(&mut self, path: &Path) -> Result<serde_json::Value> {
        let (other, meta) = Self::load(path)?;
        self.copy_values_from(&other)?;
        Ok(meta)
    }
}
