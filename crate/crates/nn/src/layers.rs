//! Affine layers, ReLU MLPs and multi-head attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Segment, Var};
use crate::params::{init_tensor, Init, ParamId, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// `x W + b` with `W` of shape `fan_in x fan_out`; the bias starts at zero.
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = set.add(format!("{name}.w"), init_tensor(fan_in, fan_out, init, rng))?;
        let bias = if bias {
            Some(set.add(format!("{name}.b"), Tensor::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, set: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(set, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(set, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layers with ReLU between them and none after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`, Kaiming-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(set: &mut ParameterSet, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid(format!("MLP `{name}` needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(set, &format!("{name}.{i}"), w[0], w[1], Init::KaimingUniform, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, set: &ParameterSet, mut x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.in_dim() {
            return Err(Error::shape("mlp", g.shape(x), (self.in_dim(), self.out_dim())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, set, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }
}

/// Multi-head attention with bias-free projections `W_q, W_k, W_v, W_o`,
/// Xavier-uniform initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("width {dim} is not divisible by {heads} heads")));
        }
        let mut proj = |p: &str| Linear::new(set, &format!("{name}.{p}"), dim, dim, Init::XavierUniform, false, rng);
        Ok(Self {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            heads,
            dim,
        })
    }

    /// Attention of `queries` over `keys_values`, batched by `segments`.
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        set: &ParameterSet,
        queries: Var,
        keys_values: Var,
        segments: Vec<Segment>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.wq.forward(g, set, queries)?;
        let k = self.wk.forward(g, set, keys_values)?;
        let v = self.wv.forward(g, set, keys_values)?;
        let a = g.attention(q, k, v, self.heads, segments, key_mask)?;
        self.wo.forward(g, set, a)
    }

    /// Every query row attends to every (unmasked) key row.
    pub fn forward(
        &self,
        g: &mut Graph,
        set: &ParameterSet,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let segment = Segment {
            query: 0..g.shape(queries).0,
            key: 0..g.shape(keys_values).0,
        };
        self.forward_segments(g, set, queries, keys_values, vec![segment], key_mask)
    }
}
