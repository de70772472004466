//! Dense f64 tensors with define-by-run reverse-mode differentiation, the
//! layers built on them, and an AdamW optimizer.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ConvGeometry, Gradients, Graph, Segment, Var};
pub use layers::{Linear, Mlp, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{init_tensor, Init, ParamId, ParameterSet};
pub use tensor::Tensor;
