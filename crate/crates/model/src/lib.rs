//! Topology-aware contrastive learning: a persistence-diagram encoder with
//! self- and cross-attention, a mixture-of-experts fusion with a small
//! convolutional image encoder, contrastive objectives, the three-stage
//! training schedule, and linear-probe evaluation on a synthetic corpus.

pub mod config;
pub mod corpus;
mod error;
pub mod experiment;
pub mod fusion;
pub mod loss;
pub mod model;
pub mod probe;
pub mod stats;
pub mod topo;
pub mod train;
pub mod visual;

pub use config::{FusionConfig, HeadConfig, ModelConfig, TopoConfig, VisualConfig};
pub use corpus::{
    generate_corpus, toy_calibration_corpus_config, toy_calibration_settings, toy_calibration_templates, CorpusConfig,
    ShapeClass, ShapeCorpus,
};
pub use error::{Error, Result};
pub use fusion::{Fusion, FusionVars};
pub use loss::{barlow, nt_xent, ContrastiveLoss};
pub use model::{TopoCl, View};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
pub use stats::{paired_ttest, TTest};
pub use topo::{select_points, SelectedPoints, TopoEncoder, TopoTrace};
pub use train::{LossRecord, TrainConfig, Trainer};
pub use visual::VisualEncoder;

/// Calibration table measured on the toy shape corpus.
pub const TOY_CALIBRATION_JSON: &str = include_str!("../data/toy_calibration.json");

pub fn toy_calibration_table() -> Result<topocl_core::CalibrationTable> {
    Ok(topocl_core::CalibrationTable::from_json(TOY_CALIBRATION_JSON)?)
}
