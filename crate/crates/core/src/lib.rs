//! Grayscale images, cubical persistent homology, diagram distances and
//! topology-calibrated augmentation.

pub mod augment;
pub mod calibrate;
pub mod cubical;
pub mod diagram;
mod error;
pub mod grid;
pub mod image;
mod morphology;
pub mod metrics;
pub mod rng;
pub mod roi;

pub use augment::{AugmentationCombo, AugmentationOp, OpKind, OpTemplate};
pub use calibrate::{Band, CalibrationTable};
pub use cubical::{compute_pd, compute_pd_oracle, restrict_and_compute};
pub use diagram::{PersistenceDiagram, PersistencePair};
pub use error::{Error, Result};
pub use image::{GrayImage, ImageFormat};
pub use metrics::{bottleneck, relative_bottleneck, RelativeBottleneck};
pub use roi::{RoiMask, RoiMethod};
