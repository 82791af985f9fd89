//! DualCoreNet: joint lesion segmentation and benign/malignant
//! classification from two-scale regions of interest.

pub mod cgl;
pub mod checkpoint;
pub mod crf;
pub mod error;
pub mod fusion;
pub mod lpl;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plots;
pub mod roi;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
