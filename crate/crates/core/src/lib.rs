//! Squeeze-and-Excitation channel attention as an explanation signal for CNN
//! classifiers: tensor kernels, the SE block, a small CNN, heatmap generation
//! (SE and Grad-CAM), deletion/insertion evaluation, datasets and training.

pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod se;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_smallcnn, ModelGraph};
pub use tensor::Tensor;
