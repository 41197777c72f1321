//! Cascaded multi-scale cross network for single-image super-resolution.
//!
//! Everything runs on the CPU in `f64` with hand-written backward passes:
//!
//! * [`numerics`]: tensors, convolution, batch norm, LeakyReLU, merge-and-run
//! * [`model`]: MSC modules, stages, the full network and its file format
//! * [`trainer`]: cascaded loss, SGD, patch sampling and the training loop
//! * [`imaging`]: PNG I/O, YCbCr conversion and bicubic resampling
//! * [`metrics`]: PSNR, SSIM and the benchmark evaluation protocol
//! * [`gradcheck`]: finite-difference verification of every backward pass

pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use imaging::{ColorSpace, ImagePlane, RgbImage};
pub use metrics::{MetricReport, MetricRow};
pub use model::{load_model, save_model, write_atomic, CmscModel, Forward, Gradients, ModelConfig};
pub use numerics::{Mode, Shape, Tensor};
pub use trainer::{TrainConfig, TrainLogRecord};
