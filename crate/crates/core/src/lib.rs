//! Segmentation toolkit built around coordinate-conditioned classifier heads.
//!
//! A U-Net backbone produces a per-pixel feature map. Convolution padding and
//! pooling make the statistics of those features depend on where a pixel
//! sits in the image. The `nerdm` and `nerdc` heads feed each pixel's
//! distances to the four image borders through a small MLP and use the
//! result to re-normalize the features or to produce a per-pixel classifier.
//!
//! Module map:
//! * [`coords`]: position vectors `(d_top, d_right, d_bottom, d_left)`.
//! * [`backbone`]: configurable 2D U-Net.
//! * [`heads`]: baseline, nerdm and nerdc heads plus thresholding.
//! * [`data`]: volume I/O, slicing, cropping, normalization, synthetic data.
//! * [`train`]: loss, learning-rate schedule, Adam, training loop.
//! * [`metrics`]: Dice, lesion-wise and surface-distance metrics.
//! * [`diagnostics`]: empirical per-position feature statistics.
//! * [`cli`]: experiment configuration and the command implementations.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod coords;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod heads;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use model::{ModelConfig, SegModel};
pub use tensor::Tensor;
