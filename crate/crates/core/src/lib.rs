//! Range-image segmentation of LiDAR scans with point-wise refinement.
//!
//! Scans are projected to range images, segmented by a 2D encoder-decoder,
//! and the per-pixel features are pulled back to the points where a kernel
//! point convolution and a small head produce per-point class scores.

pub mod checkpoint;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod kitti_io;
pub mod kpconv;
pub mod metrics;
pub mod net2d;
pub mod par;
pub mod param;
pub mod postprocess_knn;
pub mod projection;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
