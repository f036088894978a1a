//! Toy-scale 2D segmentation backbone: strided grouped-convolution encoder,
//! ASPP at stride 16 and a decoder that fuses the stride-8 and stride-4
//! stage outputs before upsampling back to input resolution.

pub mod aspp;
pub mod layers;
pub mod model;
pub mod ops;

pub use aspp::Aspp;
pub use layers::{BatchNorm, Conv2d, ConvBnRelu, Linear, Relu, ResidualBlock};
pub use model::{Net2D, Net2DConfig, StageConfig};
pub use ops::{ConvGeometry, Mode};
