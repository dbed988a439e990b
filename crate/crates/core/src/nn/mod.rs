//! Neural-network building blocks on top of [`crate::tensor`].

mod attention;
mod conv;
mod norm;
mod resize;

pub use attention::{mhca_axis, mhca_axis_detailed, AttentionOutput, AttentionParams, Axis};
pub use conv::{conv2d, Conv2d, ConvConfig, ConvSpec};
pub use norm::{layer_norm_channel, LayerNorm, DEFAULT_EPS};
pub use resize::bilinear_resize;
