//! MCANet segmentation network, its autodiff engine, and training/evaluation utilities.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Init, Precision, Tensor};
