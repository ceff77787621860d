pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod pipeline;
pub mod promptdec;
pub mod workflow;
mod init;

pub use error::{Error, Result};

/// RGB image `(H, W, 3)` with channel values in `[0, 1]`.
pub type Image = ndarray::Array3<f64>;
/// Per-pixel mask `(H, W)`; binary masks hold exactly 0.0 or 1.0.
pub type Mask = ndarray::Array2<f64>;
