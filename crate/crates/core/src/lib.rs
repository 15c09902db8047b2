//! View-disentangled windowed attention over stacked slice features.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod cost;
pub mod detection;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod vdformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
