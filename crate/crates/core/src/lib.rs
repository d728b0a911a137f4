pub mod autodiff;
pub mod boxes;
pub mod commands;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod par;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
