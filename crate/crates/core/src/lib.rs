pub mod coder;
pub mod config;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod opam;
pub mod par;
pub mod pipeline;
pub mod pmifm;
pub mod pnm;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
