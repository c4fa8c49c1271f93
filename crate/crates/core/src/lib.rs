//! Binary neural networks by structure approximation.

pub mod binarizers;
pub mod checkpoint;
pub mod data;
pub mod bitcore;
pub mod bpac;
mod error;
pub mod export;
pub mod groupnet;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, Tensor};
