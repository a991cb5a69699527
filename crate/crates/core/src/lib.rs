pub mod adversary;
pub mod cli;
pub mod config;
pub mod error;
pub mod gapbridge;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod protobank;
pub mod stylenet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
