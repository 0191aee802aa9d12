pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod segnet;
pub mod ssm;
pub mod tensor;
pub mod vss;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
