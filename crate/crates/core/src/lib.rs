pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
