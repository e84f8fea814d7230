pub mod aligner;
pub mod audit;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fuser;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod thinker;
pub mod train;
pub mod world;

#[cfg(test)]
mod reference;

pub use error::{Error, Result};
