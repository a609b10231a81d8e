pub mod config;
pub mod curriculum;
pub mod error;
pub mod evalkit;
pub mod finetune;
pub mod fogsim;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
