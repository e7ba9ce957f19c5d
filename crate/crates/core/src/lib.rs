pub mod asr;
pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod interfaces;
pub mod losses;
pub mod metrics;
pub mod nlu;
pub mod nn;

pub use error::{Error, Result};
