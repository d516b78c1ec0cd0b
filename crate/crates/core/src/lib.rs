pub mod cli;
pub mod error;
pub mod experiments;
pub mod freq;
pub mod hierarchy;
pub mod lexicon;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
