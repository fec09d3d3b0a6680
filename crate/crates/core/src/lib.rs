//! Truncated backpropagation through time for recurrent networks, together
//! with the tools to measure how far it lands from the full-sequence optimum.

pub mod error;
pub mod linalg;
pub mod rng;
pub mod rnn;
pub mod data;
pub mod autodiff;
pub mod training;
pub mod benchmark;
pub mod analysis;
pub mod cli;

pub use error::{Error, Result};
