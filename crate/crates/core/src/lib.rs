//! Multi-scale discrete token modeling for time-series generation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod nn;
pub mod rng;
pub mod seqmodel;
pub mod theory;
pub mod tokenizer;

pub use error::{Error, Result};
