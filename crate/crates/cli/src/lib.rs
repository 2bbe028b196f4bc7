//! Command-line pipeline around the `msdformer` library: configuration
//! layering, presets, the six commands and a self-test.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod presets;
pub mod selftest;

pub use error::{Error, Result};
