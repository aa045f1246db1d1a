//! Sentential relation extraction with dynamic routing over stacked hidden
//! states, plus the probing and label-noise analyses built on top of it.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod analysis;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod model;
pub mod routing;
