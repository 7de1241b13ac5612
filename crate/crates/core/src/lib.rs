pub mod config;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod error;
pub mod features;
pub mod model;
pub mod multiscale;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;

pub use error::{Error, Result};
