pub mod archive;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod mask;
pub mod model;
pub mod nn;
pub mod rle;
pub mod shape_prior;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
