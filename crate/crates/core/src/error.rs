use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("codebook build error: {0}")]
    Build(String),

    #[error("unknown category {0}")]
    UnknownCategory(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("dataset error in {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
