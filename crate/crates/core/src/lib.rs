//! Keyphrase generation toolkit: a Transformer encoder-decoder with a
//! cross-document attention memory and a pointer-generator copy mechanism,
//! plus beam-search decoding and a stemmed-F1 evaluation harness.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod fixtures;
pub mod graph;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod stem;
pub mod tensor;

pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing {artifact}: {path}")]
    MissingInput { artifact: &'static str, path: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
