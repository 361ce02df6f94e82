//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    /// Incompatible extents, with both shapes in the message.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration detected before any compute.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A primitive produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Operation requires state that has not been initialized.
    #[error("invalid state: {0}")]
    State(String),

    /// Bad input data (labels, rasters).
    #[error("data error: {0}")]
    Data(String),

    /// An inner error annotated with the layer or stage it occurred in.
    #[error("in {layer}: {source}")]
    Context {
        layer: String,
        #[source]
        source: Box<TensorError>,
    },
}

impl TensorError {
    /// Wrap with the name of the layer or stage that was executing.
    pub fn at(self, layer: impl Into<String>) -> TensorError {
        TensorError::Context {
            layer: layer.into(),
            source: Box::new(self),
        }
    }
}

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("malformed raster file {path}: {detail}")]
    RasterFormat { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
