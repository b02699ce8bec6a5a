//! Error taxonomy shared by the whole crate.
//!
//! Variants are grouped by what the caller can do about them: `Argument` and
//! `Config` mean the request was malformed, `Dimension` means two tensors did
//! not line up, `Data`/`Format`/`Length` are file-level problems, `Checkpoint`
//! is a parameter-record mismatch, and `Divergence` is a training abort.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up; the message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller-supplied value outside the documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation issued against an object in the wrong state
    /// (for example a tape whose gradients were already consumed).
    #[error("invalid state: {0}")]
    State(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A model or layer configuration that cannot be built.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed dataset contents (bad edges, NaN frames, unparsable lines).
    #[error("data error: {0}")]
    Data(String),

    /// A file that is not in the expected format (magic bytes, version).
    #[error("format error: {0}")]
    Format(String),

    /// A file that ends before its declared payload does.
    #[error("length error: {0}")]
    Length(String),

    /// A checkpoint record that does not match the receiving model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss and stopped.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
