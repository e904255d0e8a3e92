//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad IDX magic in {path}: observed {observed:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: String,
        observed: u32,
        expected: u32,
    },

    #[error("truncated IDX file {path}: header promises {expected} payload bytes, found {found}")]
    IdxTruncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("image/label pairing mismatch: {images} images vs {labels} labels")]
    IdxPairing { images: usize, labels: usize },

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
