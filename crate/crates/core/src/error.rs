use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward has already been run on this tape")]
    BackwardTwice,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` is already registered")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("interface `{interface}` cannot be used here: {reason}")]
    Interface {
        interface: &'static str,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint mismatch for `{param}`: {message}")]
    Checkpoint { param: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
