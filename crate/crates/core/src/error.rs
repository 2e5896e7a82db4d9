use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown word {0:?} (closed vocabulary)")]
    Vocabulary(String),

    #[error("sequence of length {len} exceeds max length {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad tensor dump {path}: {msg}")]
    Dump { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
