use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tensor allocation of {requested} bytes exceeds capacity {cap} (in use {in_use})")]
    Capacity {
        requested: usize,
        in_use: usize,
        cap: usize,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
