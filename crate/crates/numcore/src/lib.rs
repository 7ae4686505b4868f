//! Minimal dense-tensor core with a reverse-mode tape.
//!
//! Everything runs on `f64`. The tape records a DAG of operations as they are
//! executed; [`Tape::backward`] walks it once in reverse insertion order, which
//! is a valid reverse topological order because every node is appended after
//! its inputs.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod rng;
mod tape;
mod tensor;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, read_checkpoint, write_checkpoint,
    Checkpoint,
};
pub use params::{count_params, Adam, AdamConfig, Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
