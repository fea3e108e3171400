//! Minimal reverse-mode differentiation engine with dense, convolutional and
//! LSTM layers, named parameter partitions and RMSProp.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use layers::{Conv2d, Dense, LstmCell, LstmNodes, LstmState};
pub use optim::{lr_schedule, RmsProp};
pub use params::{Gradients, ParamRef, ParamStore, Partition};
pub use tape::{NodeId, Tape};
pub use tensor::{Precision, Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint precision {found:?} does not match requested {expected:?}")]
    PrecisionMismatch { found: Precision, expected: Precision },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs one LSTM step outside of any training graph.
pub fn lstm_step<T: Real>(
    store: &ParamStore<T>,
    cell: &LstmCell,
    input: &Tensor<T>,
    state: &LstmState<T>,
) -> (Tensor<T>, LstmState<T>) {
    let mut tape = Tape::new(store);
    let x = tape.input(input.clone());
    let s = LstmNodes::input(&mut tape, state);
    let next = cell.step(&mut tape, x, s).read(&tape);
    (next.hidden.clone(), next)
}
