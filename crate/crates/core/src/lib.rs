//! Neuron-interaction representation composition for a small
//! encoder–decoder Transformer.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`tape`]: dense `f64` tensors and reverse-mode autodiff.
//! * [`composition`]: linear combination, full bilinear pooling and its
//!   low-rank / extended variants.
//! * [`transformer`]: the model, with composition at the multi-head and
//!   multi-layer sites.
//! * [`data`]: synthetic transduction and probing corpora.
//! * [`train`], [`eval`], [`probe`]: optimisation, metrics and the frozen
//!   encoder probing protocol.
//! * [`verify`]: the self-check suites behind `nicomp verify`.

pub mod checkpoint;
pub mod composition;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
