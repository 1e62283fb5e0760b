//! Desk-scale sequence-to-sequence training laboratory.
//!
//! A miniature Transformer and a miniature recurrent encoder-decoder built
//! on a from-scratch reverse-mode autodiff tape, with two attention wirings:
//! the usual top-layer encoder memory, and "transparent" attention where
//! every encoder-decoder attention module attends a learned softmax-weighted
//! blend of all encoder layers (embeddings included). Instrumentation tracks
//! the grad-norm ratio between the bottom and top encoder layers and the
//! evolution of the layer-blend weights, exported as CSV for plotting.

pub mod attention;
pub mod bleu;
pub mod checkpoint;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod seq2seq;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod transparent;

pub use diagnostics::{EvalReport, GradNormRecord, RunLog, WeightSnapshot};
pub use encoders::{EncoderConfig, Family, NormPlacement};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::RngStream;
pub use seq2seq::{AttentionMode, Batch, ModelConfig};
pub use tape::{BackwardPass, NodeId, PrimKind, Tape};
pub use tasks::{TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use train::{train, FailureReason, RunOutcome, TrainConfig, TrainResult};
