//! Retrieval-head masking and entropy-guided contrastive decoding.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` kernels (matmul, softmax, layer norm).
//! - [`transformer`]: decoder-only forward pass with per-head output masks
//!   and attention capture.
//! - [`zoo`]: a hand-wired induction circuit, seeded random models and the
//!   `DCRM` flat file format.
//! - [`detector`]: needle-in-a-haystack probes and copy-paste retrieval scores.
//! - [`decoder`]: greedy and contrastive (static / entropy / entropy-lite)
//!   next-token selection.
//! - [`harness`]: copy and swap tasks, masked-head sweeps and the statistics
//!   used to summarise them.

pub mod tensor;
pub mod transformer;

pub use tensor::{Tensor, TensorError};
pub use transformer::{
    forward, AttentionTrace, HeadId, HeadMask, Model, ModelConfig, ModelError, ModelWeights,
};
pub mod decoder;
pub mod detector;
pub mod harness;
pub mod zoo;
