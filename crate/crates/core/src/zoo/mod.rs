//! Ground-truth test models and the `DCRM` flat file format.

mod flat;
mod induction;
mod random;

use thiserror::Error;

use crate::transformer::ModelError;

pub use flat::{from_bytes, load_flat_model, save_flat_model, to_bytes, FlatFormatError, MAGIC, VERSION};
pub use induction::{
    build_induction_model, check_contract, patterned_prompt, ContractReport, PatternedPrompt,
    WiredModelSpec,
};
pub use random::{random_model, RANDOM_WEIGHT_STD};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZooError {
    #[error("invalid wired-model spec: {0}")]
    InvalidSpec(String),
    #[error("wired-model contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for ZooError {
    fn from(e: crate::tensor::TensorError) -> Self {
        ZooError::Model(e.into())
    }
}

/// Nearest `f32`, widened back. Zoo models only hold such values so that the
/// 32-bit file payload reproduces them exactly.
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
