//! The network: position-enhanced item embeddings, two prompt banks
//! aggregated into every item by attention, a single-layer causal
//! transformer encoder, and tied-embedding heads.

mod forward;
mod params;

pub use forward::{orthogonal_loss, Bound, Head, SeqInput};
pub use params::{Group, Param, ParamSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{NumError, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Row normalization applied to the concatenated prompt/item projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L2,
    Layer,
}

/// Reduction of the prompt-attention outputs to one vector per item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prompt attention over the enhanced copies, then pooling.
    Attention,
    /// Plain average of the enhanced copies.
    MeanPool,
    /// No prompt layer and no prompt parameters.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Item table rows, `n + 1` (row 0 is PAD).
    pub vocab_size: usize,
    pub d: usize,
    pub d_ff: usize,
    pub l_p: usize,
    /// Position table rows; the longest accepted input row.
    pub max_len: usize,
    pub norm: NormKind,
    pub pool: PoolKind,
    pub prompt: PromptMode,
    /// Residual connections around attention and feed-forward (off by default).
    pub residual: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d: usize, l_p: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            d,
            d_ff: d,
            l_p,
            max_len,
            norm: NormKind::L2,
            pool: PoolKind::Mean,
            prompt: PromptMode::Attention,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("d and d_ff must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocabulary needs at least one item".into()));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        if self.prompt != PromptMode::Off && self.l_p == 0 {
            return Err(ModelError::Config(
                "l_p = 0 with prompts enabled; use the prompt-free variant instead".into(),
            ));
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = ParamSet::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        params.check_against(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}
