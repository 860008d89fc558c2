//! Two-stage optimization: pre-train everything on all domains with the
//! all-items head, then fine-tune on the target under a freeze strategy
//! with `task + λ·orth`.

mod pipeline;
mod stage;

pub use pipeline::{prepare, run_variant, RunOutput, TrainData, Variant};
pub use stage::{finetune, loss_breakdown, pretrain, LossBreakdown, StageOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SplitMode};
use crate::eval::{EvalError, Metrics};
use crate::model::{Group, ModelConfig, ModelError, NormKind, PoolKind, PromptMode};
use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Set of trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupMask([bool; 7]);

impl GroupMask {
    pub fn all() -> Self {
        Self([true; 7])
    }

    pub fn none() -> Self {
        Self([false; 7])
    }

    pub fn of(groups: &[Group]) -> Self {
        let mut m = Self::none();
        for &g in groups {
            m = m.with(g, true);
        }
        m
    }

    fn slot(g: Group) -> usize {
        Group::ALL.iter().position(|&x| x == g).expect("listed group")
    }

    pub fn with(mut self, g: Group, on: bool) -> Self {
        self.0[Self::slot(g)] = on;
        self
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0[Self::slot(g)]
    }
}

/// Fine-tuning freeze strategies 1–5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeStrategy {
    pub id: u8,
    /// Keep the output bias frozen wherever the strategy would train it.
    pub tie_strict: bool,
}

impl FreezeStrategy {
    pub fn new(id: u8, tie_strict: bool) -> Result<Self, TrainError> {
        if !(1..=5).contains(&id) {
            return Err(TrainError::Config(format!("strategy must be 1..=5, got {id}")));
        }
        Ok(Self { id, tie_strict })
    }

    pub fn mask(&self) -> GroupMask {
        use Group::*;
        let m = match self.id {
            1 | 5 => GroupMask::of(&[PromptSpecific, OutBias]),
            2 => GroupMask::of(&[PromptAgnostic, PromptSpecific, OutBias]),
            3 => GroupMask::of(&[Encoder, PromptAttn, PromptSpecific]),
            _ => GroupMask::all(),
        };
        if self.tie_strict {
            m.with(OutBias, false)
        } else {
            m
        }
    }

    /// Strategy 5 interleaves a pre-training epoch before every
    /// fine-tuning epoch.
    pub fn alternates(&self) -> bool {
        self.id == 5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub d: usize,
    pub d_ff: usize,
    pub l_p: usize,
    pub norm: NormKind,
    pub pool: PoolKind,
    pub residual: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Early-stop patience on validation MRR@10; 0 disables.
    pub patience: usize,
    /// Return the best-validation parameters of a stage instead of the
    /// last epoch's.
    pub restore_best: bool,
    pub warmup_epochs: u32,
    pub lambda: f64,
    pub target_len: usize,
    pub source_len: usize,
    pub strategy: u8,
    pub tie_strict: bool,
    pub seed: u64,
    pub split: (f64, f64, f64),
    pub split_mode: SplitMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 100,
            d_ff: 100,
            l_p: 2,
            norm: NormKind::L2,
            pool: PoolKind::Mean,
            residual: false,
            lr: 0.001,
            batch_size: 128,
            pretrain_epochs: 100,
            finetune_epochs: 50,
            patience: 10,
            restore_best: true,
            warmup_epochs: 10,
            lambda: 0.05,
            target_len: 6,
            source_len: 30,
            strategy: 1,
            tie_strict: false,
            seed: 0,
            split: (0.75, 0.15, 0.10),
            split_mode: SplitMode::Random,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 || self.target_len == 0 || self.source_len == 0 {
            return Err(TrainError::Config("batch size and lengths must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(TrainError::Config("lr must be non-negative".into()));
        }
        FreezeStrategy::new(self.strategy, self.tie_strict)?;
        Ok(())
    }

    pub fn strategy(&self) -> FreezeStrategy {
        FreezeStrategy {
            id: self.strategy,
            tie_strict: self.tie_strict,
        }
    }

    pub fn max_len(&self) -> usize {
        self.target_len.max(self.source_len)
    }

    pub fn model_config(&self, vocab_size: usize, prompt: PromptMode) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d: self.d,
            d_ff: self.d_ff,
            l_p: self.l_p,
            max_len: self.max_len(),
            norm: self.norm,
            pool: self.pool,
            prompt,
            residual: self.residual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Epoch means of the per-step loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub task: f64,
    pub orth: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub losses: Losses,
    /// Target validation metrics after the epoch.
    pub metrics: Option<Metrics>,
    pub lr: f64,
}
