//! Library side of the command-line tool: configuration files, checkpoints,
//! metric emission and the subcommands themselves.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, MAGIC, RNG_SUMMARY};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_pretrain, cmd_sweep, cmd_synth, corpus_stats, load_corpus, stats_table, CellRow, DomainStats,
    EvalSplit, GridOutput, StageRun,
};
pub use config::{parse_pairs, Config, SynthSettings, KEYS};

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration and shape problems, 3 for data problems, 1 for
    /// anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(TrainError::Data(_)) => 3,
            CliError::Train(_) => 2,
            CliError::Eval(EvalError::Model(_)) => 2,
            CliError::Eval(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}
