//! Prompt-enhanced transformer for non-overlapping many-to-one cross-domain
//! sequential recommendation, trained in two stages: pre-train on every
//! domain, then fine-tune domain-specific prompts on the sparse target.

pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod training;
