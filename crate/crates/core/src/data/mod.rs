//! Unified item vocabulary, interaction sequences, the padding /
//! sparsification / split protocol, and the synthetic corpus generator.

mod batch;
mod corpus;
mod protocol;
mod synthetic;
mod vocab;

pub use batch::{batch_iter, eval_rows, PaddedBatch};
pub use corpus::{parse_records, read_manifest, Corpus, DomainSequences, RawRecord};
pub use protocol::{
    pad_truncate, sparsify_target, split, SequenceRecord, SplitMode, Sparsified, Splits,
};
pub use synthetic::{
    make_synthetic, peaked_transition, SyntheticCorpus, SyntheticDomain, SyntheticSpec,
};
pub use vocab::{DomainId, Vocab, PAD};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("record is not in the target domain")]
    NotTarget,
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("split ratios must sum to 1, got {0}")]
    Ratios(f64),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// Derives an independent 64-bit stream seed from a base seed (splitmix64).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
