//! Full-candidate ranking metrics and the popularity baseline.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{eval_rows, SequenceRecord};
use crate::model::{Head, Model, ModelError, SeqInput};
use crate::numcore::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no evaluation results")]
    Empty,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("ground truth {0} is not a candidate")]
    NotCandidate(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub truth: u32,
    /// 1-based.
    pub rank: usize,
    pub candidates: usize,
}

/// Rank of `truth` among `(id, score)` candidates: one plus the number of
/// strictly higher scores, plus equal scores with a smaller id.
pub fn rank<S: PartialOrd + Copy>(candidates: &[(u32, S)], truth: u32) -> Result<RankedResult, EvalError> {
    let &(_, ts) = candidates
        .iter()
        .find(|(id, _)| *id == truth)
        .ok_or(EvalError::NotCandidate(truth))?;
    let ahead = candidates
        .iter()
        .filter(|&&(id, s)| s > ts || (s == ts && id < truth))
        .count();
    Ok(RankedResult {
        truth,
        rank: ahead + 1,
        candidates: candidates.len(),
    })
}

/// Same rule for a contiguous score vector where `scores[i]` belongs to id
/// `ids.start + i`.
pub fn rank_contiguous<S: PartialOrd + Copy>(scores: &[S], ids: Range<u32>, truth: u32) -> Result<RankedResult, EvalError> {
    if !ids.contains(&truth) || scores.len() != (ids.end - ids.start) as usize {
        return Err(EvalError::NotCandidate(truth));
    }
    let t = (truth - ids.start) as usize;
    let ts = scores[t];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > ts || (s == ts && j < t))
        .count();
    Ok(RankedResult {
        truth,
        rank: ahead + 1,
        candidates: scores.len(),
    })
}

pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = results.iter().filter(|r| r.rank <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn mrr_at_k(results: &[RankedResult], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = results
        .iter()
        .filter(|r| r.rank <= k)
        .map(|r| 1.0 / r.rank as f64)
        .sum();
    Ok(sum / results.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: String,
    pub strategy: u8,
    pub seed: u64,
    pub config_hash: String,
    /// Evaluated split, e.g. `test`.
    pub split: String,
}

/// The metric grid plus counts; field order is the serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_3: f64,
    pub recall_5: f64,
    pub recall_10: f64,
    pub mrr_3: f64,
    pub mrr_5: f64,
    pub mrr_10: f64,
    pub mrr_20: f64,
    pub count: usize,
    pub candidates: usize,
}

impl Metrics {
    pub fn from_results(results: &[RankedResult]) -> Result<Self, EvalError> {
        Ok(Self {
            recall_3: recall_at_k(results, 3)?,
            recall_5: recall_at_k(results, 5)?,
            recall_10: recall_at_k(results, 10)?,
            mrr_3: mrr_at_k(results, 3)?,
            mrr_5: mrr_at_k(results, 5)?,
            mrr_10: mrr_at_k(results, 10)?,
            mrr_20: mrr_at_k(results, 20)?,
            count: results.len(),
            candidates: results[0].candidates,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub meta: RunMeta,
}

impl MetricsReport {
    pub fn from_results(results: &[RankedResult], meta: RunMeta) -> Result<Self, EvalError> {
        Ok(Self {
            metrics: Metrics::from_results(results)?,
            meta,
        })
    }
}

/// Ranks every record's held-out item among the candidate range using the
/// final-position logits of the model.
pub fn rank_records<T: Scalar>(
    model: &Model<T>,
    records: &[&SequenceRecord],
    len: usize,
    candidates: Range<u32>,
) -> Result<Vec<RankedResult>, EvalError> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let batch = eval_rows(chunk, len);
        let z = model.final_logits(&SeqInput::from_batch(&batch), &Head::Range(candidates.clone()))?;
        for (i, r) in chunk.iter().enumerate() {
            out.push(rank_contiguous(z.row(i), candidates.clone(), r.target)?);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[&SequenceRecord],
    len: usize,
    candidates: Range<u32>,
    meta: RunMeta,
) -> Result<MetricsReport, EvalError> {
    MetricsReport::from_results(&rank_records(model, records, len, candidates)?, meta)
}

/// Frequency of each candidate over every interaction of the training
/// records (inputs and held-out items).
pub fn popularity(train: &[&SequenceRecord], candidates: Range<u32>) -> Vec<u64> {
    let mut freq = vec![0u64; (candidates.end - candidates.start) as usize];
    for r in train {
        for id in r.items.iter().copied().chain(std::iter::once(r.target)) {
            if candidates.contains(&id) {
                freq[(id - candidates.start) as usize] += 1;
            }
        }
    }
    freq
}

/// Ranks every evaluation record by training-set popularity.
pub fn pop_baseline(
    train: &[&SequenceRecord],
    eval: &[&SequenceRecord],
    candidates: Range<u32>,
    meta: RunMeta,
) -> Result<MetricsReport, EvalError> {
    if train.is_empty() {
        return Err(EvalError::Empty);
    }
    let freq = popularity(train, candidates.clone());
    let results = eval
        .iter()
        .map(|r| rank_contiguous(&freq, candidates.clone(), r.target))
        .collect::<Result<Vec<_>, _>>()?;
    MetricsReport::from_results(&results, meta)
}
