use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DomainId, PAD};

/// A user's chronological sequence in one domain: the inputs and the
/// held-out next item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub domain: DomainId,
    pub user: String,
    pub items: Vec<u32>,
    pub target: u32,
}

impl SequenceRecord {
    /// Splits a sequence of length ≥ 2 into inputs and the final item.
    pub fn from_sequence(domain: DomainId, user: String, seq: &[u32]) -> Option<Self> {
        let (&target, items) = seq.split_last()?;
        if items.is_empty() {
            return None;
        }
        Some(Self {
            domain,
            user,
            items: items.to_vec(),
            target,
        })
    }

    pub fn full_sequence(&self) -> Vec<u32> {
        let mut s = self.items.clone();
        s.push(self.target);
        s
    }

    pub fn len(&self) -> usize {
        self.items.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Left-pads with PAD to `len`, or keeps the last `len` ids.
pub fn pad_truncate(items: &[u32], len: usize) -> Vec<u32> {
    if items.len() >= len {
        items[items.len() - len..].to_vec()
    } else {
        let mut row = vec![PAD; len - items.len()];
        row.extend_from_slice(items);
        row
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sparsified {
    pub record: SequenceRecord,
    /// Set when the record was shorter than the lower bound and left as is.
    pub short: bool,
}

/// Keeps the last `k` interactions of a target sequence, `k` drawn
/// uniformly from `keep` and capped at the sequence length.
pub fn sparsify_target<R: Rng + ?Sized>(
    record: &SequenceRecord,
    keep: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<Sparsified, DataError> {
    if !record.domain.is_target() {
        return Err(DataError::NotTarget);
    }
    let full = record.full_sequence();
    if full.len() < *keep.start() {
        return Ok(Sparsified {
            record: record.clone(),
            short: true,
        });
    }
    let k = rng.random_range(keep).min(full.len());
    let kept = &full[full.len() - k..];
    let record = SequenceRecord::from_sequence(record.domain, record.user.clone(), kept)
        .expect("k >= 2");
    Ok(Sparsified {
        record,
        short: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Shuffle, then slice.
    Random,
    /// Contiguous slices in input order.
    Ordered,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Train/valid/test partition. Valid and test sizes are `n·ratio` rounded
/// half up; train takes the remainder.
pub fn split<T: Clone, R: Rng + ?Sized>(
    records: &[T],
    ratios: (f64, f64, f64),
    mode: SplitMode,
    rng: &mut R,
) -> Result<Splits<T>, DataError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(DataError::Ratios(sum));
    }
    let n = records.len();
    if n < 3 {
        return Err(DataError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == SplitMode::Random {
        order.shuffle(rng);
    }
    let n_valid = round_half_up(n as f64 * ratios.1).min(n);
    let n_test = round_half_up(n as f64 * ratios.2).min(n - n_valid);
    let n_train = n - n_valid - n_test;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}
