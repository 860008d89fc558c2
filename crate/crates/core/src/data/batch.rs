use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::protocol::{pad_truncate, SequenceRecord};
use super::{stream_seed, DomainId, PAD};

/// Row-major `rows × len` ids with per-position next-item targets
/// (0 = ignore).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub domains: Vec<DomainId>,
}

impl PaddedBatch {
    pub fn from_records(records: &[&SequenceRecord], len: usize) -> Self {
        let mut ids = Vec::with_capacity(records.len() * len);
        let mut targets = Vec::with_capacity(records.len() * len);
        for r in records {
            ids.extend(pad_truncate(&r.items, len));
            // input i is followed by item i+1; the last input by the label
            let mut next: Vec<u32> = r.items[1..].to_vec();
            next.push(r.target);
            targets.extend(pad_truncate(&next, len));
        }
        Self {
            rows: records.len(),
            len,
            ids,
            targets,
            domains: records.iter().map(|r| r.domain).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn target_row(&self, i: usize) -> &[u32] {
        &self.targets[i * self.len..(i + 1) * self.len]
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

/// Shuffled batches; the order depends only on `(seed, epoch)`.
pub fn batch_iter<'a>(
    records: &'a [&'a SequenceRecord],
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = PaddedBatch> + 'a {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch as u64)));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        let rs: Vec<&SequenceRecord> = idx.iter().map(|&i| records[i]).collect();
        PaddedBatch::from_records(&rs, len)
    })
}

/// Unshuffled input rows for scoring, in record order.
pub fn eval_rows(records: &[&SequenceRecord], len: usize) -> PaddedBatch {
    PaddedBatch::from_records(records, len)
}
