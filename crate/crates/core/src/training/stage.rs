use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLog, GroupMask, Losses, RunConfig, Stage, TrainData, TrainError};
use crate::data::{batch_iter, stream_seed, PaddedBatch, SequenceRecord};
use crate::eval::{rank_records, Metrics};
use crate::model::{Head, Model, ParamSet};
use crate::numcore::{Adam, Tape, WarmupSchedule};

const STREAM_TARGET: u64 = 0x7461_7267;
const STREAM_SOURCE: u64 = 0x736f_7572;
const STREAM_MIX: u64 = 0x6d69_7820;
const STREAM_FINETUNE: u64 = 0x6674_756e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub orth: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    /// Parameters handed on: those of the best validation epoch, or of the
    /// last epoch without validation data or with `restore_best` off.
    pub best: ParamSet,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub logs: Vec<EpochLog>,
}

/// Adam over the trainable subset of a model's parameters.
struct Stepper {
    mask: GroupMask,
    indices: Vec<usize>,
    opt: Adam,
}

impl Stepper {
    fn new(model: &Model, mask: GroupMask) -> Self {
        let (indices, sizes): (Vec<usize>, Vec<usize>) = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| mask.contains(p.group))
            .map(|(i, p)| (i, p.tensor.len()))
            .unzip();
        Self {
            mask,
            indices,
            opt: Adam::new(&sizes),
        }
    }

    fn step(&mut self, model: &mut Model, batch: &PaddedBatch, head: &Head, lambda: Option<f64>, lr: f64) -> Result<LossBreakdown, TrainError> {
        let mut tape = Tape::new();
        let mask = self.mask;
        let b = model.bind(&mut tape, |g| mask.contains(g));
        let task = model.task_loss(&mut tape, &b, batch, head)?;
        let task_v = tape.value(task).item() as f64;
        let mut loss = task;
        let mut orth_v = None;
        if let Some(l) = lambda {
            if let Some(o) = model.orth_loss(&mut tape, &b) {
                orth_v = Some(tape.value(o).item() as f64);
                if l > 0.0 {
                    let weighted = tape.scale(o, l as f32);
                    loss = tape.add(task, weighted)?;
                }
            }
        }
        let total_v = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        if !self.indices.is_empty() {
            let grads: Vec<Vec<f32>> = self
                .indices
                .iter()
                .map(|&i| {
                    tape.grad(b.vars[i])
                        .map(<[f32]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(b.vars[i]).len()])
                })
                .collect();
            let mut slices: Vec<&mut [f32]> = model
                .params
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| self.indices.contains(i))
                .map(|(_, p)| p.tensor.values_mut())
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            self.opt.step(&mut slices, &grad_refs, lr)?;
        }
        Ok(LossBreakdown {
            task: task_v,
            orth: orth_v,
            total: total_v,
        })
    }

    fn epoch(&mut self, model: &mut Model, batches: &[(PaddedBatch, Head)], lambda: Option<f64>, lr: f64) -> Result<Losses, TrainError> {
        let (mut task, mut orth, mut total) = (0.0, 0.0, 0.0);
        let mut has_orth = false;
        for (batch, head) in batches {
            let l = self.step(model, batch, head, lambda, lr)?;
            task += l.task;
            total += l.total;
            if let Some(o) = l.orth {
                orth += o;
                has_orth = true;
            }
        }
        let n = batches.len().max(1) as f64;
        Ok(Losses {
            task: task / n,
            orth: has_orth.then(|| orth / n),
            lambda: lambda.unwrap_or(0.0),
            total: total / n,
        })
    }
}

fn refs(records: &[SequenceRecord]) -> Vec<&SequenceRecord> {
    records.iter().collect()
}

/// Target and source batches of one pre-training epoch, each domain role
/// padded to its own length, in a seeded interleaved order.
fn pretrain_batches(data: &TrainData, cfg: &RunConfig, epoch: usize) -> Vec<(PaddedBatch, Head)> {
    let target = refs(&data.target_train);
    let sources = refs(&data.sources);
    let mut batches: Vec<(PaddedBatch, Head)> = batch_iter(&target, cfg.target_len, cfg.batch_size, stream_seed(cfg.seed, STREAM_TARGET), epoch)
        .chain(batch_iter(&sources, cfg.source_len, cfg.batch_size, stream_seed(cfg.seed, STREAM_SOURCE), epoch))
        .map(|b| (b, Head::All))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(stream_seed(cfg.seed, STREAM_MIX), epoch as u64));
    batches.shuffle(&mut rng);
    batches
}

fn finetune_batches(data: &TrainData, cfg: &RunConfig, epoch: usize) -> Vec<(PaddedBatch, Head)> {
    let target = refs(&data.target_train);
    batch_iter(&target, cfg.target_len, cfg.batch_size, stream_seed(cfg.seed, STREAM_FINETUNE), epoch)
        .map(|b| (b, Head::Range(data.target_range.clone())))
        .collect()
}

fn validate(model: &Model, data: &TrainData, cfg: &RunConfig) -> Result<Option<Metrics>, TrainError> {
    if data.target_valid.is_empty() {
        return Ok(None);
    }
    let results = rank_records(model, &refs(&data.target_valid), cfg.target_len, data.target_range.clone())?;
    Ok(Some(Metrics::from_results(&results)?))
}

/// Tracks the best validation MRR@10 and the patience counter.
struct EarlyStop {
    patience: usize,
    restore_best: bool,
    best_score: f64,
    best_epoch: usize,
    best: ParamSet,
}

impl EarlyStop {
    fn new(model: &Model, cfg: &RunConfig) -> Self {
        Self {
            patience: cfg.patience,
            restore_best: cfg.restore_best,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            best: model.params.clone(),
        }
    }

    /// Returns true when training should stop.
    fn update(&mut self, model: &Model, epoch: usize, metrics: Option<&Metrics>) -> bool {
        match metrics {
            Some(m) => {
                if m.mrr_10 > self.best_score {
                    self.best_score = m.mrr_10;
                    self.best_epoch = epoch;
                    if self.restore_best {
                        self.best = model.params.clone();
                    }
                }
                if !self.restore_best {
                    self.best = model.params.clone();
                }
                self.patience > 0 && epoch - self.best_epoch >= self.patience
            }
            None => {
                self.best_epoch = epoch;
                self.best = model.params.clone();
                false
            }
        }
    }
}

fn check_data(data: &TrainData) -> Result<(), TrainError> {
    if data.target_train.is_empty() && data.sources.is_empty() {
        return Err(crate::data::DataError::EmptyCorpus.into());
    }
    Ok(())
}

/// Optimizes every parameter on target and source training sequences with
/// the all-items head at constant `cfg.lr`.
pub fn pretrain(model: &mut Model, data: &TrainData, cfg: &RunConfig, sink: &mut dyn FnMut(&EpochLog)) -> Result<StageOutcome, TrainError> {
    check_data(data)?;
    let mut stepper = Stepper::new(model, GroupMask::all());
    let mut stop = EarlyStop::new(model, cfg);
    let mut logs = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.pretrain_epochs {
        let losses = stepper.epoch(model, &pretrain_batches(data, cfg, epoch), None, cfg.lr)?;
        let metrics = validate(model, data, cfg)?;
        let done = stop.update(model, epoch, metrics.as_ref());
        let log = EpochLog {
            epoch,
            stage: Stage::Pretrain,
            losses,
            metrics,
            lr: cfg.lr,
        };
        sink(&log);
        logs.push(log);
        epochs_run = epoch;
        if done {
            break;
        }
    }
    Ok(StageOutcome {
        best: stop.best,
        best_epoch: stop.best_epoch,
        epochs_run,
        logs,
    })
}

/// Optimizes the groups in `mask` on target training sequences with the
/// target head, loss `task + λ·orth`, and a linear warm-up of the lr. With
/// `alternate`, a full pre-training epoch over all parameters precedes each
/// fine-tuning epoch.
pub fn finetune(
    model: &mut Model,
    data: &TrainData,
    cfg: &RunConfig,
    mask: GroupMask,
    alternate: bool,
    epochs: usize,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<StageOutcome, TrainError> {
    if data.target_train.is_empty() {
        return Err(crate::data::DataError::EmptyCorpus.into());
    }
    let schedule = WarmupSchedule::new(cfg.lr, cfg.warmup_epochs);
    let mut stepper = Stepper::new(model, mask);
    let mut pre = alternate.then(|| Stepper::new(model, GroupMask::all()));
    let mut stop = EarlyStop::new(model, cfg);
    let mut logs = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=epochs {
        if let Some(pre) = pre.as_mut() {
            let losses = pre.epoch(model, &pretrain_batches(data, cfg, epoch), None, cfg.lr)?;
            let log = EpochLog {
                epoch,
                stage: Stage::Pretrain,
                losses,
                metrics: None,
                lr: cfg.lr,
            };
            sink(&log);
            logs.push(log);
        }
        let lr = schedule.lr(epoch as u32);
        let losses = stepper.epoch(model, &finetune_batches(data, cfg, epoch), Some(cfg.lambda), lr)?;
        let metrics = validate(model, data, cfg)?;
        let done = stop.update(model, epoch, metrics.as_ref());
        let log = EpochLog {
            epoch,
            stage: Stage::Finetune,
            losses,
            metrics,
            lr,
        };
        sink(&log);
        logs.push(log);
        epochs_run = epoch;
        if done {
            break;
        }
    }
    Ok(StageOutcome {
        best: stop.best,
        best_epoch: stop.best_epoch,
        epochs_run,
        logs,
    })
}

/// Loss terms of one batch without updating anything.
pub fn loss_breakdown(model: &Model, batch: &PaddedBatch, stage: Stage, lambda: f64, data: &TrainData) -> Result<LossBreakdown, TrainError> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let head = match stage {
        Stage::Pretrain => Head::All,
        Stage::Finetune => Head::Range(data.target_range.clone()),
    };
    let task = model.task_loss(&mut tape, &b, batch, &head)?;
    let task = tape.value(task).item() as f64;
    let orth = match stage {
        Stage::Pretrain => None,
        Stage::Finetune => model
            .params
            .has_group(crate::model::Group::PromptAgnostic)
            .then(|| model.orthogonal_loss()),
    };
    let total = task + lambda * orth.unwrap_or(0.0);
    Ok(LossBreakdown { task, orth, total })
}
