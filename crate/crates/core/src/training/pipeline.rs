use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{finetune, pretrain, EpochLog, RunConfig, TrainError};
use crate::data::{split, stream_seed, Corpus, DomainId, SequenceRecord};
use crate::eval::{evaluate, Metrics, RunMeta};
use crate::model::{Group, Model, ParamSet, PromptMode};

const STREAM_SPLIT: u64 = 0x7370_6c74;

/// Target splits plus every source sequence (sources are never held out).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub target_train: Vec<SequenceRecord>,
    pub target_valid: Vec<SequenceRecord>,
    pub target_test: Vec<SequenceRecord>,
    pub sources: Vec<SequenceRecord>,
    pub target_range: Range<u32>,
    pub vocab_size: usize,
}

impl TrainData {
    pub fn without_sources(&self) -> Self {
        Self {
            sources: Vec::new(),
            ..self.clone()
        }
    }
}

pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<TrainData, TrainError> {
    let target: Vec<SequenceRecord> = corpus.records_in(DomainId::TARGET).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_SPLIT));
    let s = split(&target, cfg.split, cfg.split_mode, &mut rng)?;
    Ok(TrainData {
        target_train: s.train,
        target_valid: s.valid,
        target_test: s.test,
        sources: corpus.records.iter().filter(|r| !r.domain.is_target()).cloned().collect(),
        target_range: corpus.vocab.target_range(),
        vocab_size: corpus.vocab.size(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoOrth,
    NoSource,
    NoPrompt,
    NoTwoStage,
    NoPromptAttention,
    DropSource(String),
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full" => Variant::Full,
            "no_orth" => Variant::NoOrth,
            "no_source" => Variant::NoSource,
            "no_prompt" => Variant::NoPrompt,
            "no_two_stage" => Variant::NoTwoStage,
            "no_prompt_attention" => Variant::NoPromptAttention,
            _ => match s.strip_prefix("drop_source:") {
                Some(name) if !name.is_empty() => Variant::DropSource(name.to_string()),
                _ => return Err(TrainError::Config(format!("unknown variant {s:?}"))),
            },
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoOrth => f.write_str("no_orth"),
            Variant::NoSource => f.write_str("no_source"),
            Variant::NoPrompt => f.write_str("no_prompt"),
            Variant::NoTwoStage => f.write_str("no_two_stage"),
            Variant::NoPromptAttention => f.write_str("no_prompt_attention"),
            Variant::DropSource(n) => write!(f, "drop_source:{n}"),
        }
    }
}

impl Variant {
    pub fn prompt_mode(&self) -> PromptMode {
        match self {
            Variant::NoPrompt => PromptMode::Off,
            Variant::NoPromptAttention => PromptMode::MeanPool,
            _ => PromptMode::Attention,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub variant: Variant,
    pub init: ParamSet,
    /// Pre-trained parameters handed to fine-tuning, when there was a
    /// pre-training stage.
    pub pretrained: Option<ParamSet>,
    /// Model at its best validation epoch, as evaluated.
    pub model: Model,
    pub test: Metrics,
    pub logs: Vec<EpochLog>,
}

fn drop_domain(corpus: &Corpus, name: &str) -> Result<Corpus, TrainError> {
    let d = corpus
        .vocab
        .domain_by_name(name)
        .ok_or_else(|| TrainError::Config(format!("no source domain named {name:?}")))?;
    if d.is_target() {
        return Err(TrainError::Config("cannot drop the target domain".into()));
    }
    Ok(Corpus {
        vocab: corpus.vocab.clone(),
        records: corpus.records.iter().filter(|r| r.domain != d).cloned().collect(),
    })
}

/// Runs one ablation variant end to end and evaluates on the target test
/// split.
pub fn run_variant(corpus: &Corpus, cfg: &RunConfig, variant: &Variant, sink: &mut dyn FnMut(&EpochLog)) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let dropped;
    let corpus = match variant {
        Variant::DropSource(name) => {
            dropped = drop_domain(corpus, name)?;
            &dropped
        }
        _ => corpus,
    };
    let data = prepare(corpus, cfg)?;
    let mut cfg = cfg.clone();
    if *variant == Variant::NoOrth {
        cfg.lambda = 0.0;
    }
    let mut model = Model::init(cfg.model_config(data.vocab_size, variant.prompt_mode()), cfg.seed)?;
    let init = model.params.clone();
    let mut logs = Vec::new();
    let mut pretrained = None;

    match variant {
        Variant::NoSource => {
            let data = data.without_sources();
            let epochs = cfg.pretrain_epochs + cfg.finetune_epochs;
            let out = finetune(&mut model, &data, &cfg, super::GroupMask::all(), false, epochs, sink)?;
            model.params = out.best;
            logs.extend(out.logs);
        }
        Variant::NoTwoStage => {
            let out = pretrain(&mut model, &data, &cfg, sink)?;
            model.params = out.best;
            logs.extend(out.logs);
        }
        _ => {
            let out = pretrain(&mut model, &data, &cfg, sink)?;
            model.params = out.best;
            logs.extend(out.logs);
            pretrained = Some(model.params.clone());
            let strategy = cfg.strategy();
            let mut mask = strategy.mask();
            if !model.params.has_group(Group::PromptSpecific) {
                // no prompt banks to tune: adapt the encoder instead
                mask = mask.with(Group::Encoder, true);
            }
            let out = finetune(&mut model, &data, &cfg, mask, strategy.alternates(), cfg.finetune_epochs, sink)?;
            model.params = out.best;
            logs.extend(out.logs);
        }
    }

    let test_refs: Vec<&SequenceRecord> = data.target_test.iter().collect();
    let report = evaluate(&model, &test_refs, cfg.target_len, data.target_range.clone(), RunMeta::default())?;
    Ok(RunOutput {
        variant: variant.clone(),
        init,
        pretrained,
        model,
        test: report.metrics,
        logs,
    })
}
