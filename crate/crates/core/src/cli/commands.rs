use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CliError, Config};
use crate::data::{make_synthetic, Corpus, DataError, SequenceRecord};
use crate::eval::{evaluate, pop_baseline, Metrics, MetricsReport, RunMeta};
use crate::model::{Group, Model, ParamSet};
use crate::training::{finetune, prepare, pretrain, run_variant, EpochLog, Losses, Stage, TrainData, Variant};

/// Dataset from `data.manifest` + `data.file`, or generated from the
/// `synth.*` settings with the run seed when neither is set.
pub fn load_corpus(cfg: &Config, base: &Path) -> Result<Corpus, CliError> {
    match (&cfg.manifest, &cfg.data_file) {
        (Some(m), Some(f)) => Ok(Corpus::load(&base.join(m), &base.join(f))?),
        (None, None) => Ok(make_synthetic(&cfg.synth.spec(cfg.run.seed)?)?.corpus),
        _ => Err(CliError::Config("data.manifest and data.file must be set together".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainStats {
    pub domain: String,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub sequences: usize,
}

pub fn corpus_stats(c: &Corpus) -> Vec<DomainStats> {
    c.vocab
        .domain_names()
        .enumerate()
        .map(|(i, name)| {
            let d = c.vocab.domain_by_name(name).expect("listed domain");
            debug_assert_eq!(d.0, i);
            let recs: Vec<&SequenceRecord> = c.records_in(d).collect();
            let interactions: usize = recs.iter().map(|r| r.len()).sum();
            let r = c.vocab.range(d);
            DomainStats {
                domain: name.to_string(),
                items: (r.end - r.start) as usize,
                interactions,
                avg_len: if recs.is_empty() { 0.0 } else { interactions as f64 / recs.len() as f64 },
                sequences: recs.len(),
            }
        })
        .collect()
}

pub fn stats_table(stats: &[DomainStats]) -> String {
    let mut s = format!("{:<12} {:>8} {:>13} {:>8} {:>10}\n", "domain", "items", "interactions", "avg_len", "sequences");
    for d in stats {
        let _ = writeln!(s, "{:<12} {:>8} {:>13} {:>8.2} {:>10}", d.domain, d.items, d.interactions, d.avg_len, d.sequences);
    }
    s
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes `manifest.txt` and `data.tsv` under `out`.
pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<Vec<DomainStats>, CliError> {
    let corpus = make_synthetic(&cfg.synth.spec(cfg.run.seed)?)?.corpus;
    mkdir(out)?;
    write(&out.join("manifest.txt"), corpus.manifest_text())?;
    write(&out.join("data.tsv"), corpus.data_text())?;
    Ok(corpus_stats(&corpus))
}

#[derive(Serialize)]
struct EpochRecord<'a> {
    config_hash: &'a str,
    variant: String,
    seed: u64,
    epoch: usize,
    stage: Stage,
    losses: &'a Losses,
    metrics: &'a Option<Metrics>,
    lr: f64,
}

#[derive(Serialize)]
struct TimingRecord {
    stage: Stage,
    epoch: usize,
    wall_time_s: f64,
}

/// Collects per-epoch lines: metrics (deterministic) and wall times (kept
/// in a separate file so metric files replay byte for byte).
struct Recorder {
    hash: String,
    variant: String,
    seed: u64,
    metrics: String,
    timings: String,
    start: Instant,
}

impl Recorder {
    fn new(cfg: &Config) -> Self {
        Self {
            hash: cfg.hash(),
            variant: cfg.variant.to_string(),
            seed: cfg.run.seed,
            metrics: String::new(),
            timings: String::new(),
            start: Instant::now(),
        }
    }

    fn log(&mut self, l: &EpochLog) {
        let rec = EpochRecord {
            config_hash: &self.hash,
            variant: self.variant.clone(),
            seed: self.seed,
            epoch: l.epoch,
            stage: l.stage,
            losses: &l.losses,
            metrics: &l.metrics,
            lr: l.lr,
        };
        self.metrics.push_str(&serde_json::to_string(&rec).expect("serializable"));
        self.metrics.push('\n');
        let t = TimingRecord {
            stage: l.stage,
            epoch: l.epoch,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        self.timings.push_str(&serde_json::to_string(&t).expect("serializable"));
        self.timings.push('\n');
    }

    fn save(&self, out: &Path) -> Result<(), CliError> {
        write(&out.join("metrics.jsonl"), &self.metrics)?;
        write(&out.join("timings.jsonl"), &self.timings)
    }
}

fn meta(cfg: &Config, split: &str) -> RunMeta {
    RunMeta {
        variant: cfg.variant.to_string(),
        strategy: cfg.run.strategy,
        seed: cfg.run.seed,
        config_hash: cfg.hash(),
        split: split.to_string(),
    }
}

fn report_json(r: &MetricsReport) -> String {
    serde_json::to_string_pretty(r).expect("serializable") + "\n"
}

/// Result of a training subcommand.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub best: ParamSet,
    pub last: ParamSet,
    /// Validation metrics of the returned (`best`) parameters, when there
    /// is validation data.
    pub report: Option<MetricsReport>,
}

fn finish_stage(cfg: &Config, data: &TrainData, model: &Model, best: ParamSet, rec: Recorder, out: &Path) -> Result<StageRun, CliError> {
    mkdir(out)?;
    let hash = cfg.hash();
    Checkpoint::new(&hash, cfg.run.seed, best.clone()).save(&out.join("best.ckpt"))?;
    Checkpoint::new(&hash, cfg.run.seed, model.params.clone()).save(&out.join("final.ckpt"))?;
    rec.save(out)?;
    let report = if data.target_valid.is_empty() {
        None
    } else {
        let m = Model::from_params(model.cfg.clone(), best.clone()).map_err(crate::training::TrainError::from)?;
        let refs: Vec<&SequenceRecord> = data.target_valid.iter().collect();
        let r = evaluate(&m, &refs, cfg.run.target_len, data.target_range.clone(), meta(cfg, "valid"))?;
        write(&out.join("report.json"), report_json(&r))?;
        Some(r)
    };
    Ok(StageRun {
        best,
        last: model.params.clone(),
        report,
    })
}

fn training_data(cfg: &Config, base: &Path) -> Result<TrainData, CliError> {
    let corpus = load_corpus(cfg, base)?;
    if corpus.vocab.num_domains() < 2 && cfg.variant != Variant::NoSource {
        return Err(DataError::Spec("the corpus has no source domain".into()).into());
    }
    let data = prepare(&corpus, &cfg.run)?;
    Ok(if cfg.variant == Variant::NoSource { data.without_sources() } else { data })
}

/// Pre-trains a fresh model; writes `best.ckpt`, `final.ckpt`,
/// `metrics.jsonl`, `timings.jsonl` and `report.json` under `out`.
pub fn cmd_pretrain(cfg: &Config, base: &Path, out: &Path) -> Result<StageRun, CliError> {
    let data = training_data(cfg, base)?;
    let mcfg = cfg.run.model_config(data.vocab_size, cfg.variant.prompt_mode());
    let mut model = Model::init(mcfg, cfg.run.seed).map_err(crate::training::TrainError::from)?;
    let mut rec = Recorder::new(cfg);
    let stage = pretrain(&mut model, &data, &cfg.run, &mut |l| rec.log(l))?;
    finish_stage(cfg, &data, &model, stage.best, rec, out)
}

fn load_model(cfg: &Config, data: &TrainData, checkpoint: &Path) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mcfg = cfg.run.model_config(data.vocab_size, cfg.variant.prompt_mode());
    ckpt.check_against(&mcfg)?;
    Ok(Model::from_params(mcfg, ckpt.params).map_err(crate::training::TrainError::from)?)
}

/// Fine-tunes a checkpoint on the target domain under `train.strategy`.
pub fn cmd_finetune(cfg: &Config, base: &Path, checkpoint: &Path, out: &Path) -> Result<StageRun, CliError> {
    let data = training_data(cfg, base)?;
    let mut model = load_model(cfg, &data, checkpoint)?;
    let strategy = cfg.run.strategy();
    let mut mask = strategy.mask();
    if !model.params.has_group(Group::PromptSpecific) {
        mask = mask.with(Group::Encoder, true);
    }
    let mut rec = Recorder::new(cfg);
    let stage = finetune(&mut model, &data, &cfg.run, mask, strategy.alternates(), cfg.run.finetune_epochs, &mut |l| rec.log(l))?;
    finish_stage(cfg, &data, &model, stage.best, rec, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
}

impl FromStr for EvalSplit {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "valid" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            _ => Err(CliError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Evaluates a checkpoint (or, without one, the seeded initialization, or
/// with `pop` the popularity baseline) on a target split.
pub fn cmd_eval(cfg: &Config, base: &Path, checkpoint: Option<&Path>, split: EvalSplit, pop: bool, out: Option<&Path>) -> Result<MetricsReport, CliError> {
    let data = training_data(cfg, base)?;
    let (recs, name) = match split {
        EvalSplit::Train => (&data.target_train, "train"),
        EvalSplit::Valid => (&data.target_valid, "valid"),
        EvalSplit::Test => (&data.target_test, "test"),
    };
    let refs: Vec<&SequenceRecord> = recs.iter().collect();
    let mut meta = meta(cfg, name);
    let report = if pop {
        meta.variant = "pop".into();
        let train: Vec<&SequenceRecord> = data.target_train.iter().collect();
        pop_baseline(&train, &refs, data.target_range.clone(), meta)?
    } else {
        let model = match checkpoint {
            Some(p) => load_model(cfg, &data, p)?,
            None => Model::init(cfg.run.model_config(data.vocab_size, cfg.variant.prompt_mode()), cfg.run.seed)
                .map_err(crate::training::TrainError::from)?,
        };
        evaluate(&model, &refs, cfg.run.target_len, data.target_range.clone(), meta)?
    };
    if let Some(out) = out {
        mkdir(out)?;
        write(&out.join("eval.json"), report_json(&report))?;
    }
    Ok(report)
}

/// One row of an ablation or sweep report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellRow {
    /// Variant name, or `key=value` for sweeps.
    pub cell: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    pub rows: Vec<CellRow>,
    /// Cells that could not be run, with the reason.
    pub failed: Vec<String>,
}

impl GridOutput {
    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>6} {:>9} {:>9} {:>9} {:>9}\n", "cell", "seed", "recall@5", "recall@10", "mrr@5", "mrr@10");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(s, "{:<28} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", r.cell, r.seed, m.recall_5, m.recall_10, m.mrr_5, m.mrr_10);
        }
        s
    }
}

struct Cell {
    name: String,
    cfg: Config,
}

fn dir_name(cell: &str, seed: u64) -> String {
    let safe: String = cell.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '-' }).collect();
    format!("{safe}-s{seed}")
}

fn run_cell(cell: &Cell, base: &Path, out: &Path) -> Result<CellRow, CliError> {
    let corpus = load_corpus(&cell.cfg, base)?;
    let mut rec = Recorder::new(&cell.cfg);
    let run = run_variant(&corpus, &cell.cfg.run, &cell.cfg.variant, &mut |l| rec.log(l))?;
    let dir = out.join("cells").join(dir_name(&cell.name, cell.cfg.run.seed));
    mkdir(&dir)?;
    rec.save(&dir)?;
    let hash = cell.cfg.hash();
    Checkpoint::new(&hash, cell.cfg.run.seed, run.model.params.clone()).save(&dir.join("final.ckpt"))?;
    Ok(CellRow {
        cell: cell.name.clone(),
        seed: cell.cfg.run.seed,
        config_hash: hash,
        config: cell.cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        metrics: run.test,
    })
}

/// Runs cells on up to `jobs` threads; rows keep cell order.
fn run_grid(cells: Vec<Cell>, mut failed: Vec<String>, jobs: usize, base: &Path, out: &Path) -> Result<GridOutput, CliError> {
    mkdir(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellRow, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(cell, base, out);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for (cell, r) in cells.iter().zip(results.into_inner().expect("no poisoned workers")) {
        match r.expect("every cell ran") {
            Ok(row) => rows.push(row),
            Err(e) => failed.push(format!("{} seed {}: {e}", cell.name, cell.cfg.run.seed)),
        }
    }
    let grid = GridOutput { rows, failed };
    let mut jsonl = String::new();
    for r in &grid.rows {
        jsonl.push_str(&serde_json::to_string(r).expect("serializable"));
        jsonl.push('\n');
    }
    write(&out.join("report.jsonl"), jsonl)?;
    write(&out.join("report.txt"), grid.table())?;
    Ok(grid)
}

/// Every variant × `run.seeds`; unknown variants are reported in
/// `failed` and skipped.
pub fn cmd_ablate(cfg: &Config, base: &Path, variants: &[String], jobs: usize, out: &Path) -> Result<GridOutput, CliError> {
    let mut cells = Vec::new();
    let mut failed = Vec::new();
    for name in variants {
        match Variant::from_str(name) {
            Ok(v) => {
                for &seed in &cfg.seeds {
                    let mut c = cfg.with_seed(seed);
                    c.variant = v.clone();
                    cells.push(Cell { name: v.to_string(), cfg: c });
                }
            }
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    run_grid(cells, failed, jobs, base, out)
}

/// One cell per value of `param` (a config key or its unique last
/// segment) × `run.seeds`; invalid values are reported and skipped.
pub fn cmd_sweep(cfg: &Config, base: &Path, param: &str, values: &[String], jobs: usize, out: &Path) -> Result<GridOutput, CliError> {
    let key = Config::resolve_key(param)?;
    let mut cells = Vec::new();
    let mut failed = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        let name = format!("{key}={v}");
        match c.apply(&[(key.to_string(), v.clone())]) {
            Ok(()) => {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        name: name.clone(),
                        cfg: c.with_seed(seed),
                    });
                }
            }
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    run_grid(cells, failed, jobs, base, out)
}
