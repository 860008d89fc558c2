//! Flat `key = value` run configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;
use crate::data::{peaked_transition, stream_seed, SyntheticDomain, SyntheticSpec};
use crate::training::{RunConfig, Variant};

const STREAM_TRANSITION: u64 = 0x7472_616e;

pub const KEYS: &[&str] = &[
    "ablate.variants",
    "data.file",
    "data.manifest",
    "data.source_len",
    "data.split",
    "data.split_mode",
    "data.target_len",
    "model.d",
    "model.d_ff",
    "model.l_p",
    "model.norm",
    "model.pool",
    "model.residual",
    "run.seed",
    "run.seeds",
    "run.variant",
    "synth.concentration",
    "synth.genres",
    "synth.source_items",
    "synth.source_max_len",
    "synth.source_min_len",
    "synth.source_sequences",
    "synth.sources",
    "synth.sparsify_max",
    "synth.sparsify_min",
    "synth.target_items",
    "synth.target_max_len",
    "synth.target_min_len",
    "synth.target_sequences",
    "synth.transition",
    "train.batch_size",
    "train.finetune_epochs",
    "train.lambda",
    "train.lr",
    "train.patience",
    "train.pretrain_epochs",
    "train.restore_best",
    "train.strategy",
    "train.tie_strict",
    "train.warmup_epochs",
];

/// Generator settings; every source domain shares the `source_*` sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub genres: usize,
    /// Extra mass on one random successor genre per row.
    pub concentration: f64,
    /// Explicit row-stochastic matrix overriding `concentration`.
    pub transition: Option<Vec<Vec<f64>>>,
    pub target_items: usize,
    pub target_sequences: usize,
    pub target_min_len: usize,
    pub target_max_len: usize,
    pub sources: usize,
    pub source_items: usize,
    pub source_sequences: usize,
    pub source_min_len: usize,
    pub source_max_len: usize,
    pub sparsify_min: usize,
    pub sparsify_max: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            genres: 8,
            concentration: 0.7,
            transition: None,
            target_items: 300,
            target_sequences: 800,
            target_min_len: 10,
            target_max_len: 20,
            sources: 2,
            source_items: 500,
            source_sequences: 3000,
            source_min_len: 25,
            source_max_len: 35,
            sparsify_min: 5,
            sparsify_max: 8,
        }
    }
}

impl SynthSettings {
    pub fn spec(&self, seed: u64) -> Result<SyntheticSpec, CliError> {
        if self.sources == 0 {
            return Err(CliError::Config("a cross-domain corpus needs at least one source domain".into()));
        }
        let transition = match &self.transition {
            Some(t) => t.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_TRANSITION));
                peaked_transition(self.genres, self.concentration, &mut rng)
            }
        };
        let mut domains = vec![SyntheticDomain {
            name: "target".into(),
            items: self.target_items,
            sequences: self.target_sequences,
            min_len: self.target_min_len,
            max_len: self.target_max_len,
        }];
        domains.extend((1..=self.sources).map(|i| SyntheticDomain {
            name: format!("source{i}"),
            items: self.source_items,
            sequences: self.source_sequences,
            min_len: self.source_min_len,
            max_len: self.source_max_len,
        }));
        let spec = SyntheticSpec {
            genres: self.genres,
            transition,
            domains,
            sparsify: (self.sparsify_min, self.sparsify_max),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub run: RunConfig,
    pub variant: Variant,
    /// Seed list for ablations and sweeps.
    pub seeds: Vec<u64>,
    pub synth: SynthSettings,
    /// Dataset paths as written; relative paths are resolved by the caller.
    pub manifest: Option<String>,
    pub data_file: Option<String>,
    pub ablate_variants: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            variant: Variant::Full,
            seeds: vec![0],
            synth: SynthSettings::default(),
            manifest: None,
            data_file: None,
            ablate_variants: vec!["full".into(), "no_source".into(), "no_prompt".into(), "no_two_stage".into()],
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("{key}: cannot parse {value:?}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, v))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn named<T: DeserializeOwned>(key: &str, v: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| bad(key, v))
}

fn name_of<T: Serialize>(t: &T) -> String {
    match serde_json::to_value(t) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum variants serialize as strings"),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Splits text into key/value pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies pairs in order, then re-derives defaults that follow other
    /// keys (`model.d_ff` tracks `model.d`, `run.seeds` tracks `run.seed`).
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), CliError> {
        let unknown: Vec<&str> = pairs
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let has = |key: &str| pairs.iter().any(|(k, _)| k == key);
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        if has("model.d") && !has("model.d_ff") {
            self.run.d_ff = self.run.d;
        }
        if has("run.seed") && !has("run.seeds") {
            self.seeds = vec![self.run.seed];
        }
        self.run.validate()?;
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let r = &mut self.run;
        let s = &mut self.synth;
        match key {
            "ablate.variants" => self.ablate_variants = v.split(',').map(|x| x.trim().to_string()).collect(),
            "data.file" => self.data_file = Some(v.to_string()),
            "data.manifest" => self.manifest = Some(v.to_string()),
            "data.source_len" => r.source_len = num(key, v)?,
            "data.split" => {
                let p: Vec<f64> = list(key, v)?;
                let [a, b, c] = p.as_slice() else {
                    return Err(bad(key, v));
                };
                r.split = (*a, *b, *c);
            }
            "data.split_mode" => r.split_mode = named(key, v)?,
            "data.target_len" => r.target_len = num(key, v)?,
            "model.d" => r.d = num(key, v)?,
            "model.d_ff" => r.d_ff = num(key, v)?,
            "model.l_p" => r.l_p = num(key, v)?,
            "model.norm" => r.norm = named(key, v)?,
            "model.pool" => r.pool = named(key, v)?,
            "model.residual" => r.residual = num(key, v)?,
            "run.seed" => r.seed = num(key, v)?,
            "run.seeds" => self.seeds = list(key, v)?,
            "run.variant" => self.variant = v.parse().map_err(|_| bad(key, v))?,
            "synth.concentration" => s.concentration = num(key, v)?,
            "synth.genres" => s.genres = num(key, v)?,
            "synth.source_items" => s.source_items = num(key, v)?,
            "synth.source_max_len" => s.source_max_len = num(key, v)?,
            "synth.source_min_len" => s.source_min_len = num(key, v)?,
            "synth.source_sequences" => s.source_sequences = num(key, v)?,
            "synth.sources" => s.sources = num(key, v)?,
            "synth.sparsify_max" => s.sparsify_max = num(key, v)?,
            "synth.sparsify_min" => s.sparsify_min = num(key, v)?,
            "synth.target_items" => s.target_items = num(key, v)?,
            "synth.target_max_len" => s.target_max_len = num(key, v)?,
            "synth.target_min_len" => s.target_min_len = num(key, v)?,
            "synth.target_sequences" => s.target_sequences = num(key, v)?,
            "synth.transition" => s.transition = Some(v.split(';').map(|row| list(key, row)).collect::<Result<_, _>>()?),
            "train.batch_size" => r.batch_size = num(key, v)?,
            "train.finetune_epochs" => r.finetune_epochs = num(key, v)?,
            "train.lambda" => r.lambda = num(key, v)?,
            "train.lr" => r.lr = num(key, v)?,
            "train.patience" => r.patience = num(key, v)?,
            "train.pretrain_epochs" => r.pretrain_epochs = num(key, v)?,
            "train.restore_best" => r.restore_best = num(key, v)?,
            "train.strategy" => r.strategy = num(key, v)?,
            "train.tie_strict" => r.tie_strict = num(key, v)?,
            "train.warmup_epochs" => r.warmup_epochs = num(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every effective setting, keyed and sorted; optional unset paths are
    /// omitted.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let r = &self.run;
        let s = &self.synth;
        let mut m = BTreeMap::new();
        m.insert("ablate.variants", self.ablate_variants.join(","));
        if let Some(f) = &self.data_file {
            m.insert("data.file", f.clone());
        }
        if let Some(f) = &self.manifest {
            m.insert("data.manifest", f.clone());
        }
        m.insert("data.source_len", r.source_len.to_string());
        m.insert("data.split", join(&[r.split.0, r.split.1, r.split.2]));
        m.insert("data.split_mode", name_of(&r.split_mode));
        m.insert("data.target_len", r.target_len.to_string());
        m.insert("model.d", r.d.to_string());
        m.insert("model.d_ff", r.d_ff.to_string());
        m.insert("model.l_p", r.l_p.to_string());
        m.insert("model.norm", name_of(&r.norm));
        m.insert("model.pool", name_of(&r.pool));
        m.insert("model.residual", r.residual.to_string());
        m.insert("run.seed", r.seed.to_string());
        m.insert("run.seeds", join(&self.seeds));
        m.insert("run.variant", self.variant.to_string());
        m.insert("synth.concentration", s.concentration.to_string());
        m.insert("synth.genres", s.genres.to_string());
        m.insert("synth.source_items", s.source_items.to_string());
        m.insert("synth.source_max_len", s.source_max_len.to_string());
        m.insert("synth.source_min_len", s.source_min_len.to_string());
        m.insert("synth.source_sequences", s.source_sequences.to_string());
        m.insert("synth.sources", s.sources.to_string());
        m.insert("synth.sparsify_max", s.sparsify_max.to_string());
        m.insert("synth.sparsify_min", s.sparsify_min.to_string());
        m.insert("synth.target_items", s.target_items.to_string());
        m.insert("synth.target_max_len", s.target_max_len.to_string());
        m.insert("synth.target_min_len", s.target_min_len.to_string());
        m.insert("synth.target_sequences", s.target_sequences.to_string());
        if let Some(t) = &s.transition {
            m.insert("synth.transition", t.iter().map(|row| join(row)).collect::<Vec<_>>().join(";"));
        }
        m.insert("train.batch_size", r.batch_size.to_string());
        m.insert("train.finetune_epochs", r.finetune_epochs.to_string());
        m.insert("train.lambda", r.lambda.to_string());
        m.insert("train.lr", r.lr.to_string());
        m.insert("train.patience", r.patience.to_string());
        m.insert("train.pretrain_epochs", r.pretrain_epochs.to_string());
        m.insert("train.restore_best", r.restore_best.to_string());
        m.insert("train.strategy", r.strategy.to_string());
        m.insert("train.tie_strict", r.tie_strict.to_string());
        m.insert("train.warmup_epochs", r.warmup_epochs.to_string());
        m
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn dump(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::dump`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Resolves a sweep parameter: a full key, or the unique key ending in
    /// `.name`.
    pub fn resolve_key(name: &str) -> Result<&'static str, CliError> {
        if let Some(k) = KEYS.iter().find(|k| **k == name) {
            return Ok(k);
        }
        let suffix = format!(".{name}");
        let hits: Vec<&'static str> = KEYS.iter().copied().filter(|k| k.ends_with(&suffix)).collect();
        match hits.as_slice() {
            [k] => Ok(k),
            [] => Err(CliError::Config(format!("unknown parameter {name}"))),
            _ => Err(CliError::Config(format!("ambiguous parameter {name}: {}", hits.join(", ")))),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.run.seed = seed;
        c
    }
}
