//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Values resolve as command line over file over defaults. Every run writes
//! [`RunConfig::to_text`] next to its outputs, which parses back to the same
//! configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ProbeOptions;
use crate::models::{ModelConfig, Similarity};
use crate::training::{Precision, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is filled in from the tokenizer at run time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Minimum corpus count for a word to enter the vocabulary.
    pub min_count: usize,
    pub precision: Precision,
    pub probe: ProbeOptions,
    pub probe_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            min_count: 1,
            precision: Precision::F64,
            probe: ProbeOptions::default(),
            probe_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "budgets",
    "mask_rate",
    "lr",
    "weight_decay",
    "warmup_frac",
    "alpha",
    "ppr_epsilon",
    "stop_grad_teacher",
    "weight.mask",
    "weight.st",
    "weight.me",
    "ablate.mask",
    "ablate.st",
    "ablate.me",
    "ablate.gnn",
    "ablate.ppr",
    "d_model",
    "n_blocks",
    "n_heads",
    "max_len",
    "gcn_layers",
    "ppr_width",
    "mlp_layers",
    "n_anchors",
    "dropout",
    "similarity",
    "min_count",
    "precision",
    "probe.lr",
    "probe.max_steps",
    "probe.tolerance",
    "probe.weight_decay",
    "probe.seeds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::Config(format!("`{key}` has no value")));
        }
        let t = &mut self.train;
        let m = &mut self.model;
        let v = value;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "budgets" => t.budgets = parse_list(key, v)?,
            "mask_rate" => t.mask_rate = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "warmup_frac" => t.warmup_frac = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "ppr_epsilon" => t.ppr_epsilon = parse(key, v)?,
            "stop_grad_teacher" => t.stop_grad_teacher = parse(key, v)?,
            "weight.mask" => t.weights.mask = parse(key, v)?,
            "weight.st" => t.weights.st = parse(key, v)?,
            "weight.me" => t.weights.me = parse(key, v)?,
            "ablate.mask" => t.ablation.no_mask_loss = parse(key, v)?,
            "ablate.st" => t.ablation.no_st_loss = parse(key, v)?,
            "ablate.me" => t.ablation.no_me_loss = parse(key, v)?,
            "ablate.gnn" => t.ablation.no_gnn = parse(key, v)?,
            "ablate.ppr" => t.ablation.no_ppr = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_blocks" => m.n_blocks = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "gcn_layers" => m.gcn_layers = parse(key, v)?,
            "ppr_width" => m.ppr_width = parse(key, v)?,
            "mlp_layers" => m.mlp_layers = parse(key, v)?,
            "n_anchors" => m.n_anchors = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "similarity" => {
                m.similarity = match v {
                    "dot" => Similarity::Dot,
                    "cosine" => Similarity::Cosine,
                    _ => return Err(Error::Config(format!("`similarity` must be dot or cosine, got `{v}`"))),
                }
            }
            "min_count" => self.min_count = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("`precision` must be f32 or f64, got `{v}`"))),
                }
            }
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.max_steps" => self.probe.max_steps = parse(key, v)?,
            "probe.tolerance" => self.probe.tolerance = parse(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = parse(key, v)?,
            "probe.seeds" => self.probe_seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &self.model;
        Some(match key {
            "seed" => t.seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "budgets" => join(&t.budgets),
            "mask_rate" => t.mask_rate.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "warmup_frac" => t.warmup_frac.to_string(),
            "alpha" => t.alpha.to_string(),
            "ppr_epsilon" => t.ppr_epsilon.to_string(),
            "stop_grad_teacher" => t.stop_grad_teacher.to_string(),
            "weight.mask" => t.weights.mask.to_string(),
            "weight.st" => t.weights.st.to_string(),
            "weight.me" => t.weights.me.to_string(),
            "ablate.mask" => t.ablation.no_mask_loss.to_string(),
            "ablate.st" => t.ablation.no_st_loss.to_string(),
            "ablate.me" => t.ablation.no_me_loss.to_string(),
            "ablate.gnn" => t.ablation.no_gnn.to_string(),
            "ablate.ppr" => t.ablation.no_ppr.to_string(),
            "d_model" => m.d_model.to_string(),
            "n_blocks" => m.n_blocks.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "max_len" => m.max_len.to_string(),
            "gcn_layers" => m.gcn_layers.to_string(),
            "ppr_width" => m.ppr_width.to_string(),
            "mlp_layers" => m.mlp_layers.to_string(),
            "n_anchors" => m.n_anchors.to_string(),
            "dropout" => m.dropout.to_string(),
            "similarity" => match m.similarity {
                Similarity::Dot => "dot".into(),
                Similarity::Cosine => "cosine".into(),
            },
            "min_count" => self.min_count.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "probe.lr" => self.probe.lr.to_string(),
            "probe.max_steps" => self.probe.max_steps.to_string(),
            "probe.tolerance" => self.probe.tolerance.to_string(),
            "probe.weight_decay" => self.probe.weight_decay.to_string(),
            "probe.seeds" => join(&self.probe_seeds),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. A key may appear once.
    pub fn apply_text(&mut self, src: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let wrap = |e: Error| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("`{key}` set twice"),
                });
            }
            self.set(key, value).map_err(wrap)?;
        }
        Ok(())
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(src)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// A `--set key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Checks the parts that do not depend on the vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        ModelConfig {
            vocab_size: crate::text::N_RESERVED + 1,
            ..self.model.clone()
        }
        .validate()?;
        if self.probe_seeds.is_empty() {
            return Err(Error::Config("probe.seeds is empty".into()));
        }
        Ok(())
    }
}
