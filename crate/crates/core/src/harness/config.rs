use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::{MaskConfig, Scheme};
use crate::objectives::ObjectiveConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Sessions used for pretraining and as the fine-tuning training split.
    pub corpus: Option<PathBuf>,
    /// Held-out sessions for fine-tuning evaluation.
    pub eval: Option<PathBuf>,
    pub np_spans: Option<PathBuf>,
    pub verb_lexicon: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    /// Packed sequence length, including specials.
    pub max_len: usize,
    pub min_count: u64,
    /// Save a checkpoint every this many steps; 0 saves only the last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Span,
            batch_size: 128,
            lr: 5e-5,
            steps: 1,
            seed: 0,
            max_len: 128,
            min_count: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    /// Fraction of the corpus held out for evaluation when no eval file is
    /// given; 0 evaluates on the training split.
    pub holdout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::Csrl,
            batch_size: 128,
            lr: 5e-5,
            steps: 1,
            holdout: 0.0,
        }
    }
}

/// Everything a run needs, one TOML section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub masking: MaskConfig,
    pub objectives: ObjectiveConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are read as TOML and fall back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for (key, value) in overrides {
            set_key(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the parts every run uses. The encoder vocabulary size is
    /// filled in from the corpus, so it is not checked here.
    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        self.objectives.validate()?;
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if t.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(self.finetune.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if t.max_len < 3 || t.max_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "train.max_len {} must lie in [3, encoder.max_positions = {}]",
                t.max_len, self.encoder.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.finetune.holdout) {
            return Err(Error::Config("finetune.holdout must lie in [0, 1)".into()));
        }
        for (name, path) in [
            ("corpus", &self.paths.corpus),
            ("eval", &self.paths.eval),
            ("np_spans", &self.paths.np_spans),
            ("verb_lexicon", &self.paths.verb_lexicon),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("paths.{name} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(Error::Config(format!("override {key:?} must be section.key")));
    };
    let value = parse_value(raw);
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("{section} is not a section"))),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `section.key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override {s:?} must look like section.key=value")))
}
