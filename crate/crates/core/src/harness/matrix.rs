//! The pretraining-strategy experiment grid.
//!
//! A grid file is a run config plus top-level `rows`, `finetune_corpus` and
//! optionally `finetune_eval`. Row labels follow the results table of the
//! method: `No Pretraining`, `MLM`, `MLM + SBO`, `MLM + PMO`,
//! `MLM + SBO + PMO` and `NP Sampling (α=NN)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::error;

use super::config::RunConfig;
use super::train::{finetune, pretrain, FinetuneData, PretrainData};
use crate::corpus::{load_sessions, Task};
use crate::downstream::EvalReport;
use crate::error::{Error, Result};
use crate::masking::Scheme;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: Vec<String>,
    pub finetune_corpus: PathBuf,
    pub finetune_eval: Option<PathBuf>,
    pub base: RunConfig,
}

impl Grid {
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Grid> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let rows = match table.remove("rows") {
            Some(toml::Value::Array(a)) => a
                .into_iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s),
                    other => Err(Error::Config(format!("row label {other} is not a string"))),
                })
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(Error::Config("grid needs a `rows` array".into())),
        };
        let path = |v: Option<toml::Value>, key: &str| match v {
            Some(toml::Value::String(s)) => Ok(Some(PathBuf::from(s))),
            None => Ok(None),
            Some(_) => Err(Error::Config(format!("{key} must be a path string"))),
        };
        let finetune_corpus = path(table.remove("finetune_corpus"), "finetune_corpus")?
            .ok_or_else(|| Error::Config("grid needs `finetune_corpus`".into()))?;
        let finetune_eval = path(table.remove("finetune_eval"), "finetune_eval")?;
        let base = RunConfig::from_toml_with(&toml::to_string(&table).expect("table"), overrides)?;
        let grid = Grid {
            rows,
            finetune_corpus,
            finetune_eval,
            base,
        };
        for r in &grid.rows {
            row_config(r, &grid.base)?;
        }
        Ok(grid)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Grid> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grid::from_toml(&text, overrides)
    }
}

/// Pretraining config for a row label, or `None` for `No Pretraining`.
pub fn row_config(label: &str, base: &RunConfig) -> Result<Option<RunConfig>> {
    let norm: String = label.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut cfg = base.clone();
    let o = &mut cfg.objectives;
    let (scheme, mlm, sbo, pmo) = match norm.as_str() {
        "No Pretraining" => return Ok(None),
        "MLM" => (Scheme::Token, true, false, false),
        "MLM + SBO" => (Scheme::Span, true, true, false),
        "MLM + PMO" => (Scheme::Span, true, false, true),
        "MLM + SBO + PMO" => (Scheme::Span, true, true, true),
        other => {
            let alpha = other
                .strip_prefix("NP Sampling (")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|r| r.strip_prefix("α=").or_else(|| r.strip_prefix("alpha=")))
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|a| (0.0..=100.0).contains(a))
                .ok_or_else(|| Error::Config(format!("unknown grid row {label:?}")))?;
            cfg.masking.alpha = alpha / 100.0;
            (Scheme::Np, true, true, true)
        }
    };
    cfg.train.scheme = scheme;
    o.use_mlm = mlm;
    o.use_sbo = sbo;
    o.use_pmo = pmo;
    Ok(Some(cfg))
}

pub struct RowResult {
    pub label: String,
    pub outcome: Result<EvalReport>,
}

pub struct MatrixTable {
    pub task: Task,
    pub rows: Vec<RowResult>,
}

impl MatrixTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }
}

fn columns(task: Task) -> [&'static str; 3] {
    match task {
        Task::Csrl => ["all", "cross", "intra"],
        Task::Slu => ["intent", "slot", "all"],
    }
}

impl fmt::Display for MatrixTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = columns(self.task);
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(8);
        write!(f, "{:<width$}", "row")?;
        for c in cols {
            write!(f, "  {:>9}", format!("F1_{c}"))?;
        }
        writeln!(f)?;
        for r in &self.rows {
            let pad = width - r.label.chars().count();
            write!(f, "{}{}", r.label, " ".repeat(pad))?;
            match &r.outcome {
                Ok(report) => {
                    for c in cols {
                        write!(f, "  {:>9.2}", 100.0 * report.f1(c))?;
                    }
                }
                Err(e) => write!(f, "  failed: {e}")?,
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Runs every row with the grid's shared seed: pretrain on `paths.corpus`
/// (skipped for `No Pretraining`), then fine-tune and evaluate. A failing
/// row is logged and recorded; later rows still run.
pub fn run_matrix(grid: &Grid) -> Result<MatrixTable> {
    let pre = PretrainData::load(&grid.base)?;
    let tune = FinetuneData {
        train: load_sessions(&grid.finetune_corpus)?,
        eval: grid.finetune_eval.as_deref().map(load_sessions).transpose()?,
    };
    let rows = grid
        .rows
        .iter()
        .map(|label| {
            let outcome = run_row(label, grid, &pre, &tune);
            if let Err(e) = &outcome {
                error!("row {label:?} failed: {e}");
            }
            RowResult {
                label: label.clone(),
                outcome,
            }
        })
        .collect();
    Ok(MatrixTable {
        task: grid.base.finetune.task,
        rows,
    })
}

fn run_row(label: &str, grid: &Grid, pre: &PretrainData, tune: &FinetuneData) -> Result<EvalReport> {
    let ck = match row_config(label, &grid.base)? {
        Some(cfg) => {
            let mut cfg = cfg;
            cfg.paths.checkpoint_dir = None;
            Some(pretrain(&cfg, pre, None)?.checkpoint)
        }
        None => None,
    };
    Ok(finetune(&grid.base, tune, ck.as_ref())?.report)
}
