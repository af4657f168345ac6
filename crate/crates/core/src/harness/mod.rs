//! Training, evaluation and reporting drivers behind the `dapt` binary.

pub mod checkpoint;
pub mod config;
pub mod maskstats;
pub mod matrix;
pub mod probe;
pub mod synth;
pub mod train;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{parse_override, RunConfig};
pub use maskstats::{mask_stats, MaskStats};
pub use matrix::{row_config, run_matrix, Grid, MatrixTable};
pub use probe::{format_probe, probe, write_probe, ProbeResult};
pub use train::{
    evaluate_checkpoint, finetune, mlm_eval_loss, pretrain, FinetuneData, FinetuneOutcome,
    PretrainData, PretrainOutcome, StepLog,
};
