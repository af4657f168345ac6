use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dapt_core::corpus::{flatten_session, load_sessions, rebase_noun_phrases, NounPhraseDistribution, Vocab};
use dapt_core::harness::synth::write_workspace;
use dapt_core::harness::{
    evaluate_checkpoint, finetune, mask_stats, parse_override, pretrain, probe, run_matrix,
    write_probe, Checkpoint, FinetuneData, Grid, PretrainData, RunConfig,
};
use dapt_core::{Error, Result};

/// Domain-adaptive pretraining toolkit.
#[derive(Parser)]
#[command(name = "dapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Continued pretraining with the configured objectives.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        scheme: Option<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Final checkpoint path; defaults to `paths.checkpoint_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune on CSRL or SLU and report F1. Without `--ckpt` the encoder
    /// is freshly initialized.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        task: Option<String>,
        /// Held-out sessions.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on a session file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write pairwise impact matrices for every session.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical masking statistics over sampled plans.
    Maskstats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Run the pretraining-strategy grid and print a results table.
    Matrix {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a small synthetic workspace (corpora, lexicon, config, grid).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.lr`.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides `train.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides `paths.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Any config key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self, stage: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(("train.seed".into(), s.to_string()));
        }
        if let Some(lr) = self.lr {
            out.push((format!("{stage}.lr"), format!("{lr:?}")));
        }
        if let Some(b) = self.batch_size {
            out.push((format!("{stage}.batch_size"), b.to_string()));
        }
        if let Some(c) = &self.corpus {
            out.push(("paths.corpus".into(), quoted(c)));
        }
        for s in &self.set {
            out.push(parse_override(s)?);
        }
        Ok(out)
    }
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn push(over: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        over.insert(0, (key.to_string(), v));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            common,
            steps,
            scheme,
            resume,
            out,
        } => {
            let mut over = common.overrides("train")?;
            push(&mut over, "train.steps", steps.map(|s| s.to_string()));
            push(&mut over, "train.scheme", scheme);
            let cfg = RunConfig::load(&config, &over)?;
            let target = out.or_else(|| {
                cfg.paths
                    .checkpoint_dir
                    .as_ref()
                    .map(|d| d.join(format!("pretrain-{:06}.ckpt", cfg.train.steps)))
            });
            let Some(target) = target else {
                return Err(Error::Config("set paths.checkpoint_dir or pass --out".into()));
            };
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let data = PretrainData::load(&cfg)?;
            let outcome = pretrain(&cfg, &data, resume)?;
            outcome.checkpoint.save(&target)?;
            if let Some(last) = outcome.log.last() {
                println!("{last}");
            }
            println!("checkpoint = {}", target.display());
        }
        Command::Finetune {
            config,
            ckpt,
            common,
            steps,
            task,
            eval,
            out,
        } => {
            let mut over = common.overrides("finetune")?;
            push(&mut over, "finetune.steps", steps.map(|s| s.to_string()));
            push(&mut over, "finetune.task", task);
            push(&mut over, "paths.eval", eval.as_deref().map(quoted));
            let cfg = RunConfig::load(&config, &over)?;
            let init = ckpt.as_deref().map(Checkpoint::load).transpose()?;
            let data = FinetuneData::load(&cfg)?;
            let outcome = finetune(&cfg, &data, init.as_ref())?;
            let target = out.or_else(|| cfg.paths.checkpoint_dir.as_ref().map(|d| d.join("finetune.ckpt")));
            if let Some(t) = target {
                outcome.checkpoint.save(&t)?;
                info!("saved {}", t.display());
            }
            print!("{}", outcome.report);
        }
        Command::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            print!("{}", evaluate_checkpoint(&ck, &load_sessions(&data)?)?);
        }
        Command::Probe { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let results = probe(&ck, &load_sessions(&data)?)?;
            write_probe(&out, &results)?;
            println!("{} matrices written to {}", results.len(), out.display());
        }
        Command::Maskstats {
            config,
            samples,
            common,
            scheme,
        } => {
            let mut over = common.overrides("train")?;
            push(&mut over, "train.scheme", scheme);
            let cfg = RunConfig::load(&config, &over)?;
            cfg.validate()?;
            let data = PretrainData::load(&cfg)?;
            let vocab = Vocab::build(&dapt_core::corpus::token_corpus(&data.sessions), cfg.train.min_count)?;
            let mut seqs = Vec::new();
            let mut nps = Vec::new();
            for s in &data.sessions {
                let seq = flatten_session(s, &vocab, cfg.train.max_len)?;
                nps.push(match data.noun_phrases.get(&s.session_id) {
                    Some(d) => rebase_noun_phrases(s, &seq, d)?,
                    None => NounPhraseDistribution::default(),
                });
                seqs.push(seq);
            }
            let st = mask_stats(&seqs, &nps, cfg.train.scheme, &cfg.masking, samples, cfg.train.seed)?;
            print!("{st}");
        }
        Command::Matrix { grid, common } => {
            let g = Grid::load(&grid, &common.overrides("train")?)?;
            let table = run_matrix(&g)?;
            print!("{table}");
            if table.failures() > 0 {
                return Err(Error::Config(format!("{} grid row(s) failed", table.failures())));
            }
        }
        Command::Synth { out, seed } => {
            let files = write_workspace(&out, seed)?;
            println!("config = {}", files.config.display());
            println!("grid = {}", files.grid.display());
            println!("csrl = {}", files.csrl.display());
            println!("slu = {}", files.slu.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let reason: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", reason.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
