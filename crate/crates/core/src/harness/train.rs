use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Stage};
use super::config::RunConfig;
use crate::corpus::{
    flatten_session, load_lexicon, load_np_distribution, load_sessions, rebase_noun_phrases,
    select_predicates, token_corpus, DialogueSession, FlatSequence, NounPhraseDistribution, Task,
    Vocab,
};
use crate::downstream::{csrl_loss, evaluate, init_heads, slu_loss, EvalReport, LabelScheme};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::masking::{apply_mask_with, sample_plan, MaskPlan, UnigramSampler};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::objectives::{combined_loss, mlm_loss, ObjectiveInputs};

/// Stream for one training example. Streams are independent of thread
/// scheduling and of where a run was resumed.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream reserved for one-off draws (initialization, shuffles).
fn setup_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    example_rng(seed, u64::MAX - purpose)
}

/// In-memory inputs of a pretraining run.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub sessions: Vec<DialogueSession>,
    pub noun_phrases: HashMap<String, NounPhraseDistribution>,
    pub verb_lexicon: Vec<String>,
}

impl PretrainData {
    pub fn load(cfg: &RunConfig) -> Result<PretrainData> {
        let corpus = cfg
            .paths
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
        Ok(PretrainData {
            sessions: load_sessions(corpus)?,
            noun_phrases: match &cfg.paths.np_spans {
                Some(p) => load_np_distribution(p)?,
                None => HashMap::new(),
            },
            verb_lexicon: match &cfg.paths.verb_lexicon {
                Some(p) => load_lexicon(p)?,
                None => Vec::new(),
            },
        })
    }
}

/// Flattened sequences with their sampling inputs.
struct Prepared {
    seqs: Vec<FlatSequence>,
    noun_phrases: Vec<NounPhraseDistribution>,
    predicates: Vec<Vec<usize>>,
}

fn prepare(data: &PretrainData, vocab: &Vocab, max_len: usize) -> Result<Prepared> {
    let lexicon: HashSet<usize> = data
        .verb_lexicon
        .iter()
        .filter_map(|w| vocab.id_of(w))
        .collect();
    let mut out = Prepared {
        seqs: Vec::new(),
        noun_phrases: Vec::new(),
        predicates: Vec::new(),
    };
    for session in &data.sessions {
        let seq = flatten_session(session, vocab, max_len)?;
        let np = match data.noun_phrases.get(&session.session_id) {
            Some(d) => rebase_noun_phrases(session, &seq, d)?,
            None => NounPhraseDistribution::default(),
        };
        let annotated = (!seq.predicates.is_empty()).then_some(seq.predicates.as_slice());
        out.predicates.push(select_predicates(&seq, &lexicon, annotated));
        out.noun_phrases.push(np);
        out.seqs.push(seq);
    }
    if out.seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Loss components of one optimizer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub mlm: Option<f64>,
    pub sbo: Option<f64>,
    pub pmo: Option<f64>,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} loss {:.6}", self.step, self.total)?;
        for (name, v) in [("mlm", self.mlm), ("sbo", self.sbo), ("pmo", self.pmo)] {
            if let Some(v) = v {
                write!(f, " {name} {v:.6}")?;
            }
        }
        Ok(())
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Checkpoint files written during the run.
    pub saved: Vec<PathBuf>,
}

/// Batch size actually used: the configured one, capped at the corpus size.
fn effective_batch(configured: usize, available: usize) -> usize {
    if configured > available {
        warn!("batch_size {configured} exceeds {available} training examples; using {available}");
    }
    configured.min(available)
}

/// Example order for one pass over `n` items, reshuffled every epoch.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut setup_rng(seed, 1 + epoch));
    order
}

/// Item indices of the examples `first..first + count`.
fn batch_items(seed: u64, n: usize, first: u64, count: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (first..first + count as u64)
        .map(|g| {
            let epoch = g / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(seed, epoch, n)));
            }
            cached.as_ref().expect("cached").1[(g % n as u64) as usize]
        })
        .collect()
}

/// Sums per-example gradients in example order, then divides by the count.
fn reduce(per_example: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let count = per_example.len() as f64;
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= count;
        }
    }
    acc
}

fn encoder_config(cfg: &EncoderConfig, vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.clone()
    }
}

/// Continued pretraining with the configured objectives.
///
/// Runs until `cfg.train.steps` optimizer steps have been taken in total; a
/// `resume` checkpoint supplies parameters, optimizer state, vocabulary and
/// the step to continue from.
pub fn pretrain(
    cfg: &RunConfig,
    data: &PretrainData,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    info!(
        "pretrain seed {} steps {} batch_size {} lr {} scheme {:?}",
        t.seed, t.steps, t.batch_size, t.lr, t.scheme
    );
    let (vocab, mut params, mut adam, start) = match resume {
        Some(ck) => {
            if ck.stage != Stage::Pretrain || ck.seed != t.seed {
                return Err(Error::Config(format!(
                    "cannot resume a {:?} checkpoint with seed {} as pretraining with seed {}",
                    ck.stage, ck.seed, t.seed
                )));
            }
            (ck.vocab, ck.params, ck.adam, ck.step)
        }
        None => {
            let vocab = Vocab::build(&token_corpus(&data.sessions), t.min_count)?;
            let enc = encoder_config(&cfg.encoder, &vocab);
            let params = EncoderParams::init(enc, &mut setup_rng(t.seed, 0))?;
            let adam = AdamState::new(params.store.tensors());
            (vocab, params, adam, 0)
        }
    };
    let prep = prepare(data, &vocab, t.max_len)?;
    let unigram = UnigramSampler::new(&vocab);
    let batch = effective_batch(t.batch_size, prep.seqs.len());
    let adam_cfg = AdamConfig {
        lr: t.lr,
        ..AdamConfig::default()
    };

    let mut log = Vec::new();
    let mut saved = Vec::new();
    for step in start..t.steps {
        let first = step * batch as u64;
        let items = batch_items(t.seed, prep.seqs.len(), first, batch);
        let results: Vec<(Vec<Tensor>, [f64; 4])> = items
            .par_iter()
            .enumerate()
            .map(|(k, &si)| {
                let mut rng = example_rng(t.seed, first + k as u64);
                let seq = &prep.seqs[si];
                let plan = sample_plan(t.scheme, seq, Some(&prep.noun_phrases[si]), &cfg.masking, &mut rng)?;
                let corrupted = apply_mask_with(seq, &plan, &unigram, &mut rng)?;
                let tape = Tape::new();
                let bound = params.store.bind(&tape);
                let parts = combined_loss(
                    &tape,
                    &bound,
                    &params.config,
                    &cfg.objectives,
                    &ObjectiveInputs {
                        original_ids: &seq.token_ids,
                        corrupted_ids: &corrupted,
                        plan: &plan,
                        predicates: &prep.predicates[si],
                    },
                )?;
                let value = |v: Option<crate::numerics::Var>| v.map_or(Ok(0.0), |v| tape.item(v));
                let losses = [
                    tape.item(parts.total)?,
                    value(parts.mlm)?,
                    value(parts.sbo)?,
                    value(parts.pmo)?,
                ];
                let grads = tape.backward(parts.total)?;
                Ok((bound.grads(&grads), losses))
            })
            .collect::<Result<_>>()?;

        let mut sums = [0.0; 4];
        for (_, l) in &results {
            for (s, x) in sums.iter_mut().zip(l) {
                *s += x;
            }
        }
        let mean = sums.map(|s| s / batch as f64);
        let o = &cfg.objectives;
        let entry = StepLog {
            step: step + 1,
            total: mean[0],
            mlm: o.use_mlm.then_some(mean[1]),
            sbo: o.use_sbo.then_some(mean[2]),
            pmo: o.use_pmo.then_some(mean[3]),
        };
        if !mean.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                components: format!("mlm {} sbo {} pmo {}", mean[1], mean[2], mean[3]),
            });
        }
        info!("{entry}");
        log.push(entry);

        let grads = reduce(results.into_iter().map(|(g, _)| g).collect());
        adam_step(params.store.tensors_mut(), &grads, &mut adam, &adam_cfg)?;

        let done = step + 1;
        let every = t.checkpoint_every;
        if let Some(dir) = &cfg.paths.checkpoint_dir {
            if (every > 0 && done % every == 0) || done == t.steps {
                let path = dir.join(format!("pretrain-{done:06}.ckpt"));
                snapshot(cfg, &vocab, &params, &adam, done).save(&path)?;
                info!("saved {}", path.display());
                saved.push(path);
            }
        }
    }
    Ok(PretrainOutcome {
        checkpoint: snapshot(cfg, &vocab, &params, &adam, t.steps.max(start)),
        log,
        saved,
    })
}

fn snapshot(
    cfg: &RunConfig,
    vocab: &Vocab,
    params: &EncoderParams,
    adam: &AdamState,
    step: u64,
) -> Checkpoint {
    Checkpoint {
        stage: Stage::Pretrain,
        step,
        seed: cfg.train.seed,
        config: cfg.clone(),
        vocab: vocab.clone(),
        labels: None,
        params: params.clone(),
        adam: adam.clone(),
    }
}

/// Mean MLM loss over every sequence under one fixed token-masking draw per
/// sequence, seeded by `seed`.
pub fn mlm_eval_loss(
    params: &EncoderParams,
    vocab: &Vocab,
    data: &PretrainData,
    cfg: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let prep = prepare(data, vocab, cfg.train.max_len)?;
    let unigram = UnigramSampler::new(vocab);
    let losses = prep
        .seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = example_rng(seed, i as u64);
            let plan: MaskPlan = sample_plan(
                crate::masking::Scheme::Token,
                seq,
                None,
                &cfg.masking,
                &mut rng,
            )?;
            let corrupted = apply_mask_with(seq, &plan, &unigram, &mut rng)?;
            let tape = Tape::new();
            let p = params.store.bind_constants(&tape);
            let h = encode(&tape, &p, &params.config, &corrupted, None, None)?;
            tape.item(mlm_loss(&tape, &p, h, &plan, &seq.token_ids)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Sessions for fine-tuning and evaluation.
#[derive(Clone, Debug, Default)]
pub struct FinetuneData {
    pub train: Vec<DialogueSession>,
    /// Held-out sessions; when absent the harness splits `train` by
    /// `finetune.holdout`, or evaluates on `train` itself.
    pub eval: Option<Vec<DialogueSession>>,
}

impl FinetuneData {
    pub fn load(cfg: &RunConfig) -> Result<FinetuneData> {
        let corpus = cfg
            .paths
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
        Ok(FinetuneData {
            train: load_sessions(corpus)?,
            eval: cfg.paths.eval.as_deref().map(load_sessions).transpose()?,
        })
    }
}

pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub log: Vec<StepLog>,
}

/// Deterministic train/eval split of `data`.
fn split(cfg: &RunConfig, data: &FinetuneData) -> (Vec<DialogueSession>, Vec<DialogueSession>) {
    if let Some(eval) = &data.eval {
        return (data.train.clone(), eval.clone());
    }
    let holdout = cfg.finetune.holdout;
    if holdout <= 0.0 || data.train.len() < 2 {
        return (data.train.clone(), data.train.clone());
    }
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut setup_rng(cfg.train.seed, 0xE7A1));
    let k = ((holdout * data.train.len() as f64).ceil() as usize).clamp(1, data.train.len() - 1);
    let (train, eval) = order.split_at(data.train.len() - k);
    let pick = |ix: &[usize]| ix.iter().map(|&i| data.train[i].clone()).collect();
    (pick(train), pick(eval))
}

/// Copies every `enc.*` tensor of `from` into `into`, failing with the list
/// of tensors whose shapes disagree or that are missing.
fn load_encoder(into: &mut EncoderParams, from: &EncoderParams) -> Result<()> {
    let mut problems = Vec::new();
    let names: Vec<String> = into
        .store
        .names()
        .iter()
        .filter(|n| n.starts_with("enc."))
        .cloned()
        .collect();
    for name in names {
        match from.store.get(&name) {
            Some(t) if t.same_shape(into.store.get(&name).expect("own tensor")) => {
                into.store.insert(name, t.clone());
            }
            Some(t) => problems.push(format!(
                "{name} checkpoint {:?} config {:?}",
                t.dims(),
                into.store.get(&name).expect("own tensor").dims()
            )),
            None => problems.push(format!("{name} missing from checkpoint")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ParamMismatch(problems.join("; ")))
    }
}

/// Parameters a fine-tuning run starts from. Fresh and checkpoint starts
/// draw identical heads and differ only in the `enc.*` tensors.
pub fn initial_params(
    cfg: &RunConfig,
    vocab: &Vocab,
    scheme: &LabelScheme,
    init: Option<&Checkpoint>,
) -> Result<EncoderParams> {
    let seed = cfg.train.seed;
    let mut params = EncoderParams::init(encoder_config(&cfg.encoder, vocab), &mut setup_rng(seed, 0))?;
    if let Some(ck) = init {
        load_encoder(&mut params, &ck.params)?;
    }
    init_heads(&mut params, cfg.finetune.task, scheme, &mut setup_rng(seed, 2));
    Ok(params)
}

/// Fine-tunes task heads and the encoder, then evaluates.
///
/// With `init`, the encoder starts from the checkpoint and its vocabulary;
/// without it ("no pretraining") everything is freshly initialized. Heads
/// are always fresh and drawn from the same stream either way.
pub fn finetune(
    cfg: &RunConfig,
    data: &FinetuneData,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let seed = cfg.train.seed;
    let task = f.task;
    let (train, eval) = split(cfg, data);
    let vocab = match init {
        Some(ck) => ck.vocab.clone(),
        None => Vocab::build(&token_corpus(&train), cfg.train.min_count)?,
    };
    let flatten = |sessions: &[DialogueSession]| -> Result<Vec<FlatSequence>> {
        sessions
            .iter()
            .filter(|s| s.task == task)
            .map(|s| flatten_session(s, &vocab, cfg.train.max_len))
            .collect()
    };
    let train_seqs = flatten(&train)?;
    let eval_seqs = flatten(&eval)?;
    if train_seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scheme = LabelScheme::from_sequences(task, &train_seqs);

    let mut params = initial_params(cfg, &vocab, &scheme, init)?;

    // (sequence, predicate) pairs for CSRL, sequences for SLU.
    let examples: Vec<(usize, usize)> = match task {
        Task::Csrl => train_seqs
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.predicates.iter().map(move |&p| (i, p)))
            .collect(),
        Task::Slu => (0..train_seqs.len()).map(|i| (i, 0)).collect(),
    };
    if examples.is_empty() {
        return Err(Error::Config(format!("no {task:?} training examples")));
    }
    let batch = effective_batch(f.batch_size, examples.len());
    let adam_cfg = AdamConfig {
        lr: f.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(params.store.tensors());
    let mut log = Vec::new();
    info!("finetune {task:?} seed {seed} steps {} batch_size {batch} lr {}", f.steps, f.lr);
    for step in 0..f.steps {
        let first = step * batch as u64;
        let items = batch_items(seed ^ 0xF1E7, examples.len(), first, batch);
        let results: Vec<(Vec<Tensor>, f64)> = items
            .par_iter()
            .map(|&e| {
                let (si, pred) = examples[e];
                let tape = Tape::new();
                let bound = params.store.bind(&tape);
                let loss = match task {
                    Task::Csrl => csrl_loss(&tape, &bound, &params, &scheme, &train_seqs[si], pred)?,
                    Task::Slu => slu_loss(&tape, &bound, &params, &scheme, &train_seqs[si])?,
                };
                let value = tape.item(loss)?;
                let grads = tape.backward(loss)?;
                Ok((bound.grads(&grads), value))
            })
            .collect::<Result<_>>()?;
        let total = results.iter().map(|(_, l)| l).sum::<f64>() / batch as f64;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                components: format!("{task:?} {total}"),
            });
        }
        let entry = StepLog {
            step: step + 1,
            total,
            mlm: None,
            sbo: None,
            pmo: None,
        };
        info!("{entry}");
        log.push(entry);
        let grads = reduce(results.into_iter().map(|(g, _)| g).collect());
        adam_step(params.store.tensors_mut(), &grads, &mut adam, &adam_cfg)?;
    }

    let report = evaluate(&params, &scheme, task, &eval_seqs)?;
    let checkpoint = Checkpoint {
        stage: Stage::Finetune,
        step: f.steps,
        seed,
        config: cfg.clone(),
        vocab,
        labels: Some(scheme),
        params,
        adam,
    };
    Ok(FinetuneOutcome {
        checkpoint,
        report,
        log,
    })
}

/// Scores a fine-tuned checkpoint on `sessions`.
pub fn evaluate_checkpoint(ck: &Checkpoint, sessions: &[DialogueSession]) -> Result<EvalReport> {
    let scheme = ck
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no task heads; fine-tune it first".into()))?;
    let task = ck.config.finetune.task;
    let seqs = sessions
        .iter()
        .filter(|s| s.task == task)
        .map(|s| flatten_session(s, &ck.vocab, ck.config.train.max_len))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&ck.params, scheme, task, &seqs)
}

/// Examples visited by consecutive steps, for tests of the sampling order.
pub fn example_order(seed: u64, n: usize, first: u64, count: usize) -> Vec<usize> {
    batch_items(seed, n, first, count)
}
