//! Fine-tuning heads and evaluation for conversational semantic role
//! labeling (CSRL) and spoken language understanding (SLU).
//!
//! CSRL tags every token relative to one predicate; the predicate position is
//! marked by adding a learned indicator vector to its input embedding. SLU
//! predicts a set of intents from the `[CLS]` row and BIO slot tags per token.
//!
//! Head parameters live in the encoder's store under `csrl.*` and `slu.*`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FlatSequence, Task};
use crate::encoder::{encode, pooled_repr, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;

pub const OUTSIDE: &str = "O";

/// BIO tag inventory for span labels, plus the intent inventory for SLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    tags: Vec<String>,
    intents: Vec<String>,
    #[serde(skip)]
    tag_index: HashMap<String, usize>,
    #[serde(skip)]
    intent_index: HashMap<String, usize>,
}

impl LabelScheme {
    /// Tags are `O` followed by `B-ℓ`, `I-ℓ` for each distinct label in
    /// sorted order.
    pub fn new<L, I>(span_labels: L, intents: I) -> LabelScheme
    where
        L: IntoIterator<Item = String>,
        I: IntoIterator<Item = String>,
    {
        let labels: BTreeSet<String> = span_labels.into_iter().collect();
        let intents: BTreeSet<String> = intents.into_iter().collect();
        let mut tags = vec![OUTSIDE.to_string()];
        for l in labels {
            tags.push(format!("B-{l}"));
            tags.push(format!("I-{l}"));
        }
        LabelScheme::from_parts(tags, intents.into_iter().collect())
    }

    /// Collects role labels (CSRL) or slot labels and intents (SLU).
    pub fn from_sequences(task: Task, seqs: &[FlatSequence]) -> LabelScheme {
        match task {
            Task::Csrl => LabelScheme::new(
                seqs.iter().flat_map(|s| s.roles.iter().map(|r| r.label.clone())),
                std::iter::empty(),
            ),
            Task::Slu => LabelScheme::new(
                seqs.iter().flat_map(|s| s.slots.iter().map(|r| r.label.clone())),
                seqs.iter().flat_map(|s| s.intents.iter().cloned()),
            ),
        }
    }

    fn from_parts(tags: Vec<String>, intents: Vec<String>) -> LabelScheme {
        let tag_index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let intent_index = intents.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        LabelScheme {
            tags,
            intents,
            tag_index,
            intent_index,
        }
    }

    /// Restores the lookup tables after deserialization.
    pub fn reindexed(self) -> LabelScheme {
        LabelScheme::from_parts(self.tags, self.intents)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_index.get(intent).copied()
    }

    /// Tag ids for `n` positions with `spans` labeled. Unknown labels fall
    /// back to `O`.
    pub fn encode_spans(&self, n: usize, spans: &[(usize, usize, String)]) -> Vec<usize> {
        let tags = encode_bio(n, spans);
        tags.iter().map(|t| self.tag_id(t).unwrap_or(0)).collect()
    }

    pub fn tag_names(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.tags[i].as_str()).collect()
    }
}

/// Writes `B-ℓ I-ℓ ...` runs for `spans` over `n` positions of `O`.
pub fn encode_bio(n: usize, spans: &[(usize, usize, String)]) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); n];
    for (s, e, label) in spans {
        if *e >= n || s > e {
            continue;
        }
        tags[*s] = format!("B-{label}");
        for t in &mut tags[s + 1..=*e] {
            *t = format!("I-{label}");
        }
    }
    tags
}

/// Spans `(start, end, label)` from a BIO tag sequence.
///
/// An `I-ℓ` that does not continue an open `ℓ` span starts a new one.
/// Positions flagged in `special` are read as `O`. Malformed tags count as
/// `O`.
pub fn decode_bio<S: AsRef<str>>(tags: &[S], special: Option<&[bool]>) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = if special.is_some_and(|s| s.get(i).copied().unwrap_or(false)) {
            OUTSIDE
        } else {
            tag.as_ref()
        };
        let parsed = tag
            .split_once('-')
            .filter(|(p, l)| (*p == "B" || *p == "I") && !l.is_empty());
        match parsed {
            Some(("I", label)) if open.is_some_and(|(_, l)| l == label) => {}
            Some((_, label)) => {
                if let Some((s, l)) = open.take() {
                    spans.push((s, i - 1, l.to_string()));
                }
                open = Some((i, label));
            }
            None => {
                if let Some((s, l)) = open.take() {
                    spans.push((s, i - 1, l.to_string()));
                }
            }
        }
    }
    if let Some((s, l)) = open {
        spans.push((s, tags.len() - 1, l.to_string()));
    }
    spans
}

/// Adds freshly initialized heads for `task` to the encoder store.
pub fn init_heads<R: Rng + ?Sized>(
    params: &mut EncoderParams,
    task: Task,
    scheme: &LabelScheme,
    rng: &mut R,
) {
    let d = params.config.d_model;
    let std = params.config.init_std;
    let s = &mut params.store;
    match task {
        Task::Csrl => {
            s.normal("csrl.pred_emb", &[1, d], std, rng);
            s.normal("csrl.w", &[d, scheme.num_tags()], std, rng);
            s.insert("csrl.b", Tensor::zeros(&[scheme.num_tags()]));
        }
        Task::Slu => {
            s.normal("slu.intent.w", &[d, scheme.num_intents()], std, rng);
            s.insert("slu.intent.b", Tensor::zeros(&[scheme.num_intents()]));
            s.normal("slu.slot.w", &[d, scheme.num_tags()], std, rng);
            s.insert("slu.slot.b", Tensor::zeros(&[scheme.num_tags()]));
        }
    }
}

fn linear(tape: &Tape, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{prefix}.w"))?)?;
    tape.add_bias(y, p.var(&format!("{prefix}.b"))?)
}

/// Tag logits `[n, tags]` for the arguments of the predicate at `predicate`.
pub fn tag_forward(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    ids: &[usize],
    predicate: usize,
) -> Result<Var> {
    let n = ids.len();
    if predicate >= n {
        return Err(Error::InvalidPredicate { pos: predicate, len: n });
    }
    let mut onehot = Tensor::zeros(&[n, 1]);
    onehot.data_mut()[predicate] = 1.0;
    let indicator = tape.matmul(tape.constant(&onehot), p.var("csrl.pred_emb")?)?;
    let h = encode(tape, p, cfg, ids, None, Some(indicator))?;
    linear(tape, p, "csrl", h)
}

/// Independent per-intent logits `[1, intents]` from the `[CLS]` row.
pub fn intent_forward(tape: &Tape, p: &Bound<'_>, h: Var) -> Result<Var> {
    linear(tape, p, "slu.intent", pooled_repr(tape, h)?)
}

/// Slot tag logits `[n, tags]`.
pub fn slot_forward(tape: &Tape, p: &Bound<'_>, h: Var) -> Result<Var> {
    linear(tape, p, "slu.slot", h)
}

fn content_rows(seq: &FlatSequence) -> Vec<usize> {
    seq.maskable_positions()
}

/// Mean tag cross-entropy over the content positions for one predicate.
pub fn csrl_loss(
    tape: &Tape,
    p: &Bound<'_>,
    params: &EncoderParams,
    scheme: &LabelScheme,
    seq: &FlatSequence,
    predicate: usize,
) -> Result<Var> {
    let logits = tag_forward(tape, p, &params.config, &seq.token_ids, predicate)?;
    let rows = content_rows(seq);
    let spans: Vec<(usize, usize, String)> = seq
        .roles
        .iter()
        .filter(|r| r.predicate == predicate)
        .map(|r| (r.start, r.end, r.label.clone()))
        .collect();
    let gold = scheme.encode_spans(seq.len(), &spans);
    let targets: Vec<usize> = rows.iter().map(|&r| gold[r]).collect();
    tape.cross_entropy(tape.gather_rows(logits, &rows)?, &targets)
}

/// Intent binary cross-entropy plus slot-tag cross-entropy.
pub fn slu_loss(
    tape: &Tape,
    p: &Bound<'_>,
    params: &EncoderParams,
    scheme: &LabelScheme,
    seq: &FlatSequence,
) -> Result<Var> {
    let h = encode(tape, p, &params.config, &seq.token_ids, None, None)?;
    let rows = content_rows(seq);
    let spans: Vec<(usize, usize, String)> =
        seq.slots.iter().map(|s| (s.start, s.end, s.label.clone())).collect();
    let gold = scheme.encode_spans(seq.len(), &spans);
    let targets: Vec<usize> = rows.iter().map(|&r| gold[r]).collect();
    let slot = tape.cross_entropy(tape.gather_rows(slot_forward(tape, p, h)?, &rows)?, &targets)?;
    if scheme.num_intents() == 0 {
        return Ok(slot);
    }
    let mut bits = vec![0.0; scheme.num_intents()];
    for i in seq.intents.iter().filter_map(|i| scheme.intent_id(i)) {
        bits[i] = 1.0;
    }
    let intent = tape.bce_with_logits(intent_forward(tape, p, h)?, &bits)?;
    tape.add(intent, slot)
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

fn specials(seq: &FlatSequence) -> Vec<bool> {
    (0..seq.len()).map(|p| seq.is_special(p)).collect()
}

/// A predicate-argument pair with its role.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SrlTuple {
    pub predicate: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
    /// The argument starts in a different turn than the predicate.
    pub cross: bool,
}

impl SrlTuple {
    pub fn new(seq: &FlatSequence, predicate: usize, start: usize, end: usize, label: &str) -> Self {
        SrlTuple {
            predicate,
            start,
            end,
            label: label.to_string(),
            cross: seq.turn_of[start] != seq.turn_of[predicate],
        }
    }
}

pub fn gold_tuples(seq: &FlatSequence) -> Vec<SrlTuple> {
    seq.roles
        .iter()
        .map(|r| SrlTuple::new(seq, r.predicate, r.start, r.end, &r.label))
        .collect()
}

/// Predicted tag ids for one predicate.
pub fn predict_tags(
    params: &EncoderParams,
    seq: &FlatSequence,
    predicate: usize,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let p = params.store.bind_constants(&tape);
    let logits = tag_forward(&tape, &p, &params.config, &seq.token_ids, predicate)?;
    Ok(argmax_rows(&tape.value(logits)))
}

/// Decoded arguments for every annotated predicate of `seq`.
pub fn predict_csrl(
    params: &EncoderParams,
    scheme: &LabelScheme,
    seq: &FlatSequence,
) -> Result<Vec<SrlTuple>> {
    let special = specials(seq);
    let mut out = Vec::new();
    for &pred in &seq.predicates {
        let tags = predict_tags(params, seq, pred)?;
        for (s, e, label) in decode_bio(&scheme.tag_names(&tags), Some(&special)) {
            out.push(SrlTuple::new(seq, pred, s, e, &label));
        }
    }
    Ok(out)
}

/// Intents and slot spans of one utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SluFrame {
    pub intents: BTreeSet<String>,
    pub slots: BTreeSet<(usize, usize, String)>,
}

impl SluFrame {
    pub fn gold(seq: &FlatSequence) -> SluFrame {
        SluFrame {
            intents: seq.intents.iter().cloned().collect(),
            slots: seq.slots.iter().map(|s| (s.start, s.end, s.label.clone())).collect(),
        }
    }
}

/// Intents with positive logit and decoded slot spans.
pub fn predict_slu(params: &EncoderParams, scheme: &LabelScheme, seq: &FlatSequence) -> Result<SluFrame> {
    let tape = Tape::new();
    let p = params.store.bind_constants(&tape);
    let h = encode(&tape, &p, &params.config, &seq.token_ids, None, None)?;
    let mut intents = BTreeSet::new();
    if scheme.num_intents() > 0 {
        let logits = tape.value(intent_forward(&tape, &p, h)?);
        for (i, &z) in logits.data().iter().enumerate() {
            if z > 0.0 {
                intents.insert(scheme.intents()[i].clone());
            }
        }
    }
    let tags = argmax_rows(&tape.value(slot_forward(&tape, &p, h)?));
    let slots = decode_bio(&scheme.tag_names(&tags), Some(&specials(seq)))
        .into_iter()
        .collect();
    Ok(SluFrame { intents, slots })
}

/// True positive, false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn of<T: Eq + std::hash::Hash>(predicted: &HashSet<T>, gold: &HashSet<T>) -> Counts {
        let tp = predicted.intersection(gold).count();
        Counts {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        match (self.is_empty(), self.tp + self.fp) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            (false, d) => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match (self.is_empty(), self.tp + self.fn_) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            (false, d) => self.tp as f64 / d as f64,
        }
    }

    /// `2PR / (P + R)`; 0 when `P + R = 0` and 1 when both sides are empty.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

/// Named metric slices: `all`, `cross`, `intra` for CSRL and `intent`,
/// `slot`, `all` for SLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub slices: Vec<(String, Counts)>,
}

impl EvalReport {
    pub fn counts(&self, slice: &str) -> Option<Counts> {
        self.slices.iter().find(|(n, _)| n == slice).map(|(_, c)| *c)
    }

    /// F1 of `slice`, or NaN when the report has no such slice.
    pub fn f1(&self, slice: &str) -> f64 {
        self.counts(slice).map_or(f64::NAN, |c| c.f1())
    }

    /// Slice totals summed over several reports of the same task.
    pub fn merge(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let slices = first
            .slices
            .iter()
            .map(|(name, _)| {
                let c = reports.iter().filter_map(|r| r.counts(name)).sum();
                (name.clone(), c)
            })
            .collect();
        Some(EvalReport {
            task: first.task,
            slices,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let task = match self.task {
            Task::Csrl => "csrl",
            Task::Slu => "slu",
        };
        writeln!(f, "task = {task}")?;
        for (name, c) in &self.slices {
            writeln!(
                f,
                "{name}: tp = {} fp = {} fn = {} precision = {:.6} recall = {:.6} f1 = {:.6}",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            )?;
        }
        Ok(())
    }
}

/// Micro-averaged tuple F1 overall and split by whether the argument
/// crosses turns.
pub fn csrl_f1(predicted: &[SrlTuple], gold: &[SrlTuple]) -> EvalReport {
    let slice = |keep: &dyn Fn(&SrlTuple) -> bool| {
        let key = |t: &SrlTuple| (t.predicate, t.start, t.end, t.label.clone());
        let p: HashSet<_> = predicted.iter().filter(|t| keep(t)).map(key).collect();
        let g: HashSet<_> = gold.iter().filter(|t| keep(t)).map(key).collect();
        Counts::of(&p, &g)
    };
    EvalReport {
        task: Task::Csrl,
        slices: vec![
            ("all".into(), slice(&|_| true)),
            ("cross".into(), slice(&|t| t.cross)),
            ("intra".into(), slice(&|t| !t.cross)),
        ],
    }
}

/// Micro F1 over intents, over slot tuples, and over both pooled.
/// `predicted[k]` and `gold[k]` describe the same utterance.
pub fn slu_f1(predicted: &[SluFrame], gold: &[SluFrame]) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape {
            op: "slu_f1",
            shapes: format!("{} predicted frames for {} gold", predicted.len(), gold.len()),
        });
    }
    let mut intent = Counts::default();
    let mut slot = Counts::default();
    for (p, g) in predicted.iter().zip(gold) {
        let set = |s: &BTreeSet<String>| s.iter().cloned().collect::<HashSet<_>>();
        intent = intent + Counts::of(&set(&p.intents), &set(&g.intents));
        let set = |s: &BTreeSet<(usize, usize, String)>| s.iter().cloned().collect::<HashSet<_>>();
        slot = slot + Counts::of(&set(&p.slots), &set(&g.slots));
    }
    Ok(EvalReport {
        task: Task::Slu,
        slices: vec![
            ("intent".into(), intent),
            ("slot".into(), slot),
            ("all".into(), intent + slot),
        ],
    })
}

/// Predicts and scores every sequence.
pub fn evaluate(
    params: &EncoderParams,
    scheme: &LabelScheme,
    task: Task,
    seqs: &[FlatSequence],
) -> Result<EvalReport> {
    match task {
        Task::Csrl => {
            // Micro averages pool counts, so per-sequence reports can be summed.
            let reports = seqs
                .iter()
                .map(|seq| Ok(csrl_f1(&predict_csrl(params, scheme, seq)?, &gold_tuples(seq))))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalReport::merge(&reports).unwrap_or_else(|| csrl_f1(&[], &[])))
        }
        Task::Slu => {
            let predicted = seqs
                .iter()
                .map(|s| predict_slu(params, scheme, s))
                .collect::<Result<Vec<_>>>()?;
            let gold: Vec<SluFrame> = seqs.iter().map(SluFrame::gold).collect();
            slu_f1(&predicted, &gold)
        }
    }
}
