//! Mask plans for three corruption schemes (independent tokens, clipped
//! geometric spans, noun-phrase biased spans) and 80/10/10 corruption.
//!
//! Every sampler takes the caller's generator and nothing else random, so a
//! fixed `(sequence, config, seed)` reproduces the same plan bit for bit.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FlatSequence, NounPhraseDistribution, Vocab, MASK};
use crate::error::{Error, Result};

/// Consecutive rejected placements after which a span sampler stops.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpanSource {
    Token,
    Geometric,
    NounPhrase,
}

/// Inclusive span of masked positions sharing one action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedSpan {
    pub start: usize,
    pub end: usize,
    pub action: Action,
    pub source: SpanSource,
}

impl MaskedSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    /// Disjoint spans sorted by start.
    pub spans: Vec<MaskedSpan>,
    /// Sorted union of all span positions.
    pub positions: Vec<usize>,
    pub budget_used: usize,
}

impl MaskPlan {
    pub fn from_spans(mut spans: Vec<MaskedSpan>) -> MaskPlan {
        spans.sort_by_key(|s| s.start);
        let positions: Vec<usize> = spans.iter().flat_map(|s| s.start..=s.end).collect();
        MaskPlan {
            budget_used: positions.len(),
            spans,
            positions,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Action at every plan position, aligned with `positions`.
    pub fn actions(&self) -> Vec<Action> {
        self.spans
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.action, s.len()))
            .collect()
    }

    /// Checks the plan invariants against `seq`.
    pub fn validate(&self, seq: &FlatSequence) -> Result<()> {
        let mut last_end: Option<usize> = None;
        for s in &self.spans {
            if s.start > s.end || s.end >= seq.len() {
                return Err(Error::PlanMismatch(format!(
                    "span ({}, {}) for sequence of length {}",
                    s.start,
                    s.end,
                    seq.len()
                )));
            }
            if last_end.is_some_and(|e| s.start <= e) {
                return Err(Error::PlanMismatch(format!(
                    "span ({}, {}) overlaps its predecessor",
                    s.start, s.end
                )));
            }
            if (s.start..=s.end).any(|p| seq.is_special(p)) {
                return Err(Error::PlanMismatch(format!(
                    "span ({}, {}) covers a special position",
                    s.start, s.end
                )));
            }
            last_end = Some(s.end);
        }
        if self.budget_used != self.positions.len() {
            return Err(Error::PlanMismatch("budget_used disagrees with positions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Token,
    Span,
    Np,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Scheme::Token),
            "span" => Ok(Scheme::Span),
            "np" => Ok(Scheme::Np),
            other => Err(Error::Config(format!("unknown masking scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub rate: f64,
    /// Probabilities of `[MaskToken, RandomToken, Keep]`.
    pub action_probs: [f64; 3],
    pub geo_p: f64,
    pub max_span_len: usize,
    pub alpha: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rate: 0.15,
            action_probs: [0.8, 0.1, 0.1],
            geo_p: 0.2,
            max_span_len: 10,
            alpha: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad(format!("masking.rate {} must lie in (0, 1)", self.rate));
        }
        if self.action_probs.iter().any(|p| !(*p >= 0.0))
            || (self.action_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "masking.action_probs {:?} must be nonnegative and sum to 1",
                self.action_probs
            ));
        }
        if !(self.geo_p > 0.0 && self.geo_p < 1.0) {
            return bad(format!("masking.geo_p {} must lie in (0, 1)", self.geo_p));
        }
        if self.max_span_len < 1 {
            return bad("masking.max_span_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("masking.alpha {} must lie in [0, 1]", self.alpha));
        }
        Ok(())
    }
}

/// `round(rate * maskable_len)`, at least 1 and at most `maskable_len`.
pub fn mask_budget(maskable_len: usize, rate: f64) -> usize {
    let b = (rate * maskable_len as f64).round() as usize;
    b.max(1).min(maskable_len)
}

/// Normalized mass of lengths `1..=max_span_len` under the clipped geometric.
pub fn span_length_pmf(geo_p: f64, max_span_len: usize) -> Vec<f64> {
    let z = 1.0 - (1.0 - geo_p).powi(max_span_len as i32);
    (1..=max_span_len)
        .map(|l| geo_p * (1.0 - geo_p).powi(l as i32 - 1) / z)
        .collect()
}

pub fn sample_action<R: Rng + ?Sized>(probs: &[f64; 3], rng: &mut R) -> Action {
    let u: f64 = rng.random();
    if u < probs[0] {
        Action::MaskToken
    } else if u < probs[0] + probs[1] {
        Action::RandomToken
    } else {
        Action::Keep
    }
}

/// Inverse-CDF draw from the clipped geometric on `1..=max_span_len`.
pub fn sample_span_length<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> usize {
    if cfg.max_span_len <= 1 {
        return 1;
    }
    let pmf = span_length_pmf(cfg.geo_p, cfg.max_span_len);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    cfg.max_span_len
}

/// Uniformly chosen non-special positions, each with its own action.
pub fn sample_token_mask<R: Rng + ?Sized>(
    seq: &FlatSequence,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::PlanMismatch("no maskable positions".into()));
    }
    let budget = mask_budget(maskable.len(), cfg.rate);
    let mut chosen: Vec<usize> = index::sample(rng, maskable.len(), budget)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    chosen.sort_unstable();
    let spans = chosen
        .into_iter()
        .map(|p| MaskedSpan {
            start: p,
            end: p,
            action: sample_action(&cfg.action_probs, rng),
            source: SpanSource::Token,
        })
        .collect();
    Ok(MaskPlan::from_spans(spans))
}

/// Contiguous spans with clipped-geometric lengths until the budget is met.
pub fn sample_span_mask<R: Rng + ?Sized>(
    seq: &FlatSequence,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    sample_spans(seq, None, cfg, rng)
}

/// Like [`sample_span_mask`], but each span comes from `npdist` with
/// probability `cfg.alpha`. An empty distribution means pure geometric.
pub fn sample_np_mask<R: Rng + ?Sized>(
    seq: &FlatSequence,
    npdist: &NounPhraseDistribution,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    sample_spans(seq, Some(npdist), cfg, rng)
}

/// Shared span sampler.
///
/// Each span slot first fixes its source (and, for geometric spans, its
/// length); placements are then redrawn until one is accepted, so rejections
/// do not skew the accepted length or source mix. A span longer than the
/// remaining budget is truncated to it; overlapping spans and spans that
/// cover a special position are rejected.
fn sample_spans<R: Rng + ?Sized>(
    seq: &FlatSequence,
    npdist: Option<&NounPhraseDistribution>,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::PlanMismatch("no maskable positions".into()));
    }
    let n = seq.len();
    let budget = mask_budget(maskable.len(), cfg.rate);

    let np_spans: Vec<(usize, usize)>;
    let np_index = match npdist {
        Some(d) if !d.is_empty() && cfg.alpha > 0.0 => {
            let probs = d.probabilities();
            np_spans = probs.iter().map(|(k, _)| *k).collect();
            Some(
                WeightedIndex::new(probs.iter().map(|(_, p)| *p))
                    .map_err(|e| Error::Config(format!("noun phrase weights: {e}")))?,
            )
        }
        _ => {
            np_spans = Vec::new();
            None
        }
    };

    let mut occupied = vec![false; n];
    let fits = |occupied: &[bool], s: usize, e: usize| {
        e < n && (s..=e).all(|p| !seq.is_special(p) && !occupied[p])
    };

    let mut spans = Vec::new();
    let mut used = 0;
    let mut rejections = 0;
    'slots: while used < budget {
        let from_np = match &np_index {
            Some(_) if cfg.alpha >= 1.0 => true,
            Some(_) => rng.random::<f64>() < cfg.alpha,
            None => false,
        };
        let length = if from_np {
            0
        } else {
            sample_span_length(cfg, rng).min(budget - used)
        };
        loop {
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                break 'slots;
            }
            let (s, e) = if from_np {
                let (s, e) = np_spans[np_index.as_ref().expect("np").sample(rng)];
                (s, e.min(s + (budget - used) - 1))
            } else {
                let s = maskable[rng.random_range(0..maskable.len())];
                (s, s + length - 1)
            };
            if !fits(&occupied, s, e) {
                rejections += 1;
                continue;
            }
            rejections = 0;
            for o in &mut occupied[s..=e] {
                *o = true;
            }
            used += e - s + 1;
            spans.push(MaskedSpan {
                start: s,
                end: e,
                action: sample_action(&cfg.action_probs, rng),
                source: if from_np {
                    SpanSource::NounPhrase
                } else {
                    SpanSource::Geometric
                },
            });
            break;
        }
    }
    if spans.is_empty() {
        let p = maskable[rng.random_range(0..maskable.len())];
        spans.push(MaskedSpan {
            start: p,
            end: p,
            action: sample_action(&cfg.action_probs, rng),
            source: SpanSource::Geometric,
        });
    }
    Ok(MaskPlan::from_spans(spans))
}

/// Draws replacement tokens from the training-corpus unigram distribution
/// over non-special ids.
#[derive(Clone, Debug)]
pub struct UnigramSampler {
    index: Option<WeightedIndex<f64>>,
}

impl UnigramSampler {
    pub fn new(vocab: &Vocab) -> Self {
        UnigramSampler {
            index: WeightedIndex::new(vocab.unigram_weights()).ok(),
        }
    }

    /// `None` when the vocabulary has no non-special token with a count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        self.index.as_ref().map(|d| d.sample(rng))
    }
}

/// Corrupted copy of `seq.token_ids` under `plan`.
pub fn apply_mask<R: Rng + ?Sized>(
    seq: &FlatSequence,
    plan: &MaskPlan,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<usize>> {
    apply_mask_with(seq, plan, &UnigramSampler::new(vocab), rng)
}

pub fn apply_mask_with<R: Rng + ?Sized>(
    seq: &FlatSequence,
    plan: &MaskPlan,
    unigram: &UnigramSampler,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if let Some(s) = plan.spans.iter().find(|s| s.end >= seq.len()) {
        return Err(Error::PlanMismatch(format!(
            "span ({}, {}) for sequence of length {}",
            s.start,
            s.end,
            seq.len()
        )));
    }
    let mut out = seq.token_ids.clone();
    for span in &plan.spans {
        for p in span.start..=span.end {
            match span.action {
                Action::MaskToken => out[p] = MASK,
                Action::RandomToken => {
                    if let Some(id) = unigram.sample(rng) {
                        out[p] = id;
                    }
                }
                Action::Keep => {}
            }
        }
    }
    Ok(out)
}

/// Samples a plan with the configured scheme. `npdist` is only read for
/// [`Scheme::Np`].
pub fn sample_plan<R: Rng + ?Sized>(
    scheme: Scheme,
    seq: &FlatSequence,
    npdist: Option<&NounPhraseDistribution>,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    match scheme {
        Scheme::Token => sample_token_mask(seq, cfg, rng),
        Scheme::Span => sample_span_mask(seq, cfg, rng),
        Scheme::Np => match npdist {
            Some(d) => sample_np_mask(seq, d, cfg, rng),
            None => sample_span_mask(seq, cfg, rng),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_of(n_content: usize) -> FlatSequence {
        let ids: Vec<usize> = (0..n_content).map(|i| 5 + i % 20).collect();
        FlatSequence::from_content("t", &ids)
    }

    fn two_segments() -> FlatSequence {
        // [CLS] a b [SEP] c d [SEP]
        let mut s = FlatSequence::from_content("t", &[5, 6, 7, 8]);
        s.token_ids = vec![CLS, 5, 6, SEP, 7, 8, SEP];
        s.source = vec![None, Some((0, 0)), Some((0, 1)), None, Some((1, 0)), Some((1, 1)), None];
        s.turn_of = vec![0, 0, 0, 0, 1, 1, 1];
        s
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(mask_budget(20, 0.15), 3);
        assert_eq!(mask_budget(3, 0.15), 1);
        assert_eq!(mask_budget(10, 0.15), 2);
    }

    #[test]
    fn token_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sample_token_mask(&seq_of(20), &MaskConfig::default(), &mut rng).unwrap();
        assert_eq!(plan.budget_used, 3);
        assert!(plan.spans.iter().all(|s| s.len() == 1));
        let plan = sample_token_mask(&seq_of(3), &MaskConfig::default(), &mut rng).unwrap();
        assert_eq!(plan.budget_used, 1);
    }

    #[test]
    fn geometric_first_mass() {
        let pmf = span_length_pmf(0.2, 10);
        // 0.2 / (1 - 0.8^10)
        assert!((pmf[0] - 0.2 / 0.892_625_817_6).abs() < 1e-9);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn max_span_len_one_always_one() {
        let cfg = MaskConfig {
            max_span_len: 1,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| sample_span_length(&cfg, &mut rng) == 1));
    }

    #[test]
    fn span_truncated_to_remaining_budget() {
        // budget 3; lengths near-uniform on 1..=10, so most first draws exceed it
        let cfg = MaskConfig {
            geo_p: 1e-6,
            ..MaskConfig::default()
        };
        let seq = seq_of(20);
        let mut single_truncated = 0;
        for seed in 0..200 {
            let plan = sample_span_mask(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(plan.budget_used, 3);
            if plan.spans.len() == 1 {
                assert_eq!(plan.spans[0].len(), 3);
                single_truncated += 1;
            }
        }
        assert!(single_truncated > 100, "{single_truncated}");
    }

    #[test]
    fn spans_avoid_specials() {
        let seq = two_segments();
        let cfg = MaskConfig {
            rate: 0.5,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let plan = sample_span_mask(&seq, &cfg, &mut rng).unwrap();
            plan.validate(&seq).unwrap();
            assert!(!plan.positions.iter().any(|p| [0, 3, 6].contains(p)));
        }
    }

    #[test]
    fn alpha_zero_matches_span_mask() {
        let seq = seq_of(40);
        let np = NounPhraseDistribution::new([((2, 4), 1.0), ((10, 10), 3.0)]).unwrap();
        let cfg = MaskConfig::default();
        for seed in 0..20 {
            let a = sample_span_mask(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_np_mask(&seq, &np, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn alpha_one_single_np_span() {
        let seq = seq_of(60);
        let np = NounPhraseDistribution::new([((2, 4), 1.0)]).unwrap();
        let cfg = MaskConfig {
            alpha: 1.0,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = sample_np_mask(&seq, &np, &cfg, &mut rng).unwrap();
        assert_eq!(plan.spans.len(), 1);
        assert_eq!((plan.spans[0].start, plan.spans[0].end), (2, 4));
        assert_eq!(plan.spans[0].source, SpanSource::NounPhrase);
    }

    #[test]
    fn apply_mask_actions() {
        let seq = seq_of(6);
        let vocab = Vocab::from_parts(
            crate::corpus::SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain((0..20).map(|i| format!("w{i}")))
                .collect(),
            vec![1; 25],
        )
        .unwrap();
        let plan = MaskPlan::from_spans(vec![
            MaskedSpan {
                start: 4,
                end: 4,
                action: Action::MaskToken,
                source: SpanSource::Token,
            },
            MaskedSpan {
                start: 2,
                end: 3,
                action: Action::Keep,
                source: SpanSource::Geometric,
            },
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_mask(&seq, &plan, &vocab, &mut rng).unwrap();
        assert_eq!(out[4], MASK);
        assert_eq!(out[2..4], seq.token_ids[2..4]);
        assert_eq!(out[1], seq.token_ids[1]);

        let bad = MaskPlan::from_spans(vec![MaskedSpan {
            start: 40,
            end: 40,
            action: Action::Keep,
            source: SpanSource::Token,
        }]);
        assert!(apply_mask(&seq, &bad, &vocab, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        let bad = MaskConfig {
            action_probs: [0.5, 0.1, 0.1],
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskConfig {
            rate: 1.0,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
