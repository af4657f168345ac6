use std::fmt;

use rayon::prelude::*;

use super::train::example_rng;
use crate::corpus::{FlatSequence, NounPhraseDistribution};
use crate::error::Result;
use crate::masking::{mask_budget, sample_plan, span_length_pmf, Action, MaskConfig, Scheme, SpanSource};

/// Empirical distributions over many sampled plans.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskStats {
    pub plans: usize,
    /// Plans whose size equals `mask_budget` of their sequence.
    pub budget_exact: usize,
    /// Plans whose size lies in `[1, ceil(rate * maskable)]`.
    pub budget_within: usize,
    pub masked_positions: usize,
    pub maskable_positions: usize,
    /// Span-level action draws, `[MaskToken, RandomToken, Keep]`.
    pub actions: [usize; 3],
    /// Lengths of geometric spans, index `l - 1`.
    pub span_lengths: Vec<usize>,
    pub token_spans: usize,
    pub geometric_spans: usize,
    pub np_spans: usize,
    pub geo_p: f64,
    pub max_span_len: usize,
}

impl MaskStats {
    fn empty(cfg: &MaskConfig) -> MaskStats {
        MaskStats {
            span_lengths: vec![0; cfg.max_span_len.max(1)],
            geo_p: cfg.geo_p,
            max_span_len: cfg.max_span_len,
            ..MaskStats::default()
        }
    }

    fn merge(mut self, o: MaskStats) -> MaskStats {
        self.plans += o.plans;
        self.budget_exact += o.budget_exact;
        self.budget_within += o.budget_within;
        self.masked_positions += o.masked_positions;
        self.maskable_positions += o.maskable_positions;
        for (a, b) in self.actions.iter_mut().zip(o.actions) {
            *a += b;
        }
        for (a, b) in self.span_lengths.iter_mut().zip(o.span_lengths) {
            *a += b;
        }
        self.token_spans += o.token_spans;
        self.geometric_spans += o.geometric_spans;
        self.np_spans += o.np_spans;
        self
    }

    pub fn action_fractions(&self) -> [f64; 3] {
        let total = self.actions.iter().sum::<usize>().max(1) as f64;
        self.actions.map(|c| c as f64 / total)
    }

    /// Share of span draws (geometric or noun phrase) that came from noun phrases.
    pub fn np_fraction(&self) -> f64 {
        let total = self.np_spans + self.geometric_spans;
        if total == 0 {
            0.0
        } else {
            self.np_spans as f64 / total as f64
        }
    }

    pub fn span_length_fractions(&self) -> Vec<f64> {
        let total = self.span_lengths.iter().sum::<usize>().max(1) as f64;
        self.span_lengths.iter().map(|&c| c as f64 / total).collect()
    }

    /// Total-variation distance between geometric span lengths and the
    /// clipped geometric mass function.
    pub fn span_length_tv(&self) -> f64 {
        let pmf = span_length_pmf(self.geo_p, self.max_span_len);
        0.5 * self
            .span_length_fractions()
            .iter()
            .zip(&pmf)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

impl fmt::Display for MaskStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.action_fractions();
        writeln!(f, "plans = {}", self.plans)?;
        writeln!(f, "budget_exact = {}", self.budget_exact)?;
        writeln!(f, "budget_within = {}", self.budget_within)?;
        writeln!(f, "masked_positions = {}", self.masked_positions)?;
        writeln!(f, "maskable_positions = {}", self.maskable_positions)?;
        writeln!(
            f,
            "actions = {} {} {} ({:.6} {:.6} {:.6})",
            self.actions[0], self.actions[1], self.actions[2], a[0], a[1], a[2]
        )?;
        writeln!(f, "token_spans = {}", self.token_spans)?;
        writeln!(f, "geometric_spans = {}", self.geometric_spans)?;
        writeln!(f, "np_spans = {}", self.np_spans)?;
        writeln!(f, "np_fraction = {:.6}", self.np_fraction())?;
        if self.geometric_spans == 0 {
            return writeln!(f, "span_length_tv = n/a");
        }
        let pmf = span_length_pmf(self.geo_p, self.max_span_len);
        for (l, (c, p)) in self.span_lengths.iter().zip(pmf).enumerate() {
            writeln!(f, "span_length.{} = {} (expected {:.6})", l + 1, c, p)?;
        }
        writeln!(f, "span_length_tv = {:.6}", self.span_length_tv())
    }
}

/// Samples `samples` plans, cycling through `seqs`. Plan `k` uses the
/// stream `(seed, k)`, so the result does not depend on thread count.
pub fn mask_stats(
    seqs: &[FlatSequence],
    noun_phrases: &[NounPhraseDistribution],
    scheme: Scheme,
    cfg: &MaskConfig,
    samples: usize,
    seed: u64,
) -> Result<MaskStats> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(crate::error::Error::EmptyCorpus);
    }
    const CHUNK: usize = 1024;
    let chunks: Vec<MaskStats> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut st = MaskStats::empty(cfg);
            for k in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let i = k % seqs.len();
                let seq = &seqs[i];
                let mut rng = example_rng(seed, k as u64);
                let plan = sample_plan(scheme, seq, noun_phrases.get(i), cfg, &mut rng)?;
                let m = seq.maskable_len();
                st.plans += 1;
                st.budget_exact += usize::from(plan.budget_used == mask_budget(m, cfg.rate));
                let cap = (cfg.rate * m as f64).ceil().max(1.0) as usize;
                st.budget_within += usize::from((1..=cap).contains(&plan.budget_used));
                st.masked_positions += plan.budget_used;
                st.maskable_positions += m;
                for s in &plan.spans {
                    st.actions[match s.action {
                        Action::MaskToken => 0,
                        Action::RandomToken => 1,
                        Action::Keep => 2,
                    }] += 1;
                    match s.source {
                        SpanSource::Token => st.token_spans += 1,
                        SpanSource::NounPhrase => st.np_spans += 1,
                        SpanSource::Geometric => {
                            st.geometric_spans += 1;
                            if let Some(c) = st.span_lengths.get_mut(s.len() - 1) {
                                *c += 1;
                            }
                        }
                    }
                }
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    Ok(chunks
        .into_iter()
        .fold(MaskStats::empty(cfg), MaskStats::merge))
}
