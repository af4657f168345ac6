//! Pretraining losses and the perturbation-impact probe.
//!
//! The impact of position `j` on position `i` is the Euclidean distance
//! between the encoder row `i` with `i` masked, and the same row with both
//! `i` and `j` masked. The perturbation-masking loss averages that impact of
//! the predicates on every masked position, clipped at `pmo_clip`, over the
//! plan size `|Y|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CLS, MASK, PAD, SEP};
use crate::encoder::{
    encode, encode_unbiased, output_logits, span_boundary_reprs, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PmoMode {
    Exact,
    Batched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub use_mlm: bool,
    pub use_sbo: bool,
    pub use_pmo: bool,
    pub w_mlm: f64,
    pub w_sbo: f64,
    pub w_pmo: f64,
    /// `-1` maximizes impact (loss is minus the mean impact); `+1` minimizes it.
    pub pmo_sign: f64,
    pub pmo_clip: f64,
    pub pmo_mode: PmoMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            use_mlm: true,
            use_sbo: false,
            use_pmo: false,
            w_mlm: 1.0,
            w_sbo: 1.0,
            w_pmo: 1.0,
            pmo_sign: -1.0,
            pmo_clip: 5.0,
            pmo_mode: PmoMode::Exact,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_mlm || self.use_sbo || self.use_pmo) {
            return Err(Error::Config("all objectives disabled".into()));
        }
        if !(self.pmo_clip > 0.0) {
            return Err(Error::Config(format!(
                "objectives.pmo_clip {} must be positive",
                self.pmo_clip
            )));
        }
        if self.pmo_sign != 1.0 && self.pmo_sign != -1.0 {
            return Err(Error::Config(format!(
                "objectives.pmo_sign {} must be +1 or -1",
                self.pmo_sign
            )));
        }
        Ok(())
    }
}

fn is_structural(id: usize) -> bool {
    matches!(id, PAD | MASK | CLS | SEP)
}

/// Mean cross-entropy of the original tokens at the plan positions.
pub fn mlm_loss(
    tape: &Tape,
    p: &Bound<'_>,
    h: Var,
    plan: &MaskPlan,
    original_ids: &[usize],
) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let rows = tape.gather_rows(h, &plan.positions)?;
    let logits = output_logits(tape, p, rows)?;
    let targets: Vec<usize> = plan.positions.iter().map(|&i| original_ids[i]).collect();
    tape.cross_entropy(logits, &targets)
}

/// Mean cross-entropy of the original tokens scored from span-boundary
/// representations.
pub fn sbo_loss(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    h: Var,
    plan: &MaskPlan,
    original_ids: &[usize],
) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let targets: Vec<(usize, usize, usize)> = plan
        .spans
        .iter()
        .flat_map(|s| (s.start..=s.end).map(move |i| (s.start, s.end, i)))
        .collect();
    let y = span_boundary_reprs(tape, p, cfg, h, &targets)?;
    let logits = output_logits(tape, p, y)?;
    let gold: Vec<usize> = targets.iter().map(|&(_, _, i)| original_ids[i]).collect();
    tape.cross_entropy(logits, &gold)
}

fn check_impact_args(base_ids: &[usize], target: usize, perturbed: &[usize]) -> Result<()> {
    if perturbed.contains(&target) {
        return Err(Error::TargetPerturbed(target));
    }
    for &pos in perturbed.iter().chain(std::iter::once(&target)) {
        if pos >= base_ids.len() {
            return Err(Error::shape(
                "impact",
                format!("position {pos} out of range for length {}", base_ids.len()),
            ));
        }
        if is_structural(base_ids[pos]) {
            return Err(Error::shape(
                "impact",
                format!("position {pos} holds a special token"),
            ));
        }
    }
    Ok(())
}

/// Impact of masking `perturbed` on the representation of masked `target`,
/// recorded on `tape`. An empty `perturbed` yields the constant 0.
pub fn impact_on_tape(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    base_ids: &[usize],
    target: usize,
    perturbed: &[usize],
) -> Result<Var> {
    check_impact_args(base_ids, target, perturbed)?;
    if perturbed.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mut first = base_ids.to_vec();
    first[target] = MASK;
    let mut second = first.clone();
    for &j in perturbed {
        second[j] = MASK;
    }
    let h1 = encode_unbiased(tape, p, cfg, &first)?;
    let h2 = encode_unbiased(tape, p, cfg, &second)?;
    tape.euclidean_distance(tape.gather_rows(h1, &[target])?, tape.gather_rows(h2, &[target])?)
}

/// Scalar impact without recording gradients.
pub fn impact(
    params: &EncoderParams,
    base_ids: &[usize],
    target: usize,
    perturbed: &[usize],
) -> Result<f64> {
    check_impact_args(base_ids, target, perturbed)?;
    if perturbed.is_empty() {
        return Ok(0.0);
    }
    let tape = Tape::new();
    let bound = params.store.bind_constants(&tape);
    let f = impact_on_tape(&tape, &bound, &params.config, base_ids, target, perturbed)?;
    tape.item(f)
}

/// Row-major `n × n` matrix of pairwise impacts.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpactMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ImpactMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Entry `(i, j)` is the impact of `j` on `i`. The first-stage forward pass
/// for each row is shared across its columns. Diagonal and special entries
/// are 0.
pub fn impact_matrix(params: &EncoderParams, base_ids: &[usize]) -> Result<ImpactMatrix> {
    let n = base_ids.len();
    if n < 2 {
        return Err(Error::shape("impact_matrix", format!("length {n} < 2")));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut row = vec![0.0; n];
            if is_structural(base_ids[i]) {
                return Ok(row);
            }
            let mut first = base_ids.to_vec();
            first[i] = MASK;
            let h1 = params.forward(&first, None)?;
            for j in 0..n {
                if j == i || is_structural(base_ids[j]) {
                    continue;
                }
                let mut second = first.clone();
                second[j] = MASK;
                let h2 = params.forward(&second, None)?;
                row[j] = distance(h1.row(i), h2.row(i));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(ImpactMatrix {
        n,
        data: rows.concat(),
    })
}

/// Perturbation-masking loss over the masked positions of `plan` that are
/// not themselves predicates. Constant 0 when there is nothing to perturb.
pub fn pmo_loss(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    base_ids: &[usize],
    plan: &MaskPlan,
    predicates: &[usize],
    ocfg: &ObjectiveConfig,
) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let targets: Vec<usize> = plan
        .positions
        .iter()
        .copied()
        .filter(|t| !predicates.contains(t))
        .collect();
    if predicates.is_empty() || targets.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(targets.len());
    match ocfg.pmo_mode {
        PmoMode::Exact => {
            for &t in &targets {
                let f = impact_on_tape(tape, p, cfg, base_ids, t, predicates)?;
                terms.push(tape.clip_max(f, ocfg.pmo_clip));
            }
        }
        PmoMode::Batched => {
            check_impact_args(base_ids, targets[0], predicates)?;
            let mut first = base_ids.to_vec();
            for &t in &plan.positions {
                first[t] = MASK;
            }
            let mut second = first.clone();
            for &j in predicates {
                second[j] = MASK;
            }
            let h1 = encode_unbiased(tape, p, cfg, &first)?;
            let h2 = encode_unbiased(tape, p, cfg, &second)?;
            for &t in &targets {
                let d = tape.euclidean_distance(
                    tape.gather_rows(h1, &[t])?,
                    tape.gather_rows(h2, &[t])?,
                )?;
                terms.push(tape.clip_max(d, ocfg.pmo_clip));
            }
        }
    }
    let total = tape.add_all(&terms)?.expect("non-empty targets");
    Ok(tape.scale(total, ocfg.pmo_sign / plan.len() as f64))
}

/// Weighted loss and the enabled components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mlm: Option<Var>,
    pub sbo: Option<Var>,
    pub pmo: Option<Var>,
}

/// Inputs shared by every objective for one sequence.
pub struct ObjectiveInputs<'a> {
    pub original_ids: &'a [usize],
    pub corrupted_ids: &'a [usize],
    pub plan: &'a MaskPlan,
    pub predicates: &'a [usize],
}

/// `w_mlm·L_MLM + w_sbo·L_SBO + w_pmo·L_PMO` over the enabled terms. MLM and
/// SBO share one forward pass over the corrupted sequence.
pub fn combined_loss(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    ocfg: &ObjectiveConfig,
    inputs: &ObjectiveInputs<'_>,
) -> Result<LossParts> {
    ocfg.validate()?;
    let h = if ocfg.use_mlm || ocfg.use_sbo {
        Some(encode(tape, p, cfg, inputs.corrupted_ids, None, None)?)
    } else {
        None
    };
    let mut terms = Vec::new();
    let mlm = match (ocfg.use_mlm, h) {
        (true, Some(h)) => {
            let l = mlm_loss(tape, p, h, inputs.plan, inputs.original_ids)?;
            terms.push(if ocfg.w_mlm == 1.0 { l } else { tape.scale(l, ocfg.w_mlm) });
            Some(l)
        }
        _ => None,
    };
    let sbo = match (ocfg.use_sbo, h) {
        (true, Some(h)) => {
            let l = sbo_loss(tape, p, cfg, h, inputs.plan, inputs.original_ids)?;
            terms.push(if ocfg.w_sbo == 1.0 { l } else { tape.scale(l, ocfg.w_sbo) });
            Some(l)
        }
        _ => None,
    };
    let pmo = if ocfg.use_pmo {
        let l = pmo_loss(
            tape,
            p,
            cfg,
            inputs.original_ids,
            inputs.plan,
            inputs.predicates,
            ocfg,
        )?;
        terms.push(if ocfg.w_pmo == 1.0 { l } else { tape.scale(l, ocfg.w_pmo) });
        Some(l)
    } else {
        None
    };
    let total = tape.add_all(&terms)?.expect("at least one objective");
    Ok(LossParts {
        total,
        mlm,
        sbo,
        pmo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{Action, MaskedSpan, SpanSource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(diag: bool) -> EncoderParams {
        let cfg = EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_positions: 12,
            init_std: 0.3,
            diag_attention: diag,
            ..EncoderConfig::default()
        };
        EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn span(start: usize, end: usize) -> MaskedSpan {
        MaskedSpan {
            start,
            end,
            action: Action::MaskToken,
            source: SpanSource::Geometric,
        }
    }

    #[test]
    fn empty_plan_errors() {
        let m = tiny(false);
        let tape = Tape::new();
        let b = m.store.bind(&tape);
        let h = encode(&tape, &b, &m.config, &[3, 7, 4], None, None).unwrap();
        assert!(matches!(
            mlm_loss(&tape, &b, h, &MaskPlan::default(), &[3, 7, 4]),
            Err(Error::EmptyPlan)
        ));
    }

    #[test]
    fn impact_rejects_target_in_perturbed() {
        let m = tiny(false);
        assert!(matches!(
            impact(&m, &[3, 7, 8, 4], 1, &[1, 2]),
            Err(Error::TargetPerturbed(1))
        ));
        assert_eq!(impact(&m, &[3, 7, 8, 4], 1, &[]).unwrap(), 0.0);
        assert!(impact(&m, &[3, 7, 8, 4], 1, &[2]).unwrap() > 0.0);
    }

    #[test]
    fn pmo_zero_without_predicates() {
        let m = tiny(false);
        let tape = Tape::new();
        let b = m.store.bind(&tape);
        let plan = MaskPlan::from_spans(vec![span(2, 3)]);
        let ids = [3, 7, 8, 9, 10, 4];
        let l = pmo_loss(&tape, &b, &m.config, &ids, &plan, &[], &ObjectiveConfig::default())
            .unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
        // every masked position is a predicate
        let l = pmo_loss(&tape, &b, &m.config, &ids, &plan, &[2, 3], &ObjectiveConfig::default())
            .unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
    }

    #[test]
    fn only_mlm_equals_mlm_loss() {
        let m = tiny(false);
        let plan = MaskPlan::from_spans(vec![span(2, 3)]);
        let ids = [3, 7, 8, 9, 10, 4];
        let corrupted = [3, 7, MASK, MASK, 10, 4];
        let tape = Tape::new();
        let b = m.store.bind(&tape);
        let parts = combined_loss(
            &tape,
            &b,
            &m.config,
            &ObjectiveConfig::default(),
            &ObjectiveInputs {
                original_ids: &ids,
                corrupted_ids: &corrupted,
                plan: &plan,
                predicates: &[],
            },
        )
        .unwrap();
        let h = encode(&tape, &b, &m.config, &corrupted, None, None).unwrap();
        let direct = mlm_loss(&tape, &b, h, &plan, &ids).unwrap();
        assert_eq!(tape.item(parts.total).unwrap(), tape.item(direct).unwrap());
    }

    #[test]
    fn all_disabled_errors() {
        let cfg = ObjectiveConfig {
            use_mlm: false,
            ..ObjectiveConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().to_string(), "invalid config: all objectives disabled");
    }
}
