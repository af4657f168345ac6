use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dapt_core::corpus::{FlatSequence, NounPhraseDistribution};
use dapt_core::downstream::{self, EvalReport, SluFrame, SrlTuple};
use dapt_core::encoder::{EncoderConfig, EncoderParams};
use dapt_core::harness::Checkpoint;
use dapt_core::masking::{self, Action, MaskConfig, Scheme, SpanSource};
use dapt_core::{objectives, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Vocab", module = "dapt")]
struct PyVocab {
    inner: dapt_core::corpus::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Builds a vocabulary from tokenized lines; tokens seen fewer than
    /// `min_count` times map to `[UNK]`.
    #[new]
    #[pyo3(signature = (corpus, min_count = 1))]
    fn new(corpus: Vec<Vec<String>>, min_count: u64) -> PyResult<Self> {
        let inner = dapt_core::corpus::Vocab::build(&corpus, min_count).map_err(py_err)?;
        Ok(PyVocab { inner })
    }

    fn id_of(&self, token: &str) -> Option<usize> {
        self.inner.id_of(token)
    }

    fn token_of(&self, id: usize) -> Option<String> {
        self.inner.token_of(id).map(String::from)
    }

    /// Ids of `tokens`, unknown words as `[UNK]`.
    fn encode(&self, tokens: Vec<String>) -> Vec<usize> {
        tokens.iter().map(|t| self.inner.encode(t)).collect()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Encoder", module = "dapt")]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, d_model = 16, n_heads = 2, n_layers = 2, d_ff = 32, max_positions = 64, seed = 0))]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        max_positions: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = EncoderConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ff,
            max_positions,
            ..EncoderConfig::default()
        };
        let inner = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(PyEncoder { inner })
    }

    /// Encoder stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyEncoder { inner: ck.params })
    }

    fn forward(&self, token_ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let h = self.inner.forward(&token_ids, None).map_err(py_err)?;
        Ok((0..h.rows()).map(|i| h.row(i).to_vec()).collect())
    }

    fn impact(&self, token_ids: Vec<usize>, target: usize, perturbed: Vec<usize>) -> PyResult<f64> {
        objectives::impact(&self.inner, &token_ids, target, &perturbed).map_err(py_err)
    }

    fn impact_matrix(&self, token_ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let m = objectives::impact_matrix(&self.inner, &token_ids).map_err(py_err)?;
        Ok((0..m.n()).map(|i| m.row(i).to_vec()).collect())
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.scalar_count()
    }
}

#[pyfunction]
fn mask_budget(maskable_len: usize, rate: f64) -> usize {
    masking::mask_budget(maskable_len, rate)
}

#[pyfunction]
fn span_length_pmf(geo_p: f64, max_span_len: usize) -> Vec<f64> {
    masking::span_length_pmf(geo_p, max_span_len)
}

/// Samples a plan over `[CLS] content [SEP]`. Returns
/// `(start, end, action, source)` tuples in flat positions.
#[pyfunction]
#[pyo3(signature = (content_ids, scheme = "span", seed = 0, rate = 0.15, geo_p = 0.2, max_span_len = 10, alpha = 0.0, noun_phrases = None))]
#[allow(clippy::too_many_arguments)]
fn sample_plan(
    content_ids: Vec<usize>,
    scheme: &str,
    seed: u64,
    rate: f64,
    geo_p: f64,
    max_span_len: usize,
    alpha: f64,
    noun_phrases: Option<Vec<(usize, usize, f64)>>,
) -> PyResult<Vec<(usize, usize, &'static str, &'static str)>> {
    let scheme: Scheme = scheme.parse().map_err(py_err)?;
    let cfg = MaskConfig {
        rate,
        geo_p,
        max_span_len,
        alpha,
        ..MaskConfig::default()
    };
    cfg.validate().map_err(py_err)?;
    let seq = FlatSequence::from_content("py", &content_ids);
    let np = NounPhraseDistribution::new(
        noun_phrases
            .unwrap_or_default()
            .into_iter()
            .map(|(s, e, w)| ((s, e), w)),
    )
    .map_err(py_err)?;
    let plan = masking::sample_plan(scheme, &seq, Some(&np), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(py_err)?;
    Ok(plan
        .spans
        .iter()
        .map(|s| {
            let action = match s.action {
                Action::MaskToken => "mask",
                Action::RandomToken => "random",
                Action::Keep => "keep",
            };
            let source = match s.source {
                SpanSource::Token => "token",
                SpanSource::Geometric => "geometric",
                SpanSource::NounPhrase => "np",
            };
            (s.start, s.end, action, source)
        })
        .collect())
}

#[pyfunction]
fn encode_bio(n: usize, spans: Vec<(usize, usize, String)>) -> Vec<String> {
    downstream::encode_bio(n, &spans)
}

/// Lenient BIO decoding: an orphan `I-x` opens a span.
#[pyfunction]
#[pyo3(signature = (tags, special = None))]
fn decode_bio(tags: Vec<String>, special: Option<Vec<bool>>) -> Vec<(usize, usize, String)> {
    downstream::decode_bio(&tags, special.as_deref())
}

type SliceCounts = (usize, usize, usize, f64, f64, f64);

fn report_dict(r: &EvalReport) -> HashMap<String, SliceCounts> {
    r.slices
        .iter()
        .map(|(name, c)| (name.clone(), (c.tp, c.fp, c.fn_, c.precision(), c.recall(), c.f1())))
        .collect()
}

fn srl_tuples(ts: Vec<(usize, usize, usize, String, bool)>) -> Vec<SrlTuple> {
    ts.into_iter()
        .map(|(predicate, start, end, label, cross)| SrlTuple {
            predicate,
            start,
            end,
            label,
            cross,
        })
        .collect()
}

/// Tuples are `(predicate, start, end, label, cross)`. Returns
/// `{slice: (tp, fp, fn, precision, recall, f1)}` for `all`, `cross`, `intra`.
#[pyfunction]
fn csrl_f1(
    predicted: Vec<(usize, usize, usize, String, bool)>,
    gold: Vec<(usize, usize, usize, String, bool)>,
) -> HashMap<String, SliceCounts> {
    report_dict(&downstream::csrl_f1(&srl_tuples(predicted), &srl_tuples(gold)))
}

type Frame = (Vec<String>, Vec<(usize, usize, String)>);

fn frames(fs: Vec<Frame>) -> Vec<SluFrame> {
    fs.into_iter()
        .map(|(intents, slots)| SluFrame {
            intents: intents.into_iter().collect(),
            slots: slots.into_iter().collect::<BTreeSet<_>>(),
        })
        .collect()
}

/// Frames are `(intents, slots)` per utterance. Returns slices `intent`,
/// `slot` and `all`.
#[pyfunction]
fn slu_f1(predicted: Vec<Frame>, gold: Vec<Frame>) -> PyResult<HashMap<String, SliceCounts>> {
    let r = downstream::slu_f1(&frames(predicted), &frames(gold)).map_err(py_err)?;
    Ok(report_dict(&r))
}

#[pymodule]
fn dapt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(mask_budget, m)?)?;
    m.add_function(wrap_pyfunction!(span_length_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(sample_plan, m)?)?;
    m.add_function(wrap_pyfunction!(encode_bio, m)?)?;
    m.add_function(wrap_pyfunction!(decode_bio, m)?)?;
    m.add_function(wrap_pyfunction!(csrl_f1, m)?)?;
    m.add_function(wrap_pyfunction!(slu_f1, m)?)?;
    Ok(())
}
