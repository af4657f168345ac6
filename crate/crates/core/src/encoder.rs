//! Post-norm transformer encoder, span-boundary representation head, and
//! the vocabulary output projection.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `enc.tok_emb` | `[vocab, d]` |
//! | `enc.pos_emb` | `[max_positions, d]` |
//! | `enc.l{i}.h{h}.{wq,wk,wv}` | `[d, d/heads]` |
//! | `enc.l{i}.h{h}.{bq,bv}` | `[d/heads]` |
//! | `enc.l{i}.wo`, `enc.l{i}.bo` | `[d, d]`, `[d]` |
//! | `enc.l{i}.ff.{w1,b1,w2,b2}` | `[d, ff]`, `[ff]`, `[ff, d]`, `[d]` |
//! | `enc.l{i}.ln{1,2}.{g,b}` | `[d]` |
//! | `sbo.relpos` | `[max_span_len + 1, d]` |
//! | `sbo.{w1,b1}`, `sbo.{w2,b2}` | `[3d, d]`, `[d]`, `[d, d]`, `[d]` |
//! | `sbo.ln{1,2}.{g,b}` | `[d]` |
//! | `mlm.w`, `mlm.b` | `[d, vocab]`, `[vocab]` |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
    /// Largest relative position the span-boundary head can embed.
    pub max_span_len: usize,
    pub init_std: f64,
    /// Test hook: each position attends only to itself.
    pub diag_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_positions: 128,
            layer_norm_eps: 1e-12,
            max_span_len: 10,
            init_std: 0.02,
            diag_attention: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
            ("max_span_len", self.max_span_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("encoder.layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Encoder, span-boundary head and output projection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, dh, std) = (c.d_model, c.head_dim(), c.init_std);
        let mut s = ParamStore::new();
        s.normal("enc.tok_emb", &[c.vocab_size, d], std, rng);
        s.normal("enc.pos_emb", &[c.max_positions, d], std, rng);
        for l in 0..c.n_layers {
            for h in 0..c.n_heads {
                for m in ["q", "k", "v"] {
                    s.normal(format!("enc.l{l}.h{h}.w{m}"), &[d, dh], std, rng);
                }
                // A key bias only shifts each score row by a constant, which
                // softmax ignores.
                s.insert(format!("enc.l{l}.h{h}.bq"), Tensor::zeros(&[dh]));
                s.insert(format!("enc.l{l}.h{h}.bv"), Tensor::zeros(&[dh]));
            }
            s.normal(format!("enc.l{l}.wo"), &[d, d], std, rng);
            s.insert(format!("enc.l{l}.bo"), Tensor::zeros(&[d]));
            layer_norm_params(&mut s, &format!("enc.l{l}.ln1"), d);
            s.normal(format!("enc.l{l}.ff.w1"), &[d, c.d_ff], std, rng);
            s.insert(format!("enc.l{l}.ff.b1"), Tensor::zeros(&[c.d_ff]));
            s.normal(format!("enc.l{l}.ff.w2"), &[c.d_ff, d], std, rng);
            s.insert(format!("enc.l{l}.ff.b2"), Tensor::zeros(&[d]));
            layer_norm_params(&mut s, &format!("enc.l{l}.ln2"), d);
        }
        s.normal("sbo.relpos", &[c.max_span_len + 1, d], std, rng);
        s.normal("sbo.w1", &[3 * d, d], std, rng);
        s.insert("sbo.b1", Tensor::zeros(&[d]));
        layer_norm_params(&mut s, "sbo.ln1", d);
        s.normal("sbo.w2", &[d, d], std, rng);
        s.insert("sbo.b2", Tensor::zeros(&[d]));
        layer_norm_params(&mut s, "sbo.ln2", d);
        s.normal("mlm.w", &[d, c.vocab_size], std, rng);
        s.insert("mlm.b", Tensor::zeros(&[c.vocab_size]));
        Ok(EncoderParams { config, store: s })
    }

    /// Contextual vectors `[n, d_model]` without recording gradients.
    pub fn forward(&self, token_ids: &[usize], valid: Option<&[bool]>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.store.bind_constants(&tape);
        let h = encode(&tape, &bound, &self.config, token_ids, valid, None)?;
        Ok(tape.value(h))
    }

    /// `y_i` for position `i` of span `(start, end)` given contextual vectors `h`.
    pub fn span_boundary_repr(&self, h: &Tensor, start: usize, end: usize, i: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.store.bind_constants(&tape);
        let hv = tape.constant(h);
        let y = span_boundary_reprs(&tape, &bound, &self.config, hv, &[(start, end, i)])?;
        let row = tape.value(y);
        Ok(Tensor::vector(row.into_data()))
    }
}

/// Encoder forward on a tape.
///
/// `valid[j] == false` excludes key `j` from every attention row.
/// `extra`, when given, is an `[n, d]` input added to the embedding sum.
pub fn encode(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    valid: Option<&[bool]>,
    extra: Option<Var>,
) -> Result<Var> {
    encode_impl(tape, p, cfg, token_ids, valid, extra, true)
}

/// [`encode`] without the bias of the last layer norm. That bias cancels in
/// any difference of two encodings, so leaving it out keeps its gradient
/// exactly zero there.
pub fn encode_unbiased(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    token_ids: &[usize],
) -> Result<Var> {
    encode_impl(tape, p, cfg, token_ids, None, None, false)
}

fn encode_impl(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    valid: Option<&[bool]>,
    extra: Option<Var>,
    final_bias: bool,
) -> Result<Var> {
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::shape("encode", "empty sequence"));
    }
    if n > cfg.max_positions {
        return Err(Error::TooLong {
            len: n,
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::shape("encode", format!("{} ids with {} valid flags", n, v.len())));
        }
    }

    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.embedding_lookup(p.var("enc.tok_emb")?, token_ids)?;
    let pos = tape.gather_rows(p.var("enc.pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(e) = extra {
        x = tape.add(x, e)?;
    }

    let mask: Vec<bool> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            valid.is_none_or(|v| v[j]) && (!cfg.diag_attention || i == j)
        })
        .collect();
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let eps = cfg.layer_norm_eps;

    for l in 0..cfg.n_layers {
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let proj = |m: &str| -> Result<Var> {
                let xw = tape.matmul(x, p.var(&format!("enc.l{l}.h{h}.w{m}"))?)?;
                if m == "k" {
                    return Ok(xw);
                }
                tape.add_bias(xw, p.var(&format!("enc.l{l}.h{h}.b{m}"))?)
            };
            let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
            let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, scale);
            let attn = tape.masked_softmax(scores, Some(&mask))?;
            heads.push(tape.matmul(attn, v)?);
        }
        let cat = tape.concat(&heads)?;
        let attn_out = tape.add_bias(
            tape.matmul(cat, p.var(&format!("enc.l{l}.wo"))?)?,
            p.var(&format!("enc.l{l}.bo"))?,
        )?;
        x = affine_norm(tape, p, &format!("enc.l{l}.ln1"), tape.add(x, attn_out)?, eps, true)?;

        let hidden = tape.gelu(tape.add_bias(
            tape.matmul(x, p.var(&format!("enc.l{l}.ff.w1"))?)?,
            p.var(&format!("enc.l{l}.ff.b1"))?,
        )?);
        let ff = tape.add_bias(
            tape.matmul(hidden, p.var(&format!("enc.l{l}.ff.w2"))?)?,
            p.var(&format!("enc.l{l}.ff.b2"))?,
        )?;
        let bias = final_bias || l + 1 < cfg.n_layers;
        x = affine_norm(tape, p, &format!("enc.l{l}.ln2"), tape.add(x, ff)?, eps, bias)?;
    }
    Ok(x)
}

fn affine_norm(
    tape: &Tape,
    p: &Bound<'_>,
    prefix: &str,
    x: Var,
    eps: f64,
    bias: bool,
) -> Result<Var> {
    let normed = tape.layer_norm(x, eps)?;
    let scaled = tape.mul_row(normed, p.var(&format!("{prefix}.g"))?)?;
    if !bias {
        return Ok(scaled);
    }
    tape.add_bias(scaled, p.var(&format!("{prefix}.b"))?)
}

/// Row of the `[CLS]` position, shape `[1, d]`.
pub fn pooled_repr(tape: &Tape, h: Var) -> Result<Var> {
    tape.gather_rows(h, &[0])
}

/// Span-boundary representations for `(start, end, i)` targets, `[m, d]`.
///
/// Each row reads only `h[start - 1]`, `h[end + 1]` and the relative
/// position embedding `i - start + 1`, then applies two GELU + layer-norm
/// layers.
pub fn span_boundary_reprs(
    tape: &Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    h: Var,
    targets: &[(usize, usize, usize)],
) -> Result<Var> {
    let n = tape.with_value(h, |t| t.dims().first().copied().unwrap_or(0));
    let mut left = Vec::with_capacity(targets.len());
    let mut right = Vec::with_capacity(targets.len());
    let mut rel = Vec::with_capacity(targets.len());
    for &(s, e, i) in targets {
        if s == 0 || e + 1 >= n || s > e {
            return Err(Error::BoundaryUnavailable {
                start: s,
                end: e,
                len: n,
            });
        }
        if i < s || i > e || i - s + 1 > cfg.max_span_len {
            return Err(Error::shape(
                "span_boundary_repr",
                format!("position {i} outside span ({s}, {e}) or beyond max_span_len {}", cfg.max_span_len),
            ));
        }
        left.push(s - 1);
        right.push(e + 1);
        rel.push(i - s + 1);
    }
    let input = tape.concat(&[
        tape.gather_rows(h, &left)?,
        tape.gather_rows(h, &right)?,
        tape.gather_rows(p.var("sbo.relpos")?, &rel)?,
    ])?;
    let eps = cfg.layer_norm_eps;
    let h1 = tape.gelu(tape.add_bias(tape.matmul(input, p.var("sbo.w1")?)?, p.var("sbo.b1")?)?);
    let h1 = affine_norm(tape, p, "sbo.ln1", h1, eps, true)?;
    let h2 = tape.gelu(tape.add_bias(tape.matmul(h1, p.var("sbo.w2")?)?, p.var("sbo.b2")?)?);
    affine_norm(tape, p, "sbo.ln2", h2, eps, true)
}

/// Vocabulary logits for rows of `x`.
pub fn output_logits(tape: &Tape, p: &Bound<'_>, x: Var) -> Result<Var> {
    tape.add_bias(tape.matmul(x, p.var("mlm.w")?)?, p.var("mlm.b")?)
}
