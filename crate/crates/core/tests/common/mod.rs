#![allow(dead_code)]

use dapt_core::corpus::{CLS, MASK, SEP};
use dapt_core::encoder::{EncoderConfig, EncoderParams};
use dapt_core::masking::{Action, MaskPlan, MaskedSpan, SpanSource};
use dapt_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_VOCAB: usize = 50;

pub fn tiny_config(diag: bool) -> EncoderConfig {
    EncoderConfig {
        vocab_size: TINY_VOCAB,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_positions: 16,
        init_std: 0.3,
        diag_attention: diag,
        ..EncoderConfig::default()
    }
}

pub fn tiny_model(seed: u64, diag: bool) -> EncoderParams {
    EncoderParams::init(tiny_config(diag), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// `[CLS] content.. [SEP]` of total length `n`, content ids in `5..vocab`.
pub fn random_ids(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend((0..n - 2).map(|_| rng.random_range(5..TINY_VOCAB)));
    ids.push(SEP);
    ids
}

pub fn span(start: usize, end: usize) -> MaskedSpan {
    MaskedSpan {
        start,
        end,
        action: Action::MaskToken,
        source: SpanSource::Geometric,
    }
}

pub fn plan(spans: &[(usize, usize)]) -> MaskPlan {
    MaskPlan::from_spans(spans.iter().map(|&(s, e)| span(s, e)).collect())
}

pub fn masked(ids: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut out = ids.to_vec();
    for &p in positions {
        out[p] = MASK;
    }
    out
}

// ---- plain-array reference encoder, independent of the tape ----

fn t<'a>(m: &'a EncoderParams, name: &str) -> &'a Tensor {
    m.store.get(name).unwrap()
}

fn matmul(a: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (w.dims()[0], w.dims()[1]);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|p| row[p] * w.data()[p * n + j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &mut [Vec<f64>], b: &Tensor) {
    for row in a {
        for (x, y) in row.iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn layer_norm(a: &[Vec<f64>], g: &Tensor, b: &Tensor, eps: f64) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Encoder forward written directly over nested vectors.
pub fn reference_forward(m: &EncoderParams, ids: &[usize]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (n, d) = (ids.len(), c.d_model);
    let tok = t(m, "enc.tok_emb");
    let pos = t(m, "enc.pos_emb");
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| tok.data()[ids[i] * d + j] + pos.data()[i * d + j]).collect())
        .collect();
    let dh = c.head_dim();
    for l in 0..c.n_layers {
        let mut cat = vec![Vec::new(); n];
        for h in 0..c.n_heads {
            let proj = |name: &str| {
                let mut out = matmul(&x, t(m, &format!("enc.l{l}.h{h}.w{name}")));
                if name != "k" {
                    add_bias(&mut out, t(m, &format!("enc.l{l}.h{h}.b{name}")));
                }
                out
            };
            let (q, k, v) = (proj("q"), proj("k"), proj("v"));
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| !c.diag_attention || j == i).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| (0..dh).map(|p| q[i][p] * k[j][p]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for p in 0..dh {
                    cat[i].push(allowed.iter().zip(&exps).map(|(&j, e)| e / z * v[j][p]).sum());
                }
            }
        }
        let mut attn = matmul(&cat, t(m, &format!("enc.l{l}.wo")));
        add_bias(&mut attn, t(m, &format!("enc.l{l}.bo")));
        let res: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        x = layer_norm(
            &res,
            t(m, &format!("enc.l{l}.ln1.g")),
            t(m, &format!("enc.l{l}.ln1.b")),
            c.layer_norm_eps,
        );
        let mut hid = matmul(&x, t(m, &format!("enc.l{l}.ff.w1")));
        add_bias(&mut hid, t(m, &format!("enc.l{l}.ff.b1")));
        for row in &mut hid {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut ff = matmul(&hid, t(m, &format!("enc.l{l}.ff.w2")));
        add_bias(&mut ff, t(m, &format!("enc.l{l}.ff.b2")));
        let res: Vec<Vec<f64>> = x
            .iter()
            .zip(&ff)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        x = layer_norm(
            &res,
            t(m, &format!("enc.l{l}.ln2.g")),
            t(m, &format!("enc.l{l}.ln2.b")),
            c.layer_norm_eps,
        );
    }
    x
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Impact of masking `perturbed` on masked `target`, via the reference encoder.
pub fn naive_impact(m: &EncoderParams, ids: &[usize], target: usize, perturbed: &[usize]) -> f64 {
    if perturbed.is_empty() {
        return 0.0;
    }
    let first = masked(ids, &[target]);
    let mut all = vec![target];
    all.extend_from_slice(perturbed);
    let second = masked(ids, &all);
    euclid(
        &reference_forward(m, &first)[target],
        &reference_forward(m, &second)[target],
    )
}
