//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DAPT"  u32 version
//! u64 header length, header bytes (TOML: stage, step, seed, config, vocab, labels)
//! u64 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload
//! ```
//!
//! Tensors are the model parameters in store order, then `adam.m.<name>` and
//! `adam.v.<name>` for each parameter when optimizer state is present.
//! Training draws every example from its own ChaCha stream keyed by
//! `(seed, example index)`, so `seed` and `step` are the whole RNG state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::corpus::Vocab;
use crate::downstream::LabelScheme;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"DAPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub vocab: Vocab,
    pub labels: Option<LabelScheme>,
    pub params: EncoderParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: u64,
    seed: u64,
    adam_step: u64,
    vocab_tokens: Vec<String>,
    vocab_counts: Vec<u64>,
    labels: Option<LabelScheme>,
    config: RunConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut config = self.config.clone();
        config.encoder = self.params.config.clone();
        let header = Header {
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            adam_step: self.adam.step,
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_counts: self.vocab.counts().to_vec(),
            labels: self.labels.clone(),
            config,
        };
        let header = toml::to_string(&header).expect("header serializes");

        let store = &self.params.store;
        let mut entries: Vec<(String, &Tensor)> =
            store.iter().map(|(n, t)| (n.to_string(), t)).collect();
        let moments: Vec<(String, Tensor)> = if self.adam.m.is_empty() {
            Vec::new()
        } else {
            let shaped = |prefix: &str, data: &[Vec<f64>]| {
                store
                    .iter()
                    .zip(data)
                    .map(|((n, t), d)| {
                        let tensor = Tensor::new(t.dims().to_vec(), d.clone()).expect("moment shape");
                        (format!("adam.{prefix}.{n}"), tensor)
                    })
                    .collect::<Vec<_>>()
            };
            let mut all = shaped("m", &self.adam.m);
            all.extend(shaped("v", &self.adam.v));
            all
        };
        entries.extend(moments.iter().map(|(n, t)| (n.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = r.u64("header length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|e| Error::Truncated(format!("header is not UTF-8: {e}")))?;
        let header: Header = toml::from_str(header)
            .map_err(|e| Error::Truncated(format!("header: {}", e.message())))?;

        let count = r.u64("tensor count")?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| Error::Truncated(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 8, &name)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(rest) = name.strip_prefix("adam.m.") {
                check_moment(&params, m.len(), rest, data.len())?;
                m.push(data);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                check_moment(&params, v.len(), rest, data.len())?;
                v.push(data);
            } else {
                params.insert(name, Tensor::new(dims, data)?);
            }
        }
        if m.len() != v.len() || (!m.is_empty() && m.len() != params.len()) {
            return Err(Error::ParamMismatch(format!(
                "{} tensors with {} first and {} second moments",
                params.len(),
                m.len(),
                v.len()
            )));
        }
        let vocab = Vocab::from_parts(header.vocab_tokens, header.vocab_counts)?;
        Ok(Checkpoint {
            stage: header.stage,
            step: header.step,
            seed: header.seed,
            params: EncoderParams {
                config: header.config.encoder.clone(),
                store: params,
            },
            config: header.config,
            vocab,
            labels: header.labels.map(LabelScheme::reindexed),
            adam: AdamState {
                m,
                v,
                step: header.adam_step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Moments are stored in parameter order with matching sizes.
fn check_moment(params: &ParamStore, k: usize, name: &str, len: usize) -> Result<()> {
    match params.names().get(k) {
        Some(n) if n == name && params.tensors()[k].len() == len => Ok(()),
        _ => Err(Error::ParamMismatch(format!("optimizer moment {k} ({name}) out of order"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("ends inside {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
