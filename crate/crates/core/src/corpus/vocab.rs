use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

/// Bijective token ↔ id map. The five special tokens occupy ids `0..5`.
///
/// Unigram counts from the training corpus are kept alongside so random
/// replacement during masking does not need to rescan the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Specials plus every token seen at least `min_count` times, ordered by
    /// descending count and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: u64) -> Result<Vocab> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        if min_count < 1 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *freq.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut unk = 0;
        let mut kept: Vec<(&str, u64)> = Vec::new();
        for (tok, count) in freq {
            if SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            if count >= min_count {
                kept.push((tok, count));
            } else {
                unk += count;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIALS];
        counts[UNK] = unk;
        for (tok, count) in kept {
            tokens.push(tok.to_string());
            counts.push(count);
        }
        Vocab::from_parts(tokens, counts)
    }

    /// Rebuilds a vocab from its token list and unigram counts.
    pub fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Vocab> {
        if tokens.len() != counts.len() {
            return Err(Error::Config(format!(
                "vocab has {} tokens but {} counts",
                tokens.len(),
                counts.len()
            )));
        }
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Config("vocab must start with the special tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            ids,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn encode(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Training-corpus counts over non-special ids, indexed by id (specials 0).
    pub fn unigram_weights(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| if Vocab::is_special(i) { 0.0 } else { c as f64 })
            .collect()
    }

    /// One `token<TAB>count` line per id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line.rsplit_once('\t').ok_or_else(|| Error::Record {
                line: i + 1,
                detail: "expected token<TAB>count".into(),
            })?;
            tokens.push(tok.to_string());
            counts.push(count.parse().map_err(|_| Error::Record {
                line: i + 1,
                detail: format!("bad count {count:?}"),
            })?);
        }
        Vocab::from_parts(tokens, counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(sents: &[&[&str]]) -> Vec<Vec<String>> {
        sents
            .iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn orders_by_count_then_lexicographic() {
        let v = Vocab::build(&corpus(&[&["a", "b"], &["b", "c"]]), 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id_of("b"), Some(5));
        assert_eq!(v.id_of("a"), Some(6));
        assert_eq!(v.id_of("c"), Some(7));
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id_of(s), Some(i));
        }
    }

    #[test]
    fn threshold_maps_rare_tokens_to_unk() {
        let v = Vocab::build(&corpus(&[&["a"]]), 2).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS);
        assert_eq!(v.encode("a"), UNK);
        assert_eq!(v.counts()[UNK], 1);
    }

    #[test]
    fn thousand_distinct_tokens() {
        let toks: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let v = Vocab::build(&[toks], 1).unwrap();
        assert_eq!(v.len(), 1005);
    }

    #[test]
    fn empty_corpus_errors() {
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(Vocab::build(&empty, 1).unwrap_err().to_string(), "empty corpus");
        assert!(Vocab::build(&[Vec::<String>::new()], 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocab::build(&corpus(&[&["x", "y", "y"]]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
