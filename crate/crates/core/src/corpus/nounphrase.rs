use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Weighted candidate spans `(start, end)`, inclusive.
///
/// Files give spans in session content offsets, the same coordinates as role
/// arguments; [`rebase_noun_phrases`](super::rebase_noun_phrases) maps them
/// onto flat positions before sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NounPhraseDistribution {
    spans: BTreeMap<(usize, usize), f64>,
}

impl NounPhraseDistribution {
    pub fn new(spans: impl IntoIterator<Item = ((usize, usize), f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ((s, e), w) in spans {
            check_weight("", s, e, w)?;
            if s > e {
                return Err(Error::InvalidSpan {
                    line: 0,
                    detail: format!("noun phrase ({s}, {e})"),
                });
            }
            *map.entry((s, e)).or_insert(0.0) += w;
        }
        Ok(NounPhraseDistribution { spans: map })
    }

    pub fn is_empty(&self) -> bool {
        self.total() <= 0.0
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn total(&self) -> f64 {
        self.spans.values().sum()
    }

    /// Spans in key order with weights normalized to sum to one.
    pub fn probabilities(&self) -> Vec<((usize, usize), f64)> {
        let total = self.total();
        if total <= 0.0 {
            return Vec::new();
        }
        self.spans.iter().map(|(&k, &w)| (k, w / total)).collect()
    }

    pub fn spans(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.spans.iter().map(|(&k, &w)| (k, w))
    }
}

fn check_weight(session: &str, start: usize, end: usize, weight: f64) -> Result<()> {
    if weight < 0.0 {
        return Err(Error::NegativeWeight {
            session: session.to_string(),
            start,
            end,
            weight,
        });
    }
    if !weight.is_finite() {
        return Err(Error::Config(format!(
            "non-finite weight for span ({start}, {end}) in session {session}"
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
struct NpRecord {
    session_id: String,
    spans: Vec<(usize, usize, f64)>,
}

pub fn parse_np_distribution(text: &str) -> Result<HashMap<String, NounPhraseDistribution>> {
    let mut out: HashMap<String, NounPhraseDistribution> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: NpRecord = serde_json::from_str(raw).map_err(|e| Error::Record {
            line,
            detail: e.to_string(),
        })?;
        for &(s, e, w) in &rec.spans {
            check_weight(&rec.session_id, s, e, w)?;
            if s > e {
                return Err(Error::InvalidSpan {
                    line,
                    detail: format!("noun phrase ({s}, {e}) in session {}", rec.session_id),
                });
            }
        }
        let dist = out.entry(rec.session_id).or_default();
        for (s, e, w) in rec.spans {
            *dist.spans.entry((s, e)).or_insert(0.0) += w;
        }
    }
    Ok(out)
}

pub fn load_np_distribution(path: &Path) -> Result<HashMap<String, NounPhraseDistribution>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_np_distribution(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_weights() {
        let m = parse_np_distribution(r#"{"session_id":"a","spans":[[1,3,2.0],[5,5,1.0]]}"#)
            .unwrap();
        let p = m["a"].probabilities();
        assert_eq!(p[0].0, (1, 3));
        assert!((p[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1].1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_span_map_is_empty_distribution() {
        let m = parse_np_distribution(r#"{"session_id":"a","spans":[]}"#).unwrap();
        assert!(m["a"].is_empty());
        assert!(m["a"].probabilities().is_empty());
    }

    #[test]
    fn negative_weight_errors() {
        let err = parse_np_distribution(r#"{"session_id":"a","spans":[[0,1,-1]]}"#).unwrap_err();
        assert!(matches!(err, Error::NegativeWeight { .. }), "{err}");
    }
}
