use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Csrl,
    Slu,
}

/// `(predicate, arg_start, arg_end, label)`.
///
/// `predicate` is a position inside the owning turn. The argument span is
/// given in session content offsets (all turns' tokens concatenated, no
/// special tokens) so it may sit in a different turn than the predicate,
/// but it must lie inside a single turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role(pub usize, pub usize, pub usize, pub String);

/// `(start, end, label)`, inclusive, positions inside the owning turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot(pub usize, pub usize, pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(default)]
    pub speaker: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub predicates: Vec<usize>,
    #[serde(default)]
    pub roles: Vec<Role>,
    #[serde(default)]
    pub intents: Vec<String>,
    #[serde(default)]
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub task: Task,
    pub turns: Vec<Turn>,
}

impl DialogueSession {
    pub fn content_len(&self) -> usize {
        self.turns.iter().map(|t| t.tokens.len()).sum()
    }

    /// `(turn index, position in turn)` of a session content offset.
    pub fn locate(&self, offset: usize) -> Option<(usize, usize)> {
        let mut base = 0;
        for (i, t) in self.turns.iter().enumerate() {
            if offset < base + t.tokens.len() {
                return Some((i, offset - base));
            }
            base += t.tokens.len();
        }
        None
    }

    /// Checks every annotation invariant. `line` is used in error messages.
    pub fn validate(&self, line: usize) -> Result<()> {
        let record = |detail: String| Error::Record { line, detail };
        let span = |detail: String| Error::InvalidSpan { line, detail };
        if self.turns.is_empty() {
            return Err(record("turns: must be non-empty".into()));
        }
        let total = self.content_len();
        for (ti, turn) in self.turns.iter().enumerate() {
            let n = turn.tokens.len();
            let mut seen = HashSet::new();
            for (k, &p) in turn.predicates.iter().enumerate() {
                if p >= n {
                    return Err(record(format!(
                        "turns[{ti}].predicates[{k}]: position {p} out of range for {n} tokens"
                    )));
                }
                if !seen.insert(p) {
                    return Err(record(format!(
                        "turns[{ti}].predicates[{k}]: duplicate position {p}"
                    )));
                }
            }
            for (k, Role(p, s, e, label)) in turn.roles.iter().enumerate() {
                if *p >= n {
                    return Err(record(format!(
                        "turns[{ti}].roles[{k}]: predicate {p} out of range for {n} tokens"
                    )));
                }
                if s > e {
                    return Err(span(format!("turns[{ti}].roles[{k}] ({s}, {e}, {label})")));
                }
                if *e >= total {
                    return Err(span(format!(
                        "turns[{ti}].roles[{k}] ({s}, {e}, {label}) exceeds content length {total}"
                    )));
                }
                let (ts, _) = self.locate(*s).expect("in range");
                let (te, _) = self.locate(*e).expect("in range");
                if ts != te {
                    return Err(span(format!(
                        "turns[{ti}].roles[{k}] ({s}, {e}, {label}) crosses a turn boundary"
                    )));
                }
            }
            for (k, Slot(s, e, label)) in turn.slots.iter().enumerate() {
                if s > e || *e >= n {
                    return Err(span(format!(
                        "turns[{ti}].slots[{k}] ({s}, {e}, {label}) for {n} tokens"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses line-delimited JSON sessions and validates each record.
pub fn parse_sessions(text: &str) -> Result<Vec<DialogueSession>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let session: DialogueSession = serde_json::from_str(raw).map_err(|e| Error::Record {
            line,
            detail: e.to_string(),
        })?;
        session.validate(line)?;
        out.push(session);
    }
    Ok(out)
}

pub fn load_sessions(path: &Path) -> Result<Vec<DialogueSession>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sessions(&text)
}

pub fn to_jsonl(sessions: &[DialogueSession]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s).expect("sessions serialize"));
        out.push('\n');
    }
    out
}

pub fn save_sessions(path: &Path, sessions: &[DialogueSession]) -> Result<()> {
    fs::write(path, to_jsonl(sessions)).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated token lines of every turn, for vocabulary building.
pub fn token_corpus(sessions: &[DialogueSession]) -> Vec<Vec<String>> {
    sessions
        .iter()
        .flat_map(|s| s.turns.iter().map(|t| t.tokens.clone()))
        .collect()
}

/// One token per line; blank lines ignored.
pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"session_id":"s1","task":"csrl","turns":[{"speaker":"A","tokens":["i","saw","it"],"predicates":[1],"roles":[[1,0,0,"ARG0"],[1,2,2,"ARG1"]]}]}
{"session_id":"s2","task":"slu","turns":[{"speaker":"U","tokens":["book","a","hotel"],"intents":["inform"],"slots":[[2,2,"type"]]}]}

{"session_id":"s3","task":"csrl","turns":[{"tokens":["a","b"]},{"tokens":["c"],"predicates":[0],"roles":[[0,0,1,"ARG1"]]}]}
"#;

    #[test]
    fn parses_valid_file() {
        let sessions = parse_sessions(GOOD).unwrap();
        assert_eq!(sessions.len(), 3);
        assert_eq!(sessions[1].task, Task::Slu);
        assert_eq!(sessions[2].turns[1].roles[0], Role(0, 0, 1, "ARG1".into()));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_sessions("").unwrap().is_empty());
    }

    #[test]
    fn reversed_span_names_line() {
        let bad = "{\"session_id\":\"x\",\"task\":\"csrl\",\"turns\":[{\"tokens\":[\"a\"]}]}\n{\"session_id\":\"y\",\"task\":\"csrl\",\"turns\":[{\"tokens\":[\"a\",\"b\",\"c\"],\"predicates\":[0],\"roles\":[[0,2,1,\"ARG0\"]]}]}\n";
        let err = parse_sessions(bad).unwrap_err().to_string();
        assert!(err.starts_with("invalid span at line 2"), "{err}");
    }

    #[test]
    fn out_of_range_annotation_names_span() {
        let bad = r#"{"session_id":"y","task":"slu","turns":[{"tokens":["a"],"slots":[[0,3,"x"]]}]}"#;
        let err = parse_sessions(bad).unwrap_err().to_string();
        assert!(err.contains("slots[0] (0, 3, x)"), "{err}");
    }

    #[test]
    fn malformed_json_names_line() {
        let err = parse_sessions("\n{not json}\n").unwrap_err().to_string();
        assert!(err.starts_with("record 2"), "{err}");
    }

    #[test]
    fn cross_turn_argument_span_rejected() {
        let bad = r#"{"session_id":"y","task":"csrl","turns":[{"tokens":["a","b"]},{"tokens":["c"],"predicates":[0],"roles":[[0,1,2,"A"]]}]}"#;
        let err = parse_sessions(bad).unwrap_err().to_string();
        assert!(err.contains("crosses a turn boundary"), "{err}");
    }

    #[test]
    fn duplicate_predicates_rejected() {
        let bad = r#"{"session_id":"y","task":"csrl","turns":[{"tokens":["a","b"],"predicates":[1,1]}]}"#;
        assert!(parse_sessions(bad).is_err());
    }

    #[test]
    fn serialize_round_trip_is_idempotent() {
        let sessions = parse_sessions(GOOD).unwrap();
        let text = to_jsonl(&sessions);
        let again = parse_sessions(&text).unwrap();
        assert_eq!(again, sessions);
        assert_eq!(to_jsonl(&again), text);
    }
}
