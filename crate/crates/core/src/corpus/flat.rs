use std::collections::HashSet;

use super::session::{DialogueSession, Role, Slot, Task};
use super::nounphrase::NounPhraseDistribution;
use super::vocab::{Vocab, CLS, SEP};
use crate::error::{Error, Result};

/// Role annotation re-based to flat positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FlatRole {
    pub predicate: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FlatSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// `[CLS] turn_a [SEP] turn_b [SEP] ...` with annotations in flat positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSequence {
    pub session_id: String,
    pub task: Task,
    pub token_ids: Vec<usize>,
    /// Origin turn of every position. `[CLS]` takes the first surviving
    /// turn; each `[SEP]` takes the turn it closes.
    pub turn_of: Vec<usize>,
    /// `(turn, position in turn)` for content positions, `None` for specials.
    pub source: Vec<Option<(usize, usize)>>,
    pub predicates: Vec<usize>,
    pub roles: Vec<FlatRole>,
    pub slots: Vec<FlatSpan>,
    pub intents: Vec<String>,
}

impl FlatSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_special(&self, pos: usize) -> bool {
        self.source[pos].is_none()
    }

    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.is_special(p)).collect()
    }

    pub fn maskable_len(&self) -> usize {
        self.source.iter().filter(|s| s.is_some()).count()
    }

    /// Flat position of token `local` of `turn`, if it survived truncation.
    pub fn position_of(&self, turn: usize, local: usize) -> Option<usize> {
        self.source.iter().position(|s| *s == Some((turn, local)))
    }

    /// Builds a bare single-segment sequence `[CLS] ids.. [SEP]`.
    pub fn from_content(session_id: &str, ids: &[usize]) -> FlatSequence {
        let mut token_ids = vec![CLS];
        token_ids.extend_from_slice(ids);
        token_ids.push(SEP);
        let n = token_ids.len();
        let mut source = vec![None; n];
        for (k, s) in source.iter_mut().enumerate().skip(1).take(ids.len()) {
            *s = Some((0, k - 1));
        }
        FlatSequence {
            session_id: session_id.to_string(),
            task: Task::Csrl,
            token_ids,
            turn_of: vec![0; n],
            source,
            predicates: vec![],
            roles: vec![],
            slots: vec![],
            intents: vec![],
        }
    }
}

/// Packs a session into one sequence of at most `max_len` positions.
///
/// Content is dropped from the front of the oldest turn first; a turn that
/// loses all its tokens loses its `[SEP]` too. Annotations touching dropped
/// tokens are dropped.
pub fn flatten_session(
    session: &DialogueSession,
    vocab: &Vocab,
    max_len: usize,
) -> Result<FlatSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} must be at least 3")));
    }
    // First kept token of each turn.
    let mut first: Vec<usize> = vec![0; session.turns.len()];
    let remaining = |first: &[usize]| -> usize {
        1 + session
            .turns
            .iter()
            .zip(first)
            .filter(|(t, &f)| f < t.tokens.len())
            .map(|(t, &f)| t.tokens.len() - f + 1)
            .sum::<usize>()
    };
    let mut len = remaining(&first);
    while len > max_len {
        let Some(ti) = (0..session.turns.len()).find(|&i| first[i] < session.turns[i].tokens.len())
        else {
            break;
        };
        first[ti] += 1;
        len = remaining(&first);
    }
    if len <= 1 {
        return Err(Error::NoContent(session.session_id.clone()));
    }

    let mut token_ids = vec![CLS];
    let mut source = vec![None];
    let mut turn_of = vec![0];
    // flat position of (turn, local) when kept
    let mut pos_of: Vec<Vec<Option<usize>>> = session
        .turns
        .iter()
        .map(|t| vec![None; t.tokens.len()])
        .collect();
    let mut first_turn = None;
    for (ti, turn) in session.turns.iter().enumerate() {
        if first[ti] >= turn.tokens.len() {
            continue;
        }
        first_turn.get_or_insert(ti);
        for (k, tok) in turn.tokens.iter().enumerate().skip(first[ti]) {
            pos_of[ti][k] = Some(token_ids.len());
            token_ids.push(vocab.encode(tok));
            source.push(Some((ti, k)));
            turn_of.push(ti);
        }
        token_ids.push(SEP);
        source.push(None);
        turn_of.push(ti);
    }
    turn_of[0] = first_turn.expect("content survives");

    let mut predicates = Vec::new();
    let mut roles = Vec::new();
    let mut slots = Vec::new();
    let mut intents: Vec<String> = Vec::new();
    let mut seen_intents = HashSet::new();
    for (ti, turn) in session.turns.iter().enumerate() {
        if first[ti] >= turn.tokens.len() {
            continue;
        }
        for &p in &turn.predicates {
            if let Some(fp) = pos_of[ti][p] {
                predicates.push(fp);
            }
        }
        for Role(p, s, e, label) in &turn.roles {
            let (Some((us, ls)), Some((ue, le))) = (session.locate(*s), session.locate(*e)) else {
                continue;
            };
            if let (Some(fp), Some(fs), Some(fe)) = (pos_of[ti][*p], pos_of[us][ls], pos_of[ue][le])
            {
                roles.push(FlatRole {
                    predicate: fp,
                    start: fs,
                    end: fe,
                    label: label.clone(),
                });
            }
        }
        for Slot(s, e, label) in &turn.slots {
            if let (Some(fs), Some(fe)) = (pos_of[ti][*s], pos_of[ti][*e]) {
                slots.push(FlatSpan {
                    start: fs,
                    end: fe,
                    label: label.clone(),
                });
            }
        }
        for intent in &turn.intents {
            if seen_intents.insert(intent.clone()) {
                intents.push(intent.clone());
            }
        }
    }
    predicates.sort_unstable();
    predicates.dedup();

    Ok(FlatSequence {
        session_id: session.session_id.clone(),
        task: session.task,
        token_ids,
        turn_of,
        source,
        predicates,
        roles,
        slots,
        intents,
    })
}

/// Re-bases noun-phrase spans given in session content offsets onto the
/// flat positions of `seq`. Spans that cross a turn or lost a token to
/// truncation are dropped.
pub fn rebase_noun_phrases(
    session: &DialogueSession,
    seq: &FlatSequence,
    dist: &NounPhraseDistribution,
) -> Result<NounPhraseDistribution> {
    let mut out = Vec::new();
    for ((s, e), w) in dist.spans() {
        let (Some((ts, ls)), Some((te, le))) = (session.locate(s), session.locate(e)) else {
            continue;
        };
        if ts != te {
            continue;
        }
        if let (Some(fs), Some(fe)) = (seq.position_of(ts, ls), seq.position_of(te, le)) {
            out.push(((fs, fe), w));
        }
    }
    NounPhraseDistribution::new(out)
}

/// Predicate positions for perturbation masking: the annotated positions
/// when given, otherwise every position whose token is in `verb_lexicon`.
/// Special positions are never returned.
pub fn select_predicates(
    seq: &FlatSequence,
    verb_lexicon: &HashSet<usize>,
    annotated: Option<&[usize]>,
) -> Vec<usize> {
    let mut out: Vec<usize> = match annotated {
        Some(list) => list
            .iter()
            .copied()
            .filter(|&p| p < seq.len() && !seq.is_special(p))
            .collect(),
        None => (0..seq.len())
            .filter(|&p| !seq.is_special(p) && verb_lexicon.contains(&seq.token_ids[p]))
            .collect(),
    };
    out.sort_unstable();
    out.dedup();
    out
}
