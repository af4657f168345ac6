//! Small seeded corpora for smoke runs and overfit tests.
//!
//! Sentences come from a fixed template grammar, so a tiny encoder can
//! memorize them. CSRL sessions have two turns where the second turn's
//! subject is elided and its agent role points back into the first turn.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_sessions, DialogueSession, Role, Slot, Task, Turn};
use crate::error::{Error, Result};

const NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
const VERBS: [&str; 6] = ["likes", "bought", "sold", "found", "painted", "lost"];
const ADJECTIVES: [&str; 6] = ["red", "old", "small", "shiny", "wooden", "broken"];
const NOUNS: [&str; 8] = ["kite", "lamp", "chair", "boat", "clock", "drum", "bike", "vase"];
const TIMES: [&str; 4] = ["yesterday", "today", "recently", "again"];
const HOTEL_TYPES: [&str; 4] = ["cheap", "quiet", "luxury", "family"];
const CITIES: [&str; 4] = ["paris", "tokyo", "lima", "oslo"];
const CUISINES: [&str; 4] = ["thai", "greek", "korean", "italian"];

/// Verb list matching the generated predicates.
pub fn verb_lexicon() -> Vec<String> {
    VERBS.iter().map(|v| v.to_string()).collect()
}

fn turn(tokens: Vec<&str>) -> Turn {
    Turn {
        speaker: String::new(),
        tokens: tokens.into_iter().map(String::from).collect(),
        predicates: Vec::new(),
        roles: Vec::new(),
        intents: Vec::new(),
        slots: Vec::new(),
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

/// `n` single-turn sessions of the form `name verb the adj noun time`.
pub fn pretrain_sessions(n: usize, seed: u64) -> Vec<DialogueSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tokens = vec![
                pick(&mut rng, &NAMES),
                pick(&mut rng, &VERBS),
                "the",
                pick(&mut rng, &ADJECTIVES),
                pick(&mut rng, &NOUNS),
                pick(&mut rng, &TIMES),
            ];
            DialogueSession {
                session_id: format!("pre{i:03}"),
                task: Task::Csrl,
                turns: vec![turn(tokens)],
            }
        })
        .collect()
}

/// Noun phrases (`the adj noun`) of sessions made by this module, in
/// session content offsets.
pub fn noun_phrases(sessions: &[DialogueSession]) -> Vec<(String, Vec<(usize, usize, f64)>)> {
    sessions
        .iter()
        .map(|s| {
            let mut spans = Vec::new();
            let mut base = 0;
            for t in &s.turns {
                for (k, w) in t.tokens.iter().enumerate() {
                    if w == "the" && k + 2 < t.tokens.len() {
                        spans.push((base + k, base + k + 2, 1.0));
                    }
                }
                base += t.tokens.len();
            }
            (s.session_id.clone(), spans)
        })
        .collect()
}

/// Two-turn CSRL sessions. Turn 0 is `name verb the adj noun` with `ARG0`
/// and `ARG1`; turn 1 is `later verb it time` whose `ARG0` is the name in
/// turn 0.
pub fn csrl_sessions(n: usize, seed: u64) -> Vec<DialogueSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut first = turn(vec![
                pick(&mut rng, &NAMES),
                pick(&mut rng, &VERBS),
                "the",
                pick(&mut rng, &ADJECTIVES),
                pick(&mut rng, &NOUNS),
            ]);
            first.speaker = "A".into();
            first.predicates = vec![1];
            first.roles = vec![Role(1, 0, 0, "ARG0".into()), Role(1, 2, 4, "ARG1".into())];
            let mut second = turn(vec!["later", pick(&mut rng, &VERBS), "it", pick(&mut rng, &TIMES)]);
            second.speaker = "B".into();
            second.predicates = vec![1];
            second.roles = vec![
                Role(1, 0, 0, "ARG0".into()),
                Role(1, 7, 7, "ARG1".into()),
                Role(1, 8, 8, "ARGM-TMP".into()),
            ];
            DialogueSession {
                session_id: format!("csrl{i:03}"),
                task: Task::Csrl,
                turns: vec![first, second],
            }
        })
        .collect()
}

/// Single-turn SLU utterances with one or two intents joined by `and`.
pub fn slu_sessions(n: usize, seed: u64) -> Vec<DialogueSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut t = turn(Vec::new());
            let mut clauses: Vec<usize> = vec![rng.random_range(0..3)];
            if rng.random_bool(0.5) {
                clauses.push((clauses[0] + rng.random_range(1..3)) % 3);
            }
            for (c, &kind) in clauses.iter().enumerate() {
                if c > 0 {
                    t.tokens.push("and".into());
                }
                let at = t.tokens.len();
                let words: Vec<&str> = match kind {
                    0 => {
                        t.intents.push("book_hotel".into());
                        t.slots.push(Slot(at + 2, at + 2, "hotel_type".into()));
                        t.slots.push(Slot(at + 5, at + 5, "city".into()));
                        vec!["book", "a", pick(&mut rng, &HOTEL_TYPES), "hotel", "in", pick(&mut rng, &CITIES)]
                    }
                    1 => {
                        t.intents.push("find_restaurant".into());
                        t.slots.push(Slot(at + 2, at + 2, "cuisine".into()));
                        vec!["find", "a", pick(&mut rng, &CUISINES), "restaurant"]
                    }
                    _ => {
                        t.intents.push("ask_weather".into());
                        t.slots.push(Slot(at + 4, at + 4, "city".into()));
                        vec!["check", "the", "weather", "in", pick(&mut rng, &CITIES)]
                    }
                };
                t.tokens.extend(words.into_iter().map(String::from));
            }
            t.speaker = "U".into();
            DialogueSession {
                session_id: format!("slu{i:03}"),
                task: Task::Slu,
                turns: vec![t],
            }
        })
        .collect()
}

/// Files written by [`write_workspace`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub pretrain: PathBuf,
    pub np_spans: PathBuf,
    pub verbs: PathBuf,
    pub csrl: PathBuf,
    /// Held-out CSRL sessions drawn from the same grammar.
    pub csrl_eval: PathBuf,
    pub slu: PathBuf,
    pub config: PathBuf,
    pub grid: PathBuf,
}

/// Writes a ready-to-run desk-scale workspace into `dir`.
pub fn write_workspace(dir: &Path, seed: u64) -> Result<SynthFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles {
        pretrain: dir.join("pretrain.jsonl"),
        np_spans: dir.join("np_spans.jsonl"),
        verbs: dir.join("verbs.txt"),
        csrl: dir.join("csrl.jsonl"),
        csrl_eval: dir.join("csrl_eval.jsonl"),
        slu: dir.join("slu.jsonl"),
        config: dir.join("config.toml"),
        grid: dir.join("grid.toml"),
    };
    let pre = pretrain_sessions(32, seed);
    save_sessions(&files.pretrain, &pre)?;
    let csrl = csrl_sessions(16, seed.wrapping_add(1));
    save_sessions(&files.csrl, &csrl)?;
    save_sessions(&files.csrl_eval, &csrl_sessions(16, seed.wrapping_add(3)))?;
    save_sessions(&files.slu, &slu_sessions(16, seed.wrapping_add(2)))?;

    let mut nps = noun_phrases(&pre);
    nps.extend(noun_phrases(&csrl));
    let lines: Vec<String> = nps
        .into_iter()
        .map(|(id, spans)| serde_json::json!({"session_id": id, "spans": spans}).to_string())
        .collect();
    write(&files.np_spans, &(lines.join("\n") + "\n"))?;
    write(&files.verbs, &(verb_lexicon().join("\n") + "\n"))?;

    let base = format!(
        "[paths]\ncorpus = {:?}\nnp_spans = {:?}\nverb_lexicon = {:?}\ncheckpoint_dir = {:?}\n\n{}",
        files.pretrain,
        files.np_spans,
        files.verbs,
        dir.join("ckpt"),
        DESK_SETTINGS
    );
    write(&files.config, &base)?;
    let grid = format!(
        "rows = [\"No Pretraining\", \"MLM\", \"MLM + SBO\", \"MLM + PMO\", \"MLM + SBO + PMO\", \"NP Sampling (α=50)\", \"NP Sampling (α=80)\"]\nfinetune_corpus = {:?}\nfinetune_eval = {:?}\n\n{}",
        files.csrl, files.csrl_eval, base
    );
    write(&files.grid, &grid)?;
    Ok(files)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const DESK_SETTINGS: &str = "\
[encoder]
d_model = 32
n_heads = 4
n_layers = 2
d_ff = 64
max_positions = 32
init_std = 0.1

[train]
batch_size = 32
lr = 0.003
steps = 300
max_len = 32

[finetune]
task = \"csrl\"
batch_size = 32
lr = 0.003
steps = 200
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_sessions_validate() {
        for (i, s) in pretrain_sessions(32, 1)
            .iter()
            .chain(&csrl_sessions(16, 2))
            .chain(&slu_sessions(16, 3))
            .enumerate()
        {
            s.validate(i + 1).unwrap();
        }
        assert_eq!(pretrain_sessions(4, 9), pretrain_sessions(4, 9));
    }

    #[test]
    fn csrl_has_cross_turn_agent() {
        let s = &csrl_sessions(1, 0)[0];
        let Role(_, start, _, label) = &s.turns[1].roles[0];
        assert_eq!((*start, label.as_str()), (0, "ARG0"));
        assert_eq!(s.locate(*start).unwrap().0, 0);
    }
}
