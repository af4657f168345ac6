use std::collections::HashSet;

use dapt_core::corpus::{
    flatten_session, parse_sessions, to_jsonl, DialogueSession, FlatSequence,
    NounPhraseDistribution, Role, Slot, Task, Turn, Vocab,
};
use dapt_core::masking::{
    apply_mask, mask_budget, sample_np_mask, sample_plan, sample_span_mask, Action, MaskConfig,
    Scheme,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "book", "a", "table", "for", "two", "at", "seven", "the", "hotel", "near", "park", "please",
];

fn turn_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..8)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

/// Sessions whose annotations are valid by construction.
fn session_strategy() -> impl Strategy<Value = DialogueSession> {
    (prop::collection::vec(turn_strategy(), 1..5), any::<u64>()).prop_map(|(turns, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        let mut starts = Vec::new();
        for t in &turns {
            starts.push(offset);
            offset += t.len();
        }
        let built: Vec<Turn> = turns
            .iter()
            .enumerate()
            .map(|(ti, tokens)| {
                let n = tokens.len();
                let p = rng.random_range(0..n);
                let arg_turn = rng.random_range(0..=ti);
                let an = turns[arg_turn].len();
                let s = rng.random_range(0..an);
                let e = rng.random_range(s..an);
                let ss = rng.random_range(0..n);
                let se = rng.random_range(ss..n);
                Turn {
                    speaker: format!("s{}", ti % 2),
                    tokens: tokens.clone(),
                    predicates: vec![p],
                    roles: vec![Role(p, starts[arg_turn] + s, starts[arg_turn] + e, "ARG1".into())],
                    intents: vec![format!("intent{}", ti % 3)],
                    slots: vec![Slot(ss, se, "loc".into())],
                }
            })
            .collect();
        DialogueSession {
            session_id: format!("sess{seed}"),
            task: Task::Csrl,
            turns: built,
        }
    })
}

fn vocab() -> Vocab {
    let corpus: Vec<Vec<&str>> = vec![WORDS.to_vec(), WORDS[..6].to_vec()];
    Vocab::build(&corpus, 1).unwrap()
}

/// Random multi-segment sequence with `[SEP]` boundaries inside.
fn segmented(lengths: &[usize]) -> FlatSequence {
    let turns = lengths
        .iter()
        .map(|&n| Turn {
            speaker: String::new(),
            tokens: (0..n).map(|k| WORDS[k % WORDS.len()].to_string()).collect(),
            predicates: vec![],
            roles: vec![],
            intents: vec![],
            slots: vec![],
        })
        .collect();
    let session = DialogueSession {
        session_id: "seg".into(),
        task: Task::Csrl,
        turns,
    };
    flatten_session(&session, &vocab(), 4096).unwrap()
}

fn mask_config_strategy() -> impl Strategy<Value = MaskConfig> {
    (0.05f64..0.6, 0.05f64..0.95, 1usize..=10, 0.0f64..=1.0).prop_map(|(rate, geo_p, max, alpha)| {
        MaskConfig {
            rate,
            geo_p,
            max_span_len: max,
            alpha,
            ..MaskConfig::default()
        }
    })
}

fn np_for(seq: &FlatSequence) -> NounPhraseDistribution {
    let n = seq.len();
    let spans = (1..n.saturating_sub(2))
        .step_by(3)
        .map(|s| ((s, (s + 1).min(n - 2)), 1.0 + s as f64));
    NounPhraseDistribution::new(spans).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn vocab_round_trip(word in prop::sample::select(&WORDS[..])) {
        let v = vocab();
        prop_assert_eq!(v.token_of(v.id_of(word).unwrap()), Some(word));
    }

    #[test]
    fn flatten_respects_length_and_annotations(session in session_strategy(), max_len in 3usize..30) {
        let v = vocab();
        prop_assert!(session.validate(1).is_ok());
        let seq = match flatten_session(&session, &v, max_len) {
            Ok(s) => s,
            Err(e) => {
                prop_assert!(e.to_string().contains("sess"), "{e}");
                return Ok(());
            }
        };
        prop_assert!(seq.len() <= max_len);
        prop_assert_eq!(seq.token_ids[0], dapt_core::corpus::CLS);
        prop_assert_eq!(*seq.token_ids.last().unwrap(), dapt_core::corpus::SEP);
        let surface = |p: usize| {
            let (t, k) = seq.source[p].unwrap();
            session.turns[t].tokens[k].clone()
        };
        for p in 0..seq.len() {
            if let Some((t, k)) = seq.source[p] {
                prop_assert_eq!(v.token_of(seq.token_ids[p]).unwrap(), session.turns[t].tokens[k].as_str());
            }
        }
        for r in &seq.roles {
            prop_assert!(!seq.is_special(r.predicate));
            let (t, _) = seq.source[r.start].unwrap();
            prop_assert!((r.start..=r.end).all(|p| seq.source[p].map(|s| s.0) == Some(t)));
            let flat: Vec<String> = (r.start..=r.end).map(surface).collect();
            let offset: usize = session.turns[..t].iter().map(|x| x.tokens.len()).sum();
            let (_, k) = seq.source[r.start].unwrap();
            let orig = &session.turns[t].tokens[k..k + flat.len()];
            prop_assert_eq!(&flat[..], orig);
            let kept_role = session.turns.iter().flat_map(|x| &x.roles).any(|Role(_, s, _, _)| *s == offset + k);
            prop_assert!(kept_role);
        }
        for s in &seq.slots {
            let flat: Vec<String> = (s.start..=s.end).map(surface).collect();
            let (t, k) = seq.source[s.start].unwrap();
            prop_assert_eq!(&flat[..], &session.turns[t].tokens[k..k + flat.len()]);
        }
    }

    #[test]
    fn jsonl_round_trip_is_idempotent(sessions in prop::collection::vec(session_strategy(), 1..4)) {
        let text = to_jsonl(&sessions);
        let loaded = parse_sessions(&text).unwrap();
        prop_assert_eq!(&loaded, &sessions);
        prop_assert_eq!(to_jsonl(&loaded), text);
    }

    #[test]
    fn plans_are_well_formed(
        lengths in prop::collection::vec(1usize..25, 1..5),
        cfg in mask_config_strategy(),
        scheme in prop::sample::select(vec![Scheme::Token, Scheme::Span, Scheme::Np]),
        seed in any::<u64>(),
    ) {
        let seq = segmented(&lengths);
        let np = np_for(&seq);
        let plan = sample_plan(scheme, &seq, Some(&np), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(plan.validate(&seq).is_ok());
        let m = seq.maskable_len();
        let cap = (cfg.rate * m as f64).ceil().max(1.0) as usize;
        prop_assert!(plan.budget_used >= 1 && plan.budget_used <= cap);
        prop_assert_eq!(plan.budget_used, plan.positions.len());
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.positions.iter().all(|&p| !seq.is_special(p)));
        let covered: usize = plan.spans.iter().map(|s| s.len()).sum();
        prop_assert_eq!(covered, plan.positions.len());
        if scheme == Scheme::Token {
            prop_assert_eq!(plan.budget_used, mask_budget(m, cfg.rate));
            prop_assert!(plan.spans.iter().all(|s| s.len() == 1));
        }
        prop_assert!(plan.spans.iter().all(|s| s.len() <= cfg.max_span_len.max(2)));

        let again = sample_plan(scheme, &seq, Some(&np), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&plan, &again);
    }

    #[test]
    fn alpha_zero_matches_span_masking(
        lengths in prop::collection::vec(1usize..25, 1..5),
        cfg in mask_config_strategy(),
        seed in any::<u64>(),
    ) {
        let seq = segmented(&lengths);
        let cfg = MaskConfig { alpha: 0.0, ..cfg };
        let a = sample_np_mask(&seq, &np_for(&seq), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_span_mask(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_touches_only_corrupting_actions(
        lengths in prop::collection::vec(1usize..25, 1..4),
        seed in any::<u64>(),
    ) {
        let seq = segmented(&lengths);
        let v = vocab();
        let cfg = MaskConfig { rate: 0.4, ..MaskConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_span_mask(&seq, &cfg, &mut rng).unwrap();
        let before = seq.clone();
        let out = apply_mask(&seq, &plan, &v, &mut rng).unwrap();
        prop_assert_eq!(&seq, &before);
        let mut active = HashSet::new();
        for s in &plan.spans {
            for p in s.start..=s.end {
                match s.action {
                    Action::MaskToken => prop_assert_eq!(out[p], dapt_core::corpus::MASK),
                    Action::RandomToken => prop_assert!(!Vocab::is_special(out[p])),
                    Action::Keep => prop_assert_eq!(out[p], seq.token_ids[p]),
                }
                if s.action != Action::Keep {
                    active.insert(p);
                }
            }
        }
        for p in (0..seq.len()).filter(|p| !active.contains(p)) {
            prop_assert_eq!(out[p], seq.token_ids[p]);
        }
        let again = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_span_mask(&seq, &cfg, &mut rng).unwrap();
            apply_mask(&seq, &plan, &v, &mut rng).unwrap()
        };
        prop_assert_eq!(out, again);
    }
}
