//! Dialogue corpora: vocabulary, session records, packing into flat
//! sequences, noun-phrase span distributions, and predicate selection.

mod flat;
mod nounphrase;
mod session;
mod vocab;

pub use flat::{
    flatten_session, rebase_noun_phrases, select_predicates, FlatRole, FlatSequence, FlatSpan,
};
pub use nounphrase::{load_np_distribution, parse_np_distribution, NounPhraseDistribution};
pub use session::{
    load_lexicon, load_sessions, parse_sessions, save_sessions, to_jsonl, token_corpus,
    DialogueSession, Role, Slot, Task, Turn,
};
pub use vocab::{Vocab, CLS, MASK, NUM_SPECIALS, PAD, SEP, SPECIAL_TOKENS, UNK};
