use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::checkpoint::Checkpoint;
use crate::corpus::{flatten_session, DialogueSession};
use crate::error::{Error, Result};
use crate::objectives::{impact_matrix, ImpactMatrix};

pub struct ProbeResult {
    pub session_id: String,
    pub tokens: Vec<String>,
    pub matrix: ImpactMatrix,
}

/// Pairwise impact matrix of every session under the checkpoint's encoder.
pub fn probe(ck: &Checkpoint, sessions: &[DialogueSession]) -> Result<Vec<ProbeResult>> {
    sessions
        .iter()
        .map(|s| {
            let seq = flatten_session(s, &ck.vocab, ck.config.train.max_len)?;
            let tokens = seq
                .token_ids
                .iter()
                .map(|&id| ck.vocab.token_of(id).unwrap_or("[UNK]").to_string())
                .collect();
            Ok(ProbeResult {
                session_id: s.session_id.clone(),
                tokens,
                matrix: impact_matrix(&ck.params, &seq.token_ids)?,
            })
        })
        .collect()
}

/// One block per sequence: a header, the tokens, then `n` rows of `n`
/// entries with six significant digits.
pub fn format_probe(results: &[ProbeResult]) -> String {
    let mut out = String::new();
    for r in results {
        let n = r.matrix.n();
        let _ = writeln!(out, "session = {} n = {n}", r.session_id);
        let _ = writeln!(out, "tokens = {}", r.tokens.join(" "));
        for i in 0..n {
            let row: Vec<String> = r.matrix.row(i).iter().map(|x| format!("{x:.5e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn write_probe(path: &Path, results: &[ProbeResult]) -> Result<()> {
    fs::write(path, format_probe(results)).map_err(|e| Error::io(path, e))
}
