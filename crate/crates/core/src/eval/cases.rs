use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Generated tokens inspected for a label.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub prompt: String,
    pub expected: String,
    pub labels: Vec<String>,
}

impl EvalCase {
    /// The expected label must be in the set, and no label may be a prefix
    /// of another once case-folded.
    pub fn validate(&self) -> Result<()> {
        if !self.labels.contains(&self.expected) {
            return Err(Error::InvalidInput(format!(
                "expected label {:?} not in {:?}",
                self.expected, self.labels
            )));
        }
        let folded: Vec<String> = self.labels.iter().map(|l| normalize_text(l)).collect();
        for (i, a) in folded.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidInput("empty label".into()));
            }
            for (j, b) in folded.iter().enumerate() {
                if i != j && b.starts_with(a.as_str()) {
                    return Err(Error::InvalidInput(format!(
                        "label {:?} is a prefix of {:?}",
                        self.labels[i], self.labels[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Line breaks become spaces, whitespace runs collapse, case is folded.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Label found earliest in the decoded first `k` tokens, if any. Tokens
/// after an end-of-text token are ignored.
pub fn match_label_ids(tok: &Tokenizer, ids: &[u32], case: &EvalCase, k: usize) -> Option<String> {
    let head: Vec<u32> = ids
        .iter()
        .copied()
        .take(k.max(1))
        .take_while(|&t| t != tok.eot_id())
        .collect();
    let text = normalize_text(&tok.decode(&head).ok()?);
    case.labels
        .iter()
        .filter_map(|l| text.find(&normalize_text(l)).map(|pos| (pos, l)))
        .min_by_key(|&(pos, _)| pos)
        .map(|(_, l)| l.clone())
}

/// [`match_label_ids`] on the tokenization of `generated`.
pub fn match_label(tok: &Tokenizer, generated: &str, case: &EvalCase, k: usize) -> Option<String> {
    match_label_ids(tok, &tok.encode(generated), case, k)
}

/// JSON-lines with keys `prompt`, `expected`, `labels`; each case is
/// validated.
pub fn read_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase = serde_json::from_str(&line)
            .map_err(|e| Error::malformed("eval case", format!("{}:{}: {e}", path.display(), i + 1)))?;
        case.validate()?;
        out.push(case);
    }
    Ok(out)
}

pub fn write_cases(path: &Path, cases: &[EvalCase]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
