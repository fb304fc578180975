use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::EOT_MARKER;

/// One instruction/input/response triple. Serialized with the Alpaca key
/// `output` for the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    #[serde(rename = "output")]
    pub response: String,
}

impl FinetuneRecord {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        Self {
            instruction: instruction.into(),
            input: input.into(),
            response: response.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() || self.response.trim().is_empty() {
            return Err(Error::InvalidInput(
                "record needs a non-empty instruction and response".into(),
            ));
        }
        Ok(())
    }
}

/// Alpaca-style prompt. The `### Input:` section is dropped when the input
/// is empty.
pub fn render_prompt(rec: &FinetuneRecord, include_response: bool) -> String {
    let mut s = format!("### Instruction:\n{}\n\n", rec.instruction);
    if !rec.input.is_empty() {
        s.push_str(&format!("### Input:\n{}\n\n", rec.input));
    }
    s.push_str("### Response:\n");
    if include_response {
        s.push_str(&rec.response);
        s.push_str(EOT_MARKER);
    }
    s
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(p > 0.0 && p.is_finite()))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle followed by a contiguous split at rounded boundaries.
pub fn build_ft_dataset(
    records: &[FinetuneRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<FinetuneRecord>, Vec<FinetuneRecord>, Vec<FinetuneRecord>)> {
    ratios.validate()?;
    let n = records.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 records to split, got {n}"
        )));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut rng::stream(seed));
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    if val.is_empty() || test.is_empty() {
        log::warn!(
            "split of {n} records left val={} test={}",
            val.len(),
            test.len()
        );
    }
    Ok((shuffled, val, test))
}

/// JSON-lines with keys `instruction`, `input`, `output`. Blank lines are
/// skipped.
pub fn read_records(path: &Path) -> Result<Vec<FinetuneRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FinetuneRecord = serde_json::from_str(&line).map_err(|e| {
            Error::malformed("record", format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[FinetuneRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
