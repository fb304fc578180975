use std::collections::BTreeSet;

use serde::Serialize;

use super::{match_label_ids, EvalCase};
use crate::error::{Error, Result};
use crate::inference::{generate_ids, GenerationParams};
use crate::model::ModelWeights;
use crate::tokenizer::Tokenizer;

/// Expected label and prediction for one case; `None` marks an invalid
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaseOutcome {
    pub expected: String,
    pub predicted: Option<String>,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub labels: Vec<String>,
    /// `confusion[expected][predicted]`; the last column counts invalid
    /// predictions.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    pub correct: u64,
    pub invalid: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub outcomes: Vec<CaseOutcome>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Build the confusion matrix and metrics. Classes are every label that
/// occurs as expected or predicted, sorted. An invalid prediction is a
/// false negative for its expected class and a false positive for none.
pub fn summarize(outcomes: Vec<CaseOutcome>) -> Result<EvalSummary> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let labels: Vec<String> = outcomes
        .iter()
        .flat_map(|o| std::iter::once(&o.expected).chain(o.predicted.as_ref()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let idx = |l: &str| labels.iter().position(|x| x == l).expect("label collected");
    let n = labels.len();
    let mut confusion = vec![vec![0u64; n + 1]; n];
    for o in &outcomes {
        let col = o.predicted.as_deref().map_or(n, idx);
        confusion[idx(&o.expected)][col] += 1;
    }
    let total = outcomes.len() as u64;
    let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let invalid: u64 = confusion.iter().map(|row| row[n]).sum();
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|i| {
            let tp = confusion[i][i];
            let predicted: u64 = (0..n).map(|r| confusion[r][i]).sum();
            let support: u64 = confusion[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: labels[i].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64;
    Ok(EvalSummary {
        labels,
        confusion,
        total,
        correct,
        invalid,
        accuracy: 100.0 * correct as f64 / total as f64,
        per_class,
        macro_f1,
        outcomes,
    })
}

/// Generate `k` tokens for each case and match them against its labels.
/// Prompts that do not fit the context are counted as invalid.
pub fn evaluate(
    model: &ModelWeights,
    tok: &Tokenizer,
    cases: &[EvalCase],
    params: &GenerationParams,
    k: usize,
) -> Result<EvalSummary> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let params = GenerationParams {
        max_new_tokens: k.max(1),
        ..params.clone()
    };
    let mut outcomes = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        case.validate()?;
        let ids = tok.encode(&case.prompt);
        let generated = match generate_ids(model, &ids, tok.eot_id(), &params) {
            Ok((g, _, _)) => g,
            Err(Error::ContextOverflow { len, ctx }) => {
                log::warn!("case {i}: prompt of {len} tokens exceeds the {ctx}-token context");
                outcomes.push(CaseOutcome {
                    expected: case.expected.clone(),
                    predicted: None,
                    generated: String::new(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let text_ids: Vec<u32> = generated
            .iter()
            .copied()
            .take_while(|&t| t != tok.eot_id())
            .collect();
        outcomes.push(CaseOutcome {
            expected: case.expected.clone(),
            predicted: match_label_ids(tok, &generated, case, k),
            generated: tok.decode(&text_ids)?,
        });
    }
    summarize(outcomes)
}
