use std::thread;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{generate, GenerationParams};
use crate::model::ModelWeights;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub instance_count: usize,
    /// Free-form description of the idle models held in memory.
    pub background: String,
    pub eval_rates: Vec<f64>,
    pub wall_times: Vec<f64>,
    pub generated_tokens: Vec<usize>,
    /// Sum of the per-instance rates.
    pub aggregate_rate: f64,
}

impl BenchResult {
    pub fn mean_rate(&self) -> f64 {
        self.aggregate_rate / self.instance_count.max(1) as f64
    }
}

/// Run `instances` generations concurrently on the same model. The
/// `background` models only occupy memory for the duration of the run.
pub fn bench_generate(
    model: &ModelWeights,
    tok: &Tokenizer,
    prompt: &str,
    p: &GenerationParams,
    instances: usize,
    background: &[ModelWeights],
    background_label: &str,
) -> Result<BenchResult> {
    if instances == 0 {
        return Err(Error::InvalidInput("at least one instance is required".into()));
    }
    p.validate()?;
    let resident: u64 = background.iter().map(|m| m.num_params()).sum();
    log::info!(
        "bench: {instances} instance(s), {} background model(s) holding {resident} parameters",
        background.len()
    );
    let reports = thread::scope(|s| {
        let handles: Vec<_> = (0..instances)
            .map(|i| {
                let params = GenerationParams {
                    seed: p.seed.wrapping_add(i as u64),
                    ..p.clone()
                };
                s.spawn(move || {
                    let start = Instant::now();
                    generate(model, tok, prompt, &params).map(|r| (r, start.elapsed().as_secs_f64()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let eval_rates: Vec<f64> = reports.iter().map(|(r, _)| r.eval_rate).collect();
    Ok(BenchResult {
        instance_count: instances,
        background: background_label.to_string(),
        aggregate_rate: eval_rates.iter().sum(),
        wall_times: reports.iter().map(|(_, t)| *t).collect(),
        generated_tokens: reports.iter().map(|(r, _)| r.generated_tokens).collect(),
        eval_rates,
    })
}
