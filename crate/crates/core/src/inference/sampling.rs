use std::collections::HashSet;

use rand::Rng;

use super::GenerationParams;

/// Penalize every distinct id in `history`: positive logits are divided by
/// `penalty`, the rest multiplied by it.
pub fn apply_repeat_penalty(logits: &mut [f32], history: &[u32], penalty: f32) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = HashSet::with_capacity(history.len());
    for &id in history {
        if !seen.insert(id) {
            continue;
        }
        if let Some(l) = logits.get_mut(id as usize) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Greedy argmax (lowest id wins ties) at temperature 0, otherwise a draw
/// from `softmax(logits / temperature)`.
pub fn sample_token(logits: &[f32], params: &GenerationParams, rng: &mut impl Rng) -> u32 {
    if params.temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let t = f64::from(params.temperature);
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&v| ((f64::from(v) - f64::from(max)) / t).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i as u32;
        }
        r -= w;
    }
    // Rounding left a sliver of mass past the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32
}
