use crate::error::{Error, Result};

/// Min-max scale readings into integers in `[0, 100]`.
///
/// `v ↦ round(100·(v−lo)/(hi−lo))`, clamped. A degenerate range
/// (`hi == lo`) maps everything to 0.
pub fn normalize_series(values: &[f64], lo: f64, hi: f64) -> Result<Vec<u32>> {
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::InvalidInput(format!(
            "normalization range [{lo}, {hi}] is not a finite non-empty interval"
        )));
    }
    let span = hi - lo;
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if !v.is_finite() {
                return Err(Error::NonFinite { index, value: v });
            }
            if span == 0.0 {
                return Ok(0);
            }
            let scaled = (100.0 * (v - lo) / span).round();
            Ok(scaled.clamp(0.0, 100.0) as u32)
        })
        .collect()
}
