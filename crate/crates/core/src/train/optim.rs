use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::TrainHyper;

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-finite norm leaves the
/// gradients untouched and is reported as an error so the caller can skip
/// the step.
pub fn clip_gradients(grads: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidInput(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Bias-corrected AdamW. Decoupled weight decay applies only to tensors
/// with two or more dimensions.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
    h: &TrainHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "param {:?} vs grad {:?} vs moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let step_size = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = h.eps as f32;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.ndim() >= 2 {
            1.0 - (lr * h.weight_decay) as f32
        } else {
            1.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w *= decay;
            *w -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let mut t = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let norm = clip_gradients(&mut [&mut t], 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((t.data()[0] - 0.6).abs() < 1e-7 && (t.data()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_reported() {
        let mut t = Tensor::from_vec(&[2], vec![f32::NAN, 1.0]);
        assert!(matches!(
            clip_gradients(&mut [&mut t], 1.0),
            Err(Error::NonFiniteGradient)
        ));
    }
}
