use crate::error::{KnitworkError, Result};
use crate::tensor::Tensor;

/// Adam optimizer state for one parameter set.
///
/// Moment arrays are kept in the same order as the parameter list handed to
/// [`AdamState::step`]; that order must stay fixed for the lifetime of the
/// state (checkpointing relies on it too).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update over `params`, consuming their
    /// gradients (grads are zeroed afterwards).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(KnitworkError::contract(format!(
                "adam step: {} params vs state for {}",
                params.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (idx, p) in params.iter().enumerate() {
            let grad = p.take_grad().ok_or_else(|| {
                KnitworkError::contract(format!("adam step: parameter {idx} has no gradient"))
            })?;
            if grad.len() != self.first_moment[idx].len() {
                return Err(KnitworkError::contract(format!(
                    "adam step: parameter {idx} gradient length changed"
                )));
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
            p.update_data(|data| {
                for i in 0..grad.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
