use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], learning_rate: f64) -> Self {
        Self::with_hyper(params, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&Tensor<T>], learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Bytes held by the moment buffers.
    pub fn bytes(&self) -> usize {
        self.first_moment.iter().chain(&self.second_moment).map(|m| m.len() * std::mem::size_of::<T>()).sum()
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.first_moment.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("tensor {i}: {} values, {} grads, {} moments", p.len(), g.len(), state.first_moment[i].len()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.learning_rate);
    let eps = T::from_f64_lossy(state.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
