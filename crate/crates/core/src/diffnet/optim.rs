use std::sync::Arc;

use super::network::{GradVector, Layout, ParamVector};
use super::DiffError;

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &GradVector, max_norm: f64) -> GradVector {
    let mut out = grads.clone();
    clip_grad_norm_in_place(&mut out, max_norm);
    out
}

/// In-place form of [`clip_grad_norm`]; returns the pre-clip norm.
pub fn clip_grad_norm_in_place(grads: &mut GradVector, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.values.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(layout: &Arc<Layout>) -> Self {
        Self {
            first_moment: vec![0.0; layout.len],
            second_moment: vec![0.0; layout.len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Pure Adam step: returns the updated parameters and state.
pub fn adam_step(
    params: &ParamVector,
    grads: &GradVector,
    state: &AdamState,
    stepsize: f64,
) -> Result<(ParamVector, AdamState), DiffError> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update(&mut p, grads, &mut s, stepsize)?;
    Ok((p, s))
}

/// In-place Adam step. Inputs are left untouched on error.
pub fn adam_update(
    params: &mut ParamVector,
    grads: &GradVector,
    state: &mut AdamState,
    stepsize: f64,
) -> Result<(), DiffError> {
    if grads.values.len() != params.values.len() || state.first_moment.len() != params.values.len() {
        return Err(DiffError::LayoutMismatch {
            expected: params.values.len(),
            found: grads.values.len(),
        });
    }
    if !(stepsize > 0.0 && stepsize.is_finite()) {
        return Err(DiffError::RejectedInput(format!("stepsize {stepsize}")));
    }
    if grads.values.iter().any(|g| !g.is_finite()) {
        return Err(DiffError::NonFinite {
            term: "adam gradient".into(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= stepsize * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
