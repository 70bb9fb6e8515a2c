//! Adam optimizer with bias-corrected moments.

use super::model::{CnnModel, Gradients};
use super::real::Real;
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(model: &CnnModel<R>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: model.zero_gradients(),
            v: model.zero_gradients(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to `model` and advances the step counter.
pub fn adam_step<R: Real>(model: &mut CnnModel<R>, grads: &Gradients<R>, state: &mut AdamState<R>, lr: f64) -> Result<()> {
    let shapes_match = grads.len() == state.m.len() && grads.iter().zip(&state.m).all(|(g, m)| g.len() == m.len());
    if !shapes_match {
        return arg_err("gradient shapes do not match the model");
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (R::from_f64(beta1), R::from_f64(beta2));
    let (one_b1, one_b2) = (R::from_f64(1.0 - beta1), R::from_f64(1.0 - beta2));
    // lr * m̂ / (sqrt(v̂) + ε) with the corrections folded into the constants
    let step_size = R::from_f64(lr / c1);
    let inv_sqrt_c2 = R::from_f64(1.0 / c2.sqrt());
    let eps = R::from_f64(epsilon);
    for (((w, g), m), v) in model
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..w.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            w[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}
