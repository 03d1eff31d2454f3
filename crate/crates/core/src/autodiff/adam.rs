use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// First-order update rule over a fixed, ordered list of flat parameter buffers.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AutodiffError>;

    fn learning_rate(&self) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

fn check_shapes(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<(), AutodiffError> {
    if params.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch { op: "optimizer", detail: format!("{} parameters but {} gradients", params.len(), grads.len()) });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(AutodiffError::ShapeMismatch { op: "optimizer", detail: format!("parameter {i} has {} values but gradient has {}", p.len(), g.len()) });
        }
    }
    Ok(())
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AutodiffError> {
        check_shapes(params, grads)?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(AutodiffError::ShapeMismatch { op: "adam", detail: "parameter list differs from the one the moments were created for".into() });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.config.lr
    }
}

/// Plain gradient descent `θ ← θ − lr·g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AutodiffError> {
        check_shapes(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, d) in p.iter_mut().zip(g.iter()) {
                *x -= self.lr * d;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
