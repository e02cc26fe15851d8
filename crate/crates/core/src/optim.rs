//! ADAM with bias-corrected moment estimates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let AdamConfig { learning_rate, beta1, beta2, eps } = config;
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Domain(format!("betas ({beta1}, {beta2}) must lie in [0, 1)")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { config, step: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Applies one update to every trainable tensor from its accumulated gradient.
    ///
    /// The parameter list must be the same (same order, same sizes) on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Shape("parameter set changed between ADAM steps".into()));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("parameter after ADAM step".into()));
            }
        }
        Ok(())
    }
}
