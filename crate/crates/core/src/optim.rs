//! Adam over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Entries with `trainable[i] == false` are
    /// left untouched, moments included.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, trainable: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_on_quadratic_matches_closed_form() {
        // f(x) = (x - 3)^2 at x = 1: g = -4.
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, 1);
        let mut x = [1.0];
        let g = 2.0 * (x[0] - 3.0);
        adam.update(&mut x, &[g], 0.01, &[true]);
        let m_hat = ((1.0 - cfg.beta1) * g) / (1.0 - cfg.beta1);
        let v_hat = ((1.0 - cfg.beta2) * g * g) / (1.0 - cfg.beta2);
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((x[0] - expected).abs() < 1e-12);
        // first step moves by ~lr in the descent direction
        assert!((x[0] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = [1.0, 1.0];
        adam.update(&mut p, &[1.0, 1.0], 0.1, &[false, true]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }
}
