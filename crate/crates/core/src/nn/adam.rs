use serde::{Deserialize, Serialize};

use super::ParamBlocks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments for every parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamBlocks,
    second: ParamBlocks,
}

impl AdamState {
    pub fn new(block_sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&[f64]], config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(&sizes, config)
    }

    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "Adam tracks {} blocks, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::Shape(format!("Adam block {i} size mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[b];
            let v = &mut self.second[b];
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
