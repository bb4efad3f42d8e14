use serde::{Deserialize, Serialize};

use super::action::N_ACTIONS;
use super::features::N_LAGS;
use crate::error::{Error, Result};

/// Per-feature z-scoring with population standard deviation. Features with
/// zero variance keep a unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for row in rows {
            if count == 0 {
                mean = vec![0.0; row.len()];
                m2 = vec![0.0; row.len()];
            } else if row.len() != mean.len() {
                return Err(Error::Shape(format!(
                    "row of length {} in a {}-feature set",
                    row.len(),
                    mean.len()
                )));
            }
            count += 1;
            // Welford update
            for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let delta = x - *m;
                *m += delta / count as f64;
                *s += delta * (x - *m);
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData(
                "cannot fit a standardizer on zero rows".into(),
            ));
        }
        let std = m2
            .iter()
            .map(|&s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// Standardizes every observation block of a stacked state vector.
    pub fn apply_state(&self, state: &[f64]) -> Vec<f64> {
        let mut out = state.to_vec();
        for block in out.chunks_mut(self.dim()) {
            self.apply_in_place(block);
        }
        out
    }

    /// Standardizes the observation part of every lag block of a history
    /// vector; action one-hots pass through.
    pub fn apply_history(&self, history: &[f64]) -> Vec<f64> {
        let mut out = history.to_vec();
        let d = self.dim();
        debug_assert_eq!(out.len(), N_LAGS * (d + N_ACTIONS));
        for block in out.chunks_mut(d + N_ACTIONS) {
            self.apply_in_place(&mut block[..d]);
        }
        out
    }
}
