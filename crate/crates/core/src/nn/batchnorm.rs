use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to batch and running variances.
pub const VARIANCE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

/// Batch statistics kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            scale: Array1::ones(features),
            shift: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
        }
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> Result<(Array2<f64>, BatchNormCache)> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::BatchSize(n));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
        let std = var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
        let normalized = centered / &std;
        let out = &normalized * &self.scale + &self.shift;
        Ok((out, BatchNormCache { normalized, mean, var }))
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let std = self.running_var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
        (x - &self.running_mean) / &std * &self.scale + &self.shift
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &cache.var * m;
    }

    /// Returns `(d_scale, d_shift, dx)`.
    pub fn backward(&self, cache: &BatchNormCache, dy: &Array2<f64>) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let xhat = &cache.normalized;
        let d_scale = (dy * xhat).sum_axis(Axis(0));
        let d_shift = dy.sum_axis(Axis(0));
        let dxhat = dy * &self.scale;
        let mean_dxhat = dxhat.mean_axis(Axis(0)).expect("nonempty batch");
        let mean_dxhat_xhat = (&dxhat * xhat).mean_axis(Axis(0)).expect("nonempty batch");
        let mut dx = Array2::zeros(dy.raw_dim());
        for j in 0..dy.ncols() {
            let var = cache.var[j];
            let floored = var < VARIANCE_FLOOR;
            let std = var.max(VARIANCE_FLOOR).sqrt();
            for i in 0..dy.nrows() {
                // a floored variance is constant, so only the mean path remains
                let g = if floored {
                    dxhat[[i, j]] - mean_dxhat[j]
                } else {
                    dxhat[[i, j]] - mean_dxhat[j] - xhat[[i, j]] * mean_dxhat_xhat[j]
                };
                dx[[i, j]] = g / std;
            }
        }
        (d_scale, d_shift, dx)
    }

    pub(crate) fn slices(&self) -> [&[f64]; 2] {
        [
            self.scale.as_slice().expect("standard layout"),
            self.shift.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.scale.as_slice_mut().expect("standard layout"),
            self.shift.as_slice_mut().expect("standard layout"),
        ]
    }
}
