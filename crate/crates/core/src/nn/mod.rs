//! Small dense-network toolkit with hand-written backward passes: affine
//! layers, batch normalization, rectifiers and Adam.

mod adam;
mod batchnorm;
mod dense;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNorm, BatchNormCache, VARIANCE_FLOOR};
pub use dense::Dense;

use ndarray::Array2;

/// Gradients (or any per-parameter buffers) in a model's parameter order.
pub type ParamBlocks = Vec<Vec<f64>>;

/// Models that expose their parameters as flat slices in a fixed order.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn zeros_like(&self) -> ParamBlocks {
        self.param_slices().iter().map(|s| vec![0.0; s.len()]).collect()
    }
}

pub fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Masks `grad` by the rectifier's derivative at pre-activation `z`.
pub fn relu_backward(grad: &mut Array2<f64>, z: &Array2<f64>) {
    ndarray::Zip::from(grad).and(z).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>], dim: usize) -> crate::Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(crate::Error::Shape(format!(
                "row of length {} where {dim} expected",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), dim), flat).map_err(|e| crate::Error::Shape(e.to_string()))
}
