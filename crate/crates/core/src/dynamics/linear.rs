use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::DeltaPredictor;
use crate::error::{Error, Result};

/// Ridge regression from history vectors to observation deltas. The bias
/// is not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    /// Shape `(outputs, inputs)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub ridge_lambda: f64,
}

impl LinearDynamics {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            ridge_lambda: 0.0,
        }
    }
}

impl DeltaPredictor for LinearDynamics {
    fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn predict(&self, histories: &Array2<f64>) -> Array2<f64> {
        histories.dot(&self.weights.t()) + &self.bias
    }
}

/// Solves the centered normal equations `(Xc'Xc + lambda I) W = Xc'Yc`.
/// Rank-deficient systems (e.g. one-hot blocks that always sum to one)
/// get the minimum-norm solution.
pub fn fit_linear(histories: &Array2<f64>, deltas: &Array2<f64>, ridge_lambda: f64) -> Result<LinearDynamics> {
    let n = histories.nrows();
    if n == 0 {
        return Err(Error::InsufficientData("linear fit needs at least one sample".into()));
    }
    if deltas.nrows() != n {
        return Err(Error::Shape(format!(
            "{n} histories but {} deltas",
            deltas.nrows()
        )));
    }
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(Error::Config(format!("ridge_lambda {ridge_lambda} must be finite and >= 0")));
    }
    let x_mean = histories.mean_axis(Axis(0)).expect("n > 0");
    let y_mean = deltas.mean_axis(Axis(0)).expect("n > 0");
    let xc = histories - &x_mean;
    let yc = deltas - &y_mean;
    let mut gram = xc.t().dot(&xc);
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge_lambda;
    }
    let cross = xc.t().dot(&yc);

    let h = gram.nrows();
    let d = cross.ncols();
    let a = DMatrix::from_fn(h, h, |i, j| gram[[i, j]]);
    let b = DMatrix::from_fn(h, d, |i, j| cross[[i, j]]);
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = (max_sv * 1e-12).max(f64::MIN_POSITIVE);
    let w = svd
        .solve(&b, tol)
        .map_err(|e| Error::Shape(format!("normal equations: {e}")))?;

    let weights = Array2::from_shape_fn((d, h), |(i, j)| w[(j, i)]);
    let bias = &y_mean - &weights.dot(&x_mean);
    Ok(LinearDynamics {
        weights,
        bias,
        ridge_lambda,
    })
}
