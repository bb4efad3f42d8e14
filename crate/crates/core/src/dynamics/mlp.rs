use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DeltaPredictor;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, BatchNorm, BatchNormCache, Dense, ParamBlocks, Parameterized};

/// `affine -> batch-norm -> relu` twice, then an affine output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDynamics {
    pub hidden1: Dense,
    pub norm1: BatchNorm,
    pub hidden2: Dense,
    pub norm2: BatchNorm,
    pub output: Dense,
}

/// Intermediate activations of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    bn1: BatchNormCache,
    post1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    bn2: BatchNormCache,
    post2: Array2<f64>,
    act2: Array2<f64>,
}

impl MlpDynamics {
    pub fn new<R: Rng>(inputs: usize, hidden: [usize; 2], outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden1: Dense::init(inputs, hidden[0], rng),
            norm1: BatchNorm::new(hidden[0]),
            hidden2: Dense::init(hidden[0], hidden[1], rng),
            norm2: BatchNorm::new(hidden[1]),
            output: Dense::init(hidden[1], outputs, rng),
        }
    }

    pub fn hidden_sizes(&self) -> [usize; 2] {
        [self.hidden1.outputs(), self.hidden2.outputs()]
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.hidden1.inputs() {
            return Err(Error::Shape(format!(
                "history width {} but network expects {}",
                x.ncols(),
                self.hidden1.inputs()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        Ok(())
    }

    /// Training-mode pass with batch statistics. Running statistics are
    /// left untouched; see [`MlpDynamics::update_running`].
    pub fn forward_train(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let pre1 = self.hidden1.forward(x);
        let (post1, bn1) = self.norm1.forward_train(&pre1)?;
        let act1 = relu(&post1);
        let pre2 = self.hidden2.forward(&act1);
        let (post2, bn2) = self.norm2.forward_train(&pre2)?;
        let act2 = relu(&post2);
        let out = self.output.forward(&act2);
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre1,
                bn1,
                post1,
                act1,
                pre2,
                bn2,
                post2,
                act2,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &MlpCache) {
        self.norm1.update_running(&cache.bn1);
        self.norm2.update_running(&cache.bn2);
    }

    /// Inference pass with running statistics.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let a1 = relu(&self.norm1.forward_eval(&self.hidden1.forward(x)));
        let a2 = relu(&self.norm2.forward_eval(&self.hidden2.forward(&a1)));
        self.output.forward(&a2)
    }

    /// Forward pass; training mode uses batch statistics and folds them
    /// into the running averages.
    pub fn forward(&mut self, x: &Array2<f64>, training: bool) -> Result<Array2<f64>> {
        if training {
            let (out, cache) = self.forward_train(x)?;
            self.update_running(&cache);
            Ok(out)
        } else {
            self.check_input(x)?;
            Ok(self.forward_eval(x))
        }
    }

    /// Mean squared error over samples and outputs, and its gradient for
    /// every parameter, from a training-mode cache.
    pub fn backward(&self, cache: &MlpCache, output: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, ParamBlocks)> {
        if output.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "predictions {:?} vs targets {:?}",
                output.dim(),
                targets.dim()
            )));
        }
        let diff = output - targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
        let d_out = diff * (2.0 / count);
        Ok((loss, self.backward_from(cache, &d_out)))
    }

    /// Parameter gradients for an arbitrary upstream gradient at the output.
    pub fn backward_from(&self, cache: &MlpCache, d_out: &Array2<f64>) -> ParamBlocks {
        let (dw3, db3, mut da2) = self.output.backward(&cache.act2, d_out);
        relu_backward(&mut da2, &cache.post2);
        let (dg2, dbeta2, dpre2) = self.norm2.backward(&cache.bn2, &da2);
        let (dw2, db2, mut da1) = self.hidden2.backward(&cache.act1, &dpre2);
        relu_backward(&mut da1, &cache.post1);
        let (dg1, dbeta1, dpre1) = self.norm1.backward(&cache.bn1, &da1);
        let (dw1, db1, _) = self.hidden1.backward(&cache.input, &dpre1);
        let _ = &cache.pre1;
        let _ = &cache.pre2;
        [
            dw1.into_raw_vec_and_offset().0,
            db1.to_vec(),
            dg1.to_vec(),
            dbeta1.to_vec(),
            dw2.into_raw_vec_and_offset().0,
            db2.to_vec(),
            dg2.to_vec(),
            dbeta2.to_vec(),
            dw3.into_raw_vec_and_offset().0,
            db3.to_vec(),
        ]
        .into()
    }

    /// Mean squared error of a training-mode pass, for gradient checks.
    pub fn train_loss(&self, x: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
        let (out, _) = self.forward_train(x)?;
        let diff = out - targets;
        Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
    }
}

impl Parameterized for MlpDynamics {
    fn param_names(&self) -> Vec<String> {
        [
            "hidden1.weight",
            "hidden1.bias",
            "norm1.scale",
            "norm1.shift",
            "hidden2.weight",
            "hidden2.bias",
            "norm2.scale",
            "norm2.shift",
            "output.weight",
            "output.bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(10);
        v.extend(self.hidden1.slices());
        v.extend(self.norm1.slices());
        v.extend(self.hidden2.slices());
        v.extend(self.norm2.slices());
        v.extend(self.output.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(10);
        v.extend(self.hidden1.slices_mut());
        v.extend(self.norm1.slices_mut());
        v.extend(self.hidden2.slices_mut());
        v.extend(self.norm2.slices_mut());
        v.extend(self.output.slices_mut());
        v
    }
}

impl DeltaPredictor for MlpDynamics {
    fn input_dim(&self) -> usize {
        self.hidden1.inputs()
    }

    fn output_dim(&self) -> usize {
        self.output.outputs()
    }

    fn predict(&self, histories: &Array2<f64>) -> Array2<f64> {
        self.forward_eval(histories)
    }
}
