use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eval_mse, MlpDynamics, TransitionSet};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpTrainConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 128],
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl MlpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for batch normalization".into()));
        }
        self.adam.validate()
    }
}

/// Train and validation MSE after one epoch, in the units of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Splits shuffled indices into batches; a trailing batch of one joins the
/// previous batch.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("nonempty") = &order[start..];
    }
    out
}

/// Mini-batch Adam on mean squared error. Returns the snapshot with the
/// lowest validation MSE and the full curve; train and validation MSE are
/// measured with inference-mode statistics after each epoch.
pub fn train_dynamics(
    train: &TransitionSet,
    val: &TransitionSet,
    config: &MlpTrainConfig,
) -> Result<(MlpDynamics, Vec<EpochRecord>)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("empty training or validation split".into()));
    }
    if train.len() < 2 {
        return Err(Error::BatchSize(train.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inputs = train.histories.ncols();
    let outputs = train.deltas.ncols();
    let mut model = MlpDynamics::new(inputs, config.hidden, outputs, &mut rng);
    let mut adam = AdamState::for_params(&model.param_slices(), config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, MlpDynamics)> = None;
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, config.batch_size) {
            let b = train.select(batch);
            let (out, cache) = model.forward_train(&b.histories)?;
            let (_, grads) = model.backward(&cache, &out, &b.deltas)?;
            model.update_running(&cache);
            adam.step(model.param_slices_mut(), &grads)?;
        }
        let train_mse = eval_mse(&model, train)?;
        let val_mse = eval_mse(&model, val)?;
        curve.push(EpochRecord { epoch, train_mse, val_mse });
        if best.as_ref().is_none_or(|(v, _)| val_mse < *v) {
            best = Some((val_mse, model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, curve))
}
