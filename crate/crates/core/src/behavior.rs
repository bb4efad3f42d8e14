//! Behavior cloning of the logged clinician policy: a two-hidden-layer
//! rectifier network over decision inputs, fitted by Adam on mean
//! cross-entropy with an L2 weight penalty.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{history_dim, FeatureSchema, Standardizer, Trajectory, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, relu, relu_backward, rows_to_array, softmax_rows, AdamConfig, AdamState, Dense, ParamBlocks, Parameterized};
use crate::policy::{DecisionPoint, StochasticPolicy};

/// Floor applied to probabilities inside the cross-entropy.
pub const PROBA_FLOOR: f64 = 1e-12;

/// Logits network `affine -> relu -> affine -> relu -> affine`. Inputs are
/// raw decision inputs; the observation part of each lag block is
/// standardized with `input_scaler` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub input_scaler: Standardizer,
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
    /// Coefficient of the sum of squared weights (biases are not penalized).
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng>(scaler: Standardizer, hidden: [usize; 2], l2: f64, rng: &mut R) -> Self {
        let inputs = history_dim(scaler.dim());
        Self {
            input_scaler: scaler,
            hidden1: Dense::init(inputs, hidden[0], rng),
            hidden2: Dense::init(hidden[0], hidden[1], rng),
            output: Dense::init(hidden[1], N_ACTIONS, rng),
            l2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden1.inputs()
    }

    pub fn hidden_sizes(&self) -> [usize; 2] {
        [self.hidden1.outputs(), self.hidden2.outputs()]
    }

    /// Standardizes raw decision inputs, one per row.
    pub fn scale_inputs(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                raw.ncols(),
                self.input_dim()
            )));
        }
        let d = self.input_scaler.dim();
        let mut out = raw.clone();
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            for block in row.chunks_mut(d + N_ACTIONS) {
                self.input_scaler.apply_in_place(&mut block[..d]);
            }
        }
        Ok(out)
    }

    /// Logits for standardized inputs, with the activations needed by
    /// [`PolicyNet::backward_logits`].
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, PolicyCache) {
        let pre1 = self.hidden1.forward(x);
        let act1 = relu(&pre1);
        let pre2 = self.hidden2.forward(&act1);
        let act2 = relu(&pre2);
        let logits = self.output.forward(&act2);
        (
            logits,
            PolicyCache {
                input: x.clone(),
                pre1,
                act1,
                pre2,
                act2,
            },
        )
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Action probabilities for raw decision inputs.
    pub fn proba_raw(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits(&self.scale_inputs(raw)?)))
    }

    /// Parameter gradients of `sum(d_logits * logits)`; the L2 term is not
    /// included.
    pub fn backward_logits(&self, cache: &PolicyCache, d_logits: &Array2<f64>) -> ParamBlocks {
        let (dw3, db3, mut da2) = self.output.backward(&cache.act2, d_logits);
        relu_backward(&mut da2, &cache.pre2);
        let (dw2, db2, mut da1) = self.hidden2.backward(&cache.act1, &da2);
        relu_backward(&mut da1, &cache.pre1);
        let (dw1, db1, _) = self.hidden1.backward(&cache.input, &da1);
        vec![
            dw1.into_raw_vec_and_offset().0,
            db1.to_vec(),
            dw2.into_raw_vec_and_offset().0,
            db2.to_vec(),
            dw3.into_raw_vec_and_offset().0,
            db3.to_vec(),
        ]
    }

    /// Adds the gradient of the L2 penalty to weight blocks.
    pub fn add_l2_gradient(&self, grads: &mut ParamBlocks) {
        if self.l2 == 0.0 {
            return;
        }
        for (b, block) in self.param_slices().into_iter().enumerate().filter(|(b, _)| b % 2 == 0) {
            for (g, w) in grads[b].iter_mut().zip(block) {
                *g += 2.0 * self.l2 * w;
            }
        }
    }

    pub fn l2_penalty(&self) -> f64 {
        let sumsq = |d: &Dense| d.weight.iter().map(|w| w * w).sum::<f64>();
        self.l2 * (sumsq(&self.hidden1) + sumsq(&self.hidden2) + sumsq(&self.output))
    }

    /// Mean cross-entropy plus L2 penalty on standardized inputs, and its
    /// gradient.
    pub fn loss_and_grad(&self, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, ParamBlocks)> {
        check_labels(labels, x.nrows())?;
        let (logits, cache) = self.forward(x);
        let logp = log_softmax_rows(&logits);
        let n = labels.len() as f64;
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &a)| -logp[[i, a]].max(PROBA_FLOOR.ln()))
            .sum::<f64>()
            / n;
        let mut d = logp.mapv(f64::exp);
        for (i, &a) in labels.iter().enumerate() {
            // the floor is flat; no gradient flows through floored rows
            if logp[[i, a]] < PROBA_FLOOR.ln() {
                d.row_mut(i).fill(0.0);
            } else {
                d[[i, a]] -= 1.0;
            }
        }
        d /= n;
        let mut grads = self.backward_logits(&cache, &d);
        self.add_l2_gradient(&mut grads);
        Ok((ce + self.l2_penalty(), grads))
    }

    /// Objective of [`PolicyNet::loss_and_grad`] without the gradient.
    pub fn loss(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        check_labels(labels, x.nrows())?;
        Ok(mean_cross_entropy(&softmax_rows(&self.logits(x)), labels)? + self.l2_penalty())
    }
}

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{rows} inputs but {} labels", labels.len())));
    }
    if rows == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&a| a >= N_ACTIONS) {
        return Err(Error::Domain(format!("action label {bad} outside 0..{N_ACTIONS}")));
    }
    Ok(())
}

fn points_to_array(points: &[&DecisionPoint], dim: usize) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.history.clone()).collect();
    rows_to_array(&rows, dim)
}

impl Parameterized for PolicyNet {
    fn param_names(&self) -> Vec<String> {
        ["hidden1.weight", "hidden1.bias", "hidden2.weight", "hidden2.bias", "output.weight", "output.bias"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(6);
        v.extend(self.hidden1.slices());
        v.extend(self.hidden2.slices());
        v.extend(self.output.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(6);
        v.extend(self.hidden1.slices_mut());
        v.extend(self.hidden2.slices_mut());
        v.extend(self.output.slices_mut());
        v
    }
}

impl StochasticPolicy for PolicyNet {
    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        bc_predict_proba(self, &point.history)
    }

    fn action_proba_batch(&self, points: &[&DecisionPoint]) -> Result<Vec<Vec<f64>>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.proba_raw(&points_to_array(points, self.input_dim())?)?;
        Ok(p.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Softmax of the logits for one raw decision input.
pub fn bc_predict_proba(model: &PolicyNet, history: &[f64]) -> Result<Vec<f64>> {
    let x = rows_to_array(&[history.to_vec()], model.input_dim())?;
    Ok(model.proba_raw(&x)?.row(0).to_vec())
}

/// `-ln(proba[label])` with the probability floored at 1e-12.
pub fn cross_entropy(proba: &[f64], label: usize) -> Result<f64> {
    if label >= proba.len() {
        return Err(Error::Domain(format!("label {label} outside a {}-way distribution", proba.len())));
    }
    let sum: f64 = proba.iter().sum();
    if proba.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("not a probability distribution".into()));
    }
    Ok(-proba[label].max(PROBA_FLOOR).ln())
}

fn mean_cross_entropy(proba: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (row, &a) in proba.rows().into_iter().zip(labels) {
        total += -row[a].max(PROBA_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Decision inputs with the logged action at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct BcDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl BcDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::Domain(format!("action label {bad} outside 0..{N_ACTIONS}")));
        }
        Ok(Self { inputs, labels })
    }

    /// Every logged step of every trajectory.
    pub fn from_cohort(cohort: &[Trajectory], schema: &FeatureSchema) -> Result<Self> {
        let h = history_dim(schema.d_raw());
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for traj in cohort {
            for t in 0..traj.len() {
                let p = DecisionPoint::from_trajectory(traj, t, schema)?;
                if p.history.len() != h {
                    return Err(Error::Shape(format!("patient {}: width does not match schema", traj.patient_id)));
                }
                flat.extend_from_slice(&p.history);
                labels.push(traj.steps[t].action.flat_index());
            }
        }
        let inputs = Array2::from_shape_vec((labels.len(), h), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Observation standardizer from the current-observation block.
    fn fit_scaler(&self, d_raw: usize) -> Result<Standardizer> {
        Standardizer::fit(
            self.inputs
                .rows()
                .into_iter()
                .map(|r| &r.to_slice().expect("standard layout")[..d_raw]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 64],
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig::default(),
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 {
            return Err(Error::Config("hidden widths and batch_size must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::Config(format!("l2 {} must be finite and >= 0", self.l2)));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcEpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy on the training set (no penalty).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Mean cross-entropy and top-1 accuracy of `model` on `data`.
pub fn bc_evaluate(model: &PolicyNet, data: &BcDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let proba = model.proba_raw(&data.inputs)?;
    let ce = mean_cross_entropy(&proba, &data.labels)?;
    let hits = proba
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &a)| argmax(row.as_slice().expect("standard layout")) == a)
        .count();
    Ok((ce, hits as f64 / data.len() as f64))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits a [`PolicyNet`] by mini-batch Adam; returns the snapshot with the
/// lowest validation cross-entropy and the per-epoch curve.
pub fn bc_fit(
    train: &BcDataset,
    val: &BcDataset,
    d_raw: usize,
    config: &BcConfig,
) -> Result<(PolicyNet, Vec<BcEpochRecord>)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("empty training or validation set".into()));
    }
    check_labels(&train.labels, train.len())?;
    check_labels(&val.labels, val.len())?;
    if train.inputs.ncols() != history_dim(d_raw) || val.inputs.ncols() != history_dim(d_raw) {
        return Err(Error::Shape("dataset width does not match the schema".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scaler = train.fit_scaler(d_raw)?;
    let mut model = PolicyNet::new(scaler, config.hidden, config.l2, &mut rng);
    let train_x = model.scale_inputs(&train.inputs)?;
    let mut adam = AdamState::for_params(&model.param_slices(), config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, PolicyNet)> = None;
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = train_x.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (_, grads) = model.loss_and_grad(&x, &labels)?;
            adam.step(model.param_slices_mut(), &grads)?;
        }
        let (train_loss, _) = bc_evaluate(&model, train)?;
        let (val_loss, val_accuracy) = bc_evaluate(&model, val)?;
        curve.push(BcEpochRecord { epoch, train_loss, val_loss, val_accuracy });
        if best.as_ref().is_none_or(|(v, _)| val_loss < *v) {
            best = Some((val_loss, model.clone()));
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), curve))
}
