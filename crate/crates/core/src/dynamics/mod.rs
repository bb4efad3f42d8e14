//! Environment models that predict the observation change `obs_{t+1} - obs_t`
//! from the history vector, and the rollout engine built on them.
//!
//! Models work in standardized units: the observation part of each history
//! block is z-scored with the observation scaler and targets are z-scored
//! deltas. [`EnvModel`] wraps a fitted predictor with both scalers and maps
//! raw histories to raw deltas.

mod linear;
mod mlp;
mod rollout;
mod train;

pub use linear::{fit_linear, LinearDynamics};
pub use mlp::{MlpCache, MlpDynamics};
pub use rollout::{
    rollout, rollout_batch, write_rollout_csv, ActionSource, RolloutConfig, RolloutResult,
    RolloutStart, DEFAULT_HORIZON,
};
pub use train::{train_dynamics, EpochRecord, MlpTrainConfig};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{build_history, history_dim, FeatureSchema, Standardizer, Trajectory};
use crate::error::{Error, Result};

/// Anything mapping a batch of (standardized) histories to (standardized)
/// deltas, one row per sample.
pub trait DeltaPredictor {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, histories: &Array2<f64>) -> Array2<f64>;
}

/// Mean over samples and output dimensions of the squared error.
pub fn eval_mse_arrays(
    model: &dyn DeltaPredictor,
    histories: &Array2<f64>,
    deltas: &Array2<f64>,
) -> Result<f64> {
    if histories.nrows() == 0 {
        return Err(Error::InsufficientData("cannot evaluate on an empty dataset".into()));
    }
    if histories.ncols() != model.input_dim() || deltas.ncols() != model.output_dim() || deltas.nrows() != histories.nrows() {
        return Err(Error::Shape(format!(
            "dataset {:?} -> {:?} for a {} -> {} model",
            histories.dim(),
            deltas.dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let pred = model.predict(histories);
    Ok(squared_error_sum(&pred, deltas) / pred.len() as f64)
}

pub fn eval_mse(model: &dyn DeltaPredictor, data: &TransitionSet) -> Result<f64> {
    eval_mse_arrays(model, &data.histories, &data.deltas)
}

fn squared_error_sum(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// History/delta pairs, one row per logged transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub histories: Array2<f64>,
    pub deltas: Array2<f64>,
}

impl TransitionSet {
    pub fn new(histories: Array2<f64>, deltas: Array2<f64>) -> Result<Self> {
        if histories.nrows() != deltas.nrows() {
            return Err(Error::Shape(format!(
                "{} histories but {} deltas",
                histories.nrows(),
                deltas.nrows()
            )));
        }
        Ok(Self { histories, deltas })
    }

    /// Every transition `t -> t+1` with both observations logged.
    pub fn from_cohort(cohort: &[Trajectory], schema: &FeatureSchema) -> Result<Self> {
        let d = schema.d_raw();
        let h = history_dim(d);
        let mut hist = Vec::new();
        let mut delta = Vec::new();
        let mut n = 0;
        for traj in cohort {
            for t in 0..traj.len().saturating_sub(1) {
                let hv = build_history(traj, t)?;
                if hv.0.len() != h {
                    return Err(Error::Shape(format!(
                        "patient {}: observation width does not match the {d}-feature schema",
                        traj.patient_id
                    )));
                }
                hist.extend_from_slice(&hv.0);
                let now = traj.steps[t].obs.values();
                let next = traj.steps[t + 1].obs.values();
                delta.extend(next.iter().zip(now).map(|(b, a)| b - a));
                n += 1;
            }
        }
        let histories = Array2::from_shape_vec((n, h), hist).map_err(|e| Error::Shape(e.to_string()))?;
        let deltas = Array2::from_shape_vec((n, d), delta).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { histories, deltas })
    }

    pub fn len(&self) -> usize {
        self.histories.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            histories: self.histories.select(Axis(0), rows),
            deltas: self.deltas.select(Axis(0), rows),
        }
    }
}

/// Observation and delta standardizers fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsScalers {
    pub obs: Standardizer,
    pub delta: Standardizer,
}

impl DynamicsScalers {
    pub fn identity(d_raw: usize) -> Self {
        Self {
            obs: Standardizer::identity(d_raw),
            delta: Standardizer::identity(d_raw),
        }
    }

    /// Observation scaler from the current-observation block of each
    /// history; delta scaler from the targets.
    pub fn fit(data: &TransitionSet) -> Result<Self> {
        let d = data.deltas.ncols();
        let obs = Standardizer::fit(
            data.histories
                .rows()
                .into_iter()
                .map(|r| r.to_slice().expect("standard layout"))
                .map(|r| &r[..d]),
        )?;
        let delta = Standardizer::fit(
            data.deltas
                .rows()
                .into_iter()
                .map(|r| r.to_slice().expect("standard layout")),
        )?;
        Ok(Self { obs, delta })
    }

    pub fn scale_histories(&self, histories: &Array2<f64>) -> Array2<f64> {
        let mut out = histories.clone();
        let d = self.obs.dim();
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            for block in row.chunks_mut(d + crate::data::N_ACTIONS) {
                self.obs.apply_in_place(&mut block[..d]);
            }
        }
        out
    }

    pub fn scale_deltas(&self, deltas: &Array2<f64>) -> Array2<f64> {
        let mut out = deltas.clone();
        for mut row in out.rows_mut() {
            self.delta.apply_in_place(row.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn unscale_deltas(&self, deltas: &Array2<f64>) -> Array2<f64> {
        let mut out = deltas.clone();
        for mut row in out.rows_mut() {
            let raw = self.delta.invert(row.as_slice().expect("standard layout"));
            row.iter_mut().zip(raw).for_each(|(v, r)| *v = r);
        }
        out
    }

    pub fn scale(&self, data: &TransitionSet) -> TransitionSet {
        TransitionSet {
            histories: self.scale_histories(&data.histories),
            deltas: self.scale_deltas(&data.deltas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum DynamicsModel {
    Linear(LinearDynamics),
    Mlp(MlpDynamics),
}

impl DeltaPredictor for DynamicsModel {
    fn input_dim(&self) -> usize {
        match self {
            DynamicsModel::Linear(m) => m.input_dim(),
            DynamicsModel::Mlp(m) => m.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            DynamicsModel::Linear(m) => m.output_dim(),
            DynamicsModel::Mlp(m) => m.output_dim(),
        }
    }

    fn predict(&self, histories: &Array2<f64>) -> Array2<f64> {
        match self {
            DynamicsModel::Linear(m) => m.predict(histories),
            DynamicsModel::Mlp(m) => m.predict(histories),
        }
    }
}

/// A fitted predictor together with its scalers and schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub schema: FeatureSchema,
    pub scalers: DynamicsScalers,
    pub model: DynamicsModel,
}

impl EnvModel {
    pub fn new(schema: FeatureSchema, scalers: DynamicsScalers, model: DynamicsModel) -> Result<Self> {
        let d = schema.d_raw();
        if model.input_dim() != history_dim(d) || model.output_dim() != d || scalers.obs.dim() != d || scalers.delta.dim() != d {
            return Err(Error::Shape(format!(
                "model {} -> {} does not fit a {d}-feature schema",
                model.input_dim(),
                model.output_dim()
            )));
        }
        Ok(Self { schema, scalers, model })
    }

    pub fn d_raw(&self) -> usize {
        self.schema.d_raw()
    }

    /// Standardized deltas for raw histories.
    pub fn predict_scaled(&self, histories: &Array2<f64>) -> Array2<f64> {
        self.model.predict(&self.scalers.scale_histories(histories))
    }

    /// Raw deltas for raw histories.
    pub fn predict_deltas(&self, histories: &Array2<f64>) -> Array2<f64> {
        self.scalers.unscale_deltas(&self.predict_scaled(histories))
    }

    /// MSE in standardized delta units on raw transitions.
    pub fn scaled_mse(&self, data: &TransitionSet) -> Result<f64> {
        eval_mse(&self.model, &self.scalers.scale(data))
    }
}

/// Fits the closed-form model on standardized training transitions.
pub fn fit_linear_env(schema: &FeatureSchema, train: &TransitionSet, ridge_lambda: f64) -> Result<EnvModel> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let scalers = DynamicsScalers::fit(train)?;
    let scaled = scalers.scale(train);
    let model = fit_linear(&scaled.histories, &scaled.deltas, ridge_lambda)?;
    EnvModel::new(schema.clone(), scalers, DynamicsModel::Linear(model))
}

/// Trains the network on standardized transitions; returns the model and
/// its per-epoch curve in standardized units.
pub fn fit_mlp_env(
    schema: &FeatureSchema,
    train: &TransitionSet,
    val: &TransitionSet,
    config: &MlpTrainConfig,
) -> Result<(EnvModel, Vec<EpochRecord>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("empty training or validation split".into()));
    }
    let scalers = DynamicsScalers::fit(train)?;
    let (model, curve) = train_dynamics(&scalers.scale(train), &scalers.scale(val), config)?;
    Ok((EnvModel::new(schema.clone(), scalers, DynamicsModel::Mlp(model))?, curve))
}
