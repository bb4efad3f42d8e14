//! Off-policy evaluation: nearest-neighbor behavior estimation, fitted Q
//! evaluation with a regression forest, and per-horizon weighted importance
//! sampling, weighted doubly robust and approximate-model estimators.

pub mod estimators;
pub mod forest;
pub mod fqi;
pub mod knn;

use serde::{Deserialize, Serialize};

use crate::data::{build_state, FeatureSchema, Trajectory, N_ACTIONS};
use crate::error::{Error, Result};
use crate::policy::{DecisionPoint, StochasticPolicy};

pub use estimators::{
    am, effective_sample_size, evaluate_policy, is_ratios, knn_behavior_table, BehaviorModel, phwdr, phwis, stepwise_wis, write_report_csv,
    EstimatorDiagnostics, HorizonGroup, OpeConfig, OpeReport, Ratios, DEFAULT_CLIP_MAX,
};
pub use forest::{ForestConfig, RandomForest, RegressionTree, TreeNode};
pub use fqi::{fqi_fit, ForestQ};
pub use knn::{KdTree, KnnBehavior};

/// One logged episode in estimator form; the last step is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeEpisode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl OpeEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeData {
    pub episodes: Vec<OpeEpisode>,
    pub n_actions: usize,
}

impl OpeData {
    pub fn new(episodes: Vec<OpeEpisode>, n_actions: usize) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::InsufficientData("off-policy evaluation needs at least one episode".into()));
        }
        let dim = episodes[0].states.first().map(Vec::len).unwrap_or(0);
        for (i, e) in episodes.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::InsufficientData(format!("episode {i} has no steps")));
            }
            if e.states.len() != e.len() || e.rewards.len() != e.len() {
                return Err(Error::Shape(format!("episode {i}: states, actions and rewards differ in length")));
            }
            if e.states.iter().any(|s| s.len() != dim) {
                return Err(Error::Shape(format!("episode {i}: state width differs from {dim}")));
            }
            if let Some(&a) = e.actions.iter().find(|&&a| a >= n_actions) {
                return Err(Error::Domain(format!("episode {i}: action {a} outside 0..{n_actions}")));
            }
            if e.rewards.iter().any(|r| !r.is_finite()) {
                return Err(Error::Domain(format!("episode {i}: non-finite reward")));
            }
        }
        Ok(Self { episodes, n_actions })
    }

    /// Raw stacked states, flat actions and logged rewards of each trajectory.
    pub fn from_cohort(cohort: &[Trajectory]) -> Result<Self> {
        let episodes = cohort
            .iter()
            .map(|traj| {
                Ok(OpeEpisode {
                    states: (0..traj.len()).map(|t| build_state(traj, t).map(|s| s.0)).collect::<Result<_>>()?,
                    actions: traj.steps.iter().map(|s| s.action.flat_index()).collect(),
                    rewards: traj.rewards().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(episodes, N_ACTIONS)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.episodes[0].states[0].len()
    }

    pub fn max_horizon(&self) -> usize {
        self.episodes.iter().map(OpeEpisode::len).max().unwrap_or(0)
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(OpeEpisode::len).sum()
    }
}

/// Action distributions of one policy at every logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl PolicyTable {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Self {
        Self { probs }
    }

    /// Queries `policy` once per trajectory with all of its decision points.
    pub fn from_cohort(policy: &dyn StochasticPolicy, cohort: &[Trajectory], schema: &FeatureSchema) -> Result<Self> {
        let probs = cohort
            .iter()
            .map(|traj| {
                let points = (0..traj.len())
                    .map(|t| DecisionPoint::from_trajectory(traj, t, schema))
                    .collect::<Result<Vec<_>>>()?;
                policy.action_proba_batch(&points.iter().collect::<Vec<_>>())
            })
            .collect::<Result<_>>()?;
        Ok(Self { probs })
    }

    /// Evaluates a state-only policy on the estimator states.
    pub fn from_states(data: &OpeData, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let probs = data
            .episodes
            .iter()
            .map(|e| e.states.iter().map(|s| f(s)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        Ok(Self { probs })
    }

    /// Checks that the table covers `data` with distributions over its
    /// actions.
    pub fn check(&self, data: &OpeData) -> Result<()> {
        if self.probs.len() != data.len() {
            return Err(Error::Shape(format!(
                "policy table has {} episodes, data has {}",
                self.probs.len(),
                data.len()
            )));
        }
        for (i, (rows, e)) in self.probs.iter().zip(&data.episodes).enumerate() {
            if rows.len() != e.len() {
                return Err(Error::Shape(format!("episode {i}: {} policy rows for {} steps", rows.len(), e.len())));
            }
            for (t, p) in rows.iter().enumerate() {
                if p.len() != data.n_actions {
                    return Err(Error::Shape(format!("episode {i} step {t}: {} probabilities", p.len())));
                }
                if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!("episode {i} step {t}: not a probability distribution")));
                }
            }
        }
        Ok(())
    }
}

/// A state-action value estimate over a discrete action set.
pub trait ActionValue {
    fn n_actions(&self) -> usize;

    /// One row of action values per state.
    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>>;

    /// Discount the estimate was fitted for; `None` if it is valid for any.
    fn gamma(&self) -> Option<f64> {
        None
    }
}

/// `Q = 0` everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroQ {
    pub n_actions: usize,
}

impl ActionValue for ZeroQ {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; self.n_actions]; states.len()])
    }
}

/// `V(s) = sum_a pi(a|s) Q(s, a)`.
pub fn state_value(pi: &[f64], q: &[f64]) -> f64 {
    pi.iter().zip(q).map(|(p, v)| p * v).sum()
}
