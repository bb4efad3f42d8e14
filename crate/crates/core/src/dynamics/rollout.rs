use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EnvModel;
use crate::data::{history_dim, Action, EpisodeBuffer, Observation, Trajectory, SOFA_MAX};
use crate::error::{Error, Result};
use crate::policy::{sample_index, DecisionPoint, StochasticPolicy};
use crate::reward::{transition_reward, RewardParams};

/// Rollout length used for policy training.
pub const DEFAULT_HORIZON: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Adds unit Gaussian noise to the standardized delta at every step.
    pub stochastic: bool,
    pub reward: RewardParams,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            stochastic: false,
            reward: RewardParams::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("rollout horizon must be >= 1".into()));
        }
        self.reward.validate()
    }
}

/// Where the actions of a rollout come from.
#[derive(Clone, Copy)]
pub enum ActionSource<'a> {
    Policy(&'a dyn StochasticPolicy),
    /// Replays each start's logged actions; the rollout stops when they run out.
    Logged,
}

/// Initial episode prefix of a rollout, plus the actions logged after it.
#[derive(Debug, Clone)]
pub struct RolloutStart {
    pub buffer: EpisodeBuffer,
    pub logged: Vec<Action>,
}

impl RolloutStart {
    pub fn from_observation(obs: Observation) -> Self {
        Self {
            buffer: EpisodeBuffer::new(obs),
            logged: Vec::new(),
        }
    }

    /// Starts after the first `prefix_len` observations of `traj`. Logged
    /// actions are kept only while the next observation is also logged, so
    /// every predicted step has an actual counterpart.
    pub fn from_trajectory(traj: &Trajectory, prefix_len: usize) -> Result<Self> {
        let buffer = EpisodeBuffer::from_prefix(traj, prefix_len)?;
        let logged = traj.steps[prefix_len - 1..traj.len() - 1]
            .iter()
            .map(|s| s.action)
            .collect();
        Ok(Self { buffer, logged })
    }
}

/// A simulated continuation. `observations[k]` follows `actions[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Timestep index of the start observation within its episode.
    pub start_t: usize,
    pub start: Observation,
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub actions: Vec<Action>,
    /// Log-probability of each chosen action under the acting policy (0 for
    /// logged replay).
    pub log_probs: Vec<f64>,
    /// Policy input at each step.
    pub decision_points: Vec<DecisionPoint>,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

struct Live {
    buffer: EpisodeBuffer,
    logged: Vec<Action>,
    rng: ChaCha8Rng,
    result: RolloutResult,
}

/// Rolls every start forward under `source`. Start `i` draws from stream
/// `i` of `seed`; per step it draws the action uniform (policy mode) and
/// then the noise vector (stochastic mode).
pub fn rollout_batch(
    model: &EnvModel,
    starts: &[RolloutStart],
    source: ActionSource<'_>,
    config: &RolloutConfig,
    seed: u64,
) -> Result<Vec<RolloutResult>> {
    config.validate()?;
    let schema = &model.schema;
    let d = model.d_raw();
    let h = history_dim(d);
    if let ActionSource::Policy(p) = source {
        if p.n_actions() != crate::data::N_ACTIONS {
            return Err(Error::Shape("rollout policies must act on the 25-action grid".into()));
        }
    }
    let mut live: Vec<Live> = starts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.buffer.current().len() != d {
                return Err(Error::Shape(format!("start {i}: observation width does not match model")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(Live {
                buffer: s.buffer.clone(),
                logged: s.logged.clone(),
                rng,
                result: RolloutResult {
                    start_t: s.buffer.t(),
                    start: s.buffer.current().clone(),
                    observations: Vec::new(),
                    rewards: Vec::new(),
                    actions: Vec::new(),
                    log_probs: Vec::new(),
                    decision_points: Vec::new(),
                },
            })
        })
        .collect::<Result<_>>()?;

    for k in 0..config.horizon {
        let active: Vec<usize> = match source {
            ActionSource::Policy(_) => (0..live.len()).collect(),
            ActionSource::Logged => (0..live.len()).filter(|&i| k < live[i].logged.len()).collect(),
        };
        if active.is_empty() {
            break;
        }
        let points: Vec<DecisionPoint> = active
            .iter()
            .map(|&i| DecisionPoint::from_buffer(&live[i].buffer, schema))
            .collect();
        let mut chosen = Vec::with_capacity(active.len());
        match source {
            ActionSource::Policy(policy) => {
                let refs: Vec<&DecisionPoint> = points.iter().collect();
                let probas = policy.action_proba_batch(&refs)?;
                for (&i, proba) in active.iter().zip(&probas) {
                    let u: f64 = live[i].rng.random();
                    let a = sample_index(proba, u);
                    chosen.push((Action::from_flat(a)?, proba[a].ln()));
                }
            }
            ActionSource::Logged => {
                for &i in &active {
                    chosen.push((live[i].logged[k], 0.0));
                }
            }
        }

        let mut hist = Array2::zeros((active.len(), h));
        for (r, (&i, (a, _))) in active.iter().zip(&chosen).enumerate() {
            let hv = live[i].buffer.history_with(*a);
            hist.row_mut(r).iter_mut().zip(hv.0).for_each(|(dst, v)| *dst = v);
        }
        let mut scaled = model.predict_scaled(&hist);
        if config.stochastic {
            for (r, &i) in active.iter().enumerate() {
                for v in scaled.row_mut(r).iter_mut() {
                    *v += live[i].rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let deltas = model.scalers.unscale_deltas(&scaled);

        for (r, ((&i, (a, lp)), point)) in active.iter().zip(chosen).zip(points).enumerate() {
            let ep = &mut live[i];
            let obs = ep.buffer.current().clone();
            let mut next: Vec<f64> = obs.values().iter().zip(deltas.row(r)).map(|(o, dv)| o + dv).collect();
            next[schema.sofa_index()] = next[schema.sofa_index()].clamp(0.0, SOFA_MAX);
            next[schema.lactate_index()] = next[schema.lactate_index()].max(0.0);
            let next = Observation(next);
            let reward = transition_reward(schema, &obs, &next, &config.reward)?;
            ep.result.observations.push(next.clone());
            ep.result.rewards.push(reward);
            ep.result.actions.push(a);
            ep.result.log_probs.push(lp);
            ep.result.decision_points.push(point);
            ep.buffer.push(a, next);
        }
    }
    Ok(live.into_iter().map(|l| l.result).collect())
}

/// Single rollout from the first `prefix_len` observations of `traj`.
pub fn rollout(
    model: &EnvModel,
    traj: &Trajectory,
    prefix_len: usize,
    source: ActionSource<'_>,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutResult> {
    config.validate()?;
    let start = RolloutStart::from_trajectory(traj, prefix_len)?;
    Ok(rollout_batch(model, &[start], source, config, seed)?
        .pop()
        .expect("one start"))
}

/// Writes `t,feature,predicted,actual` rows for every feature at the start
/// and every predicted step. `actual` is empty past the end of `traj`.
pub fn write_rollout_csv(
    result: &RolloutResult,
    traj: Option<&Trajectory>,
    schema: &crate::data::FeatureSchema,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["t", "feature", "predicted", "actual"]).map_err(csv_err)?;
    let predicted = std::iter::once(&result.start).chain(&result.observations);
    for (k, obs) in predicted.enumerate() {
        let t = result.start_t + k;
        let actual = traj.and_then(|tr| tr.steps.get(t)).map(|s| &s.obs);
        for (j, name) in schema.names().iter().enumerate() {
            let a = actual.map(|o| o.values()[j].to_string()).unwrap_or_default();
            w.write_record([t.to_string(), name.clone(), obs.values()[j].to_string(), a])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
