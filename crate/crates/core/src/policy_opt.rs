//! Policy improvement inside a learned environment model: REINFORCE with a
//! mean-return baseline and PPO with a clipped surrogate, both starting from
//! the cloned clinician network.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::PolicyNet;
use crate::data::Trajectory;
use crate::dynamics::{rollout_batch, ActionSource, EnvModel, RolloutConfig, RolloutResult, RolloutStart, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, rows_to_array, AdamConfig, AdamState, ParamBlocks, Parameterized};
use crate::policy::kl_divergence;
use crate::reward::RewardParams;

/// Independent copy of the behavior network to be improved.
pub fn init_from_bc(bc: &PolicyNet) -> PolicyNet {
    bc.clone()
}

/// `n` model rollouts under `policy`, each starting from the first
/// observation of a uniformly drawn logged trajectory.
pub fn collect_model_rollouts(
    policy: &PolicyNet,
    model: &EnvModel,
    cohort: &[Trajectory],
    n: usize,
    config: &RolloutConfig,
    seed: u64,
) -> Result<Vec<RolloutResult>> {
    if cohort.is_empty() {
        return Err(Error::InsufficientData("cannot sample start states from an empty cohort".into()));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    pick.set_stream(u64::MAX);
    let starts: Vec<RolloutStart> = (0..n)
        .map(|_| {
            let traj = &cohort[pick.random_range(0..cohort.len())];
            RolloutStart::from_trajectory(traj, 1)
        })
        .collect::<Result<_>>()?;
    rollout_batch(model, &starts, ActionSource::Policy(policy), config, seed)
}

/// Flattened steps of a rollout batch with per-step advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct PgBatch {
    /// Raw decision inputs, one row per step.
    pub inputs: Array2<f64>,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    /// Log-probabilities under the policy that collected the batch.
    pub old_log_probs: Vec<f64>,
}

impl PgBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn from_parts(rollouts: &[RolloutResult], advantage: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut rows = Vec::new();
        let mut actions = Vec::new();
        let mut advantages = Vec::new();
        let mut old = Vec::new();
        for (i, r) in rollouts.iter().enumerate() {
            for k in 0..r.len() {
                rows.push(r.decision_points[k].history.clone());
                actions.push(r.actions[k].flat_index());
                advantages.push(advantage(i, k));
                old.push(r.log_probs[k]);
            }
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("rollout batch has no steps".into()));
        }
        let dim = rows[0].len();
        Ok(Self {
            inputs: rows_to_array(&rows, dim)?,
            actions,
            advantages,
            old_log_probs: old,
        })
    }

    /// REINFORCE weighting: every step of rollout `i` carries
    /// `R_i - mean_j R_j`, with `R` the discounted rollout return.
    pub fn reinforce(rollouts: &[RolloutResult], gamma: f64) -> Result<Self> {
        let returns: Vec<f64> = rollouts
            .iter()
            .map(|r| crate::reward::discounted_return(r.rewards.iter().copied(), gamma))
            .collect();
        let baseline = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Self::from_parts(rollouts, |i, _| returns[i] - baseline)
    }

    /// PPO weighting: discounted return-to-go minus its batch mean at the
    /// same step index.
    pub fn ppo(rollouts: &[RolloutResult], gamma: f64) -> Result<Self> {
        let togo: Vec<Vec<f64>> = rollouts.iter().map(|r| returns_to_go(&r.rewards, gamma)).collect();
        let longest = togo.iter().map(Vec::len).max().unwrap_or(0);
        let mut mean = vec![0.0; longest];
        let mut count = vec![0usize; longest];
        for g in &togo {
            for (k, v) in g.iter().enumerate() {
                mean[k] += v;
                count[k] += 1;
            }
        }
        for (m, c) in mean.iter_mut().zip(&count) {
            *m /= (*c).max(1) as f64;
        }
        Self::from_parts(rollouts, |i, k| togo[i][k] - mean[k])
    }
}

pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        acc = rewards[k] + gamma * acc;
        out[k] = acc;
    }
    out
}

/// Log-probabilities of the batch actions under `policy`, and the
/// per-row softmax needed for logit gradients.
fn log_probs(policy: &PolicyNet, batch: &PgBatch) -> Result<(Array2<f64>, Vec<f64>, crate::behavior::PolicyCache)> {
    let x = policy.scale_inputs(&batch.inputs)?;
    let (logits, cache) = policy.forward(&x);
    let logp = log_softmax_rows(&logits);
    let chosen = batch.actions.iter().enumerate().map(|(i, &a)| logp[[i, a]]).collect();
    Ok((logp.mapv(f64::exp), chosen, cache))
}

/// Parameter gradient of `sum_i w_i log pi(a_i | h_i)`.
fn weighted_log_prob_gradient(
    policy: &PolicyNet,
    cache: &crate::behavior::PolicyCache,
    proba: &Array2<f64>,
    actions: &[usize],
    weights: &[f64],
) -> ParamBlocks {
    let mut d = proba.clone();
    for (i, (&a, &w)) in actions.iter().zip(weights).enumerate() {
        let mut row = d.row_mut(i);
        row.mapv_inplace(|p| -w * p);
        row[a] += w;
    }
    policy.backward_logits(cache, &d)
}

/// REINFORCE objective `mean_i sum_t log pi(a_t|h_t) (R_i - b)` and its
/// gradient with respect to the policy parameters.
pub fn reinforce_objective(policy: &PolicyNet, batch: &PgBatch, n_rollouts: usize) -> Result<(f64, ParamBlocks)> {
    if batch.is_empty() || n_rollouts == 0 {
        return Err(Error::InsufficientData("empty rollout batch".into()));
    }
    let (proba, chosen, cache) = log_probs(policy, batch)?;
    let scale = 1.0 / n_rollouts as f64;
    let objective = chosen.iter().zip(&batch.advantages).map(|(l, a)| l * a).sum::<f64>() * scale;
    let weights: Vec<f64> = batch.advantages.iter().map(|a| a * scale).collect();
    let grads = weighted_log_prob_gradient(policy, &cache, &proba, &batch.actions, &weights);
    Ok((objective, grads))
}

/// One PPO term: `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Clipped surrogate `mean_t min(rho_t A_t, clip(rho_t) A_t)` and its
/// gradient. Steps where the clipped branch is strictly smaller carry no
/// gradient.
pub fn ppo_surrogate(policy: &PolicyNet, batch: &PgBatch, clip: f64) -> Result<(f64, ParamBlocks)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty rollout batch".into()));
    }
    let (proba, chosen, cache) = log_probs(policy, batch)?;
    let n = batch.len() as f64;
    let mut objective = 0.0;
    let mut weights = Vec::with_capacity(batch.len());
    for ((lp, old), &adv) in chosen.iter().zip(&batch.old_log_probs).zip(&batch.advantages) {
        let ratio = (lp - old).exp();
        let unclipped = ratio * adv;
        let term = clipped_term(ratio, adv, clip);
        objective += term;
        // d(rho A)/d log pi = rho A
        weights.push(if unclipped <= term { unclipped / n } else { 0.0 });
    }
    let grads = weighted_log_prob_gradient(policy, &cache, &proba, &batch.actions, &weights);
    Ok((objective / n, grads))
}

fn ascend(policy: &mut PolicyNet, adam: &mut AdamState, mut grads: ParamBlocks) -> Result<()> {
    for g in grads.iter_mut().flatten() {
        *g = -*g;
    }
    adam.step(policy.param_slices_mut(), &grads)
}

/// One REINFORCE step; returns the objective before the step.
pub fn reinforce_update(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    rollouts: &[RolloutResult],
    gamma: f64,
) -> Result<f64> {
    let batch = PgBatch::reinforce(rollouts, gamma)?;
    let (objective, grads) = reinforce_objective(policy, &batch, rollouts.len())?;
    ascend(policy, adam, grads)?;
    Ok(objective)
}

/// `epochs` full-batch steps on the clipped surrogate of rollouts collected
/// under the policy snapshot whose log-probabilities the rollouts store.
/// Returns the surrogate before the first step.
pub fn ppo_update(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    rollouts: &[RolloutResult],
    gamma: f64,
    clip: f64,
    epochs: usize,
) -> Result<f64> {
    let batch = PgBatch::ppo(rollouts, gamma)?;
    let mut first = None;
    for _ in 0..epochs {
        let (objective, grads) = ppo_surrogate(policy, &batch, clip)?;
        first.get_or_insert(objective);
        ascend(policy, adam, grads)?;
    }
    Ok(first.unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pg,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyOptConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub rollouts_per_iteration: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub ppo_epochs: usize,
    /// Adds the unit Gaussian noise of the environment model to rollouts.
    pub stochastic_dynamics: bool,
    /// Reported when the mean KL(mu || pi) of an iteration exceeds it.
    pub kl_alert: f64,
    pub reward: RewardParams,
    pub seed: u64,
}

impl Default for PolicyOptConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ppo,
            iterations: 50,
            rollouts_per_iteration: 256,
            horizon: DEFAULT_HORIZON,
            gamma: 0.99,
            learning_rate: 1e-5,
            clip_epsilon: 0.2,
            ppo_epochs: 4,
            stochastic_dynamics: false,
            kl_alert: 0.5,
            reward: RewardParams::default(),
            seed: 0,
        }
    }
}

impl PolicyOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!("clip_epsilon {} must lie in (0, 1)", self.clip_epsilon)));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.rollouts_per_iteration < 1 || self.ppo_epochs < 1 {
            return Err(Error::Config("rollouts_per_iteration and ppo_epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        crate::reward::check_gamma(self.gamma)?;
        self.reward.validate()
    }

    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            stochastic: self.stochastic_dynamics,
            reward: self.reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean discounted return of the rollouts collected this iteration.
    pub mean_return: f64,
    /// Mean KL(mu || pi) over this iteration's decision points, after the update.
    pub kl: f64,
    /// Objective (REINFORCE or PPO surrogate) before the update.
    pub loss: f64,
    pub kl_alert: bool,
}

/// Mean `KL(mu || pi)` over the given raw decision inputs.
pub fn mean_kl(mu: &PolicyNet, pi: &PolicyNet, inputs: &Array2<f64>) -> Result<f64> {
    if inputs.nrows() == 0 {
        return Ok(0.0);
    }
    let p = mu.proba_raw(inputs)?;
    let q = pi.proba_raw(inputs)?;
    let total: f64 = p
        .rows()
        .into_iter()
        .zip(q.rows())
        .map(|(a, b)| kl_divergence(a.as_slice().expect("row"), b.as_slice().expect("row")))
        .sum();
    Ok(total / inputs.nrows() as f64)
}

/// Alternates model rollouts and updates starting from a copy of `bc`.
/// Iteration `k` collects rollouts with seed `config.seed + k`.
pub fn train_policy(
    bc: &PolicyNet,
    model: &EnvModel,
    cohort: &[Trajectory],
    config: &PolicyOptConfig,
) -> Result<(PolicyNet, Vec<IterationRecord>)> {
    config.validate()?;
    let mut policy = init_from_bc(bc);
    let adam_config = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut adam = AdamState::for_params(&policy.param_slices(), adam_config);
    let rollout_config = config.rollout_config();
    let mut diagnostics = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let seed = config.seed.wrapping_add(iteration as u64);
        let rollouts = collect_model_rollouts(&policy, model, cohort, config.rollouts_per_iteration, &rollout_config, seed)?;
        let mean_return = rollouts
            .iter()
            .map(|r| crate::reward::discounted_return(r.rewards.iter().copied(), config.gamma))
            .sum::<f64>()
            / rollouts.len() as f64;
        let loss = match config.algorithm {
            Algorithm::Pg => reinforce_update(&mut policy, &mut adam, &rollouts, config.gamma)?,
            Algorithm::Ppo => ppo_update(&mut policy, &mut adam, &rollouts, config.gamma, config.clip_epsilon, config.ppo_epochs)?,
        };
        let inputs = PgBatch::reinforce(&rollouts, config.gamma)?.inputs;
        let kl = mean_kl(bc, &policy, &inputs)?;
        diagnostics.push(IterationRecord {
            iteration,
            mean_return,
            kl,
            loss,
            kl_alert: kl > config.kl_alert,
        });
    }
    Ok((policy, diagnostics))
}

/// Writes `iteration,mean_return,kl,loss`.
pub fn write_diagnostics_csv(records: &[IterationRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["iteration", "mean_return", "kl", "loss"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.iteration.to_string(), r.mean_return.to_string(), r.kl.to_string(), r.loss.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
