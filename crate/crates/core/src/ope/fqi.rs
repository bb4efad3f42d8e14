use serde::{Deserialize, Serialize};

use super::forest::{ForestConfig, RandomForest};
use super::{state_value, ActionValue, OpeData, PolicyTable};
use crate::error::{Error, Result};

/// Forest regression of `Q(s, a)` on the state concatenated with a one-hot
/// action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestQ {
    pub n_actions: usize,
    pub state_dim: usize,
    pub gamma: f64,
    pub iterations: usize,
    pub config: ForestConfig,
    pub forest: RandomForest,
}

impl ForestQ {
    fn input(&self, state: &[f64], action: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(state);
        buf.extend((0..self.n_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
    }

    pub fn predict(&self, state: &[f64], action: usize) -> f64 {
        let mut buf = Vec::with_capacity(self.state_dim + self.n_actions);
        self.input(state, action, &mut buf);
        self.forest.predict(&buf)
    }
}

impl ActionValue for ForestQ {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|s| {
                if s.len() != self.state_dim {
                    return Err(Error::Shape(format!("state width {} but Q expects {}", s.len(), self.state_dim)));
                }
                Ok(self.forest.predict_actions(s, self.n_actions))
            })
            .collect()
    }

    fn gamma(&self) -> Option<f64> {
        Some(self.gamma)
    }
}

/// Fitted Q evaluation of the policy tabulated in `eval`: each iteration
/// regresses `r + gamma * sum_a' pi(a'|s') Q(s', a')` (just `r` at terminal
/// steps) on `(s, a)`. `n_iterations` defaults to the longest episode;
/// iteration `m` fits its forest with seed `seed + m`.
pub fn fqi_fit(
    data: &OpeData,
    eval: &PolicyTable,
    gamma: f64,
    n_iterations: Option<usize>,
    config: &ForestConfig,
    seed: u64,
) -> Result<ForestQ> {
    if data.is_empty() {
        return Err(Error::InsufficientData("fitted Q iteration on an empty cohort".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    config.validate()?;
    eval.check(data)?;
    let n_actions = data.n_actions;
    let state_dim = data.state_dim();
    let width = state_dim + n_actions;
    let iterations = n_iterations.unwrap_or_else(|| data.max_horizon());
    let mut q = ForestQ {
        n_actions,
        state_dim,
        gamma,
        iterations,
        config: config.clone(),
        forest: RandomForest::empty(width),
    };
    let mut x = Vec::with_capacity(data.n_steps() * width);
    let mut buf = Vec::with_capacity(width);
    for e in &data.episodes {
        for (s, &a) in e.states.iter().zip(&e.actions) {
            q.input(s, a, &mut buf);
            x.extend_from_slice(&buf);
        }
    }
    for m in 0..iterations {
        let mut y = Vec::with_capacity(data.n_steps());
        for (e, pi) in data.episodes.iter().zip(&eval.probs) {
            let next: Vec<&[f64]> = e.states[1..].iter().map(Vec::as_slice).collect();
            let next_q = if m == 0 { Vec::new() } else { q.q_values(&next)? };
            for t in 0..e.len() {
                let bootstrap = if t + 1 < e.len() && m > 0 {
                    gamma * state_value(&pi[t + 1], &next_q[t])
                } else {
                    0.0
                };
                y.push(e.rewards[t] + bootstrap);
            }
        }
        q.forest = RandomForest::fit(&x, &y, width, config, seed.wrapping_add(m as u64))?;
    }
    Ok(q)
}
