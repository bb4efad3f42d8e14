//! State and history vectors.
//!
//! The state at `t` stacks the observations at `t, t-1, t-2, t-3`. The
//! history additionally attaches a 25-way one-hot of the action taken at each
//! lag. Lags before the start of the episode repeat the first observation and
//! carry an all-zero action block.

use serde::{Deserialize, Serialize};

use super::action::{Action, N_ACTIONS};
use super::trajectory::{Observation, Trajectory};
use crate::error::{Error, Result};

/// Number of stacked timesteps (current plus three lags).
pub const N_LAGS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HistoryVector(pub Vec<f64>);

pub fn state_dim(d_raw: usize) -> usize {
    N_LAGS * d_raw
}

pub fn history_dim(d_raw: usize) -> usize {
    N_LAGS * (d_raw + N_ACTIONS)
}

fn stack_state<'a>(obs_at: impl Fn(usize) -> &'a Observation, t: usize) -> StateVector {
    let d = obs_at(0).len();
    let mut out = Vec::with_capacity(N_LAGS * d);
    for lag in 0..N_LAGS {
        out.extend_from_slice(obs_at(t.saturating_sub(lag)).values());
    }
    StateVector(out)
}

/// `action_at(u)` of `None` leaves that lag's action block zero.
fn stack_history<'a>(
    obs_at: impl Fn(usize) -> &'a Observation,
    action_at: impl Fn(usize) -> Option<Action>,
    t: usize,
) -> HistoryVector {
    let d = obs_at(0).len();
    let mut out = Vec::with_capacity(N_LAGS * (d + N_ACTIONS));
    for lag in 0..N_LAGS {
        let u = t.saturating_sub(lag);
        out.extend_from_slice(obs_at(u).values());
        let block = out.len();
        out.resize(block + N_ACTIONS, 0.0);
        if lag <= t {
            if let Some(a) = action_at(u) {
                out[block + a.flat_index()] = 1.0;
            }
        }
    }
    HistoryVector(out)
}

fn check_index(traj: &Trajectory, t: usize) -> Result<()> {
    if t >= traj.len() {
        return Err(Error::Index {
            index: t,
            len: traj.len(),
        });
    }
    Ok(())
}

pub fn build_state(traj: &Trajectory, t: usize) -> Result<StateVector> {
    check_index(traj, t)?;
    Ok(stack_state(|u| &traj.steps[u].obs, t))
}

pub fn build_history(traj: &Trajectory, t: usize) -> Result<HistoryVector> {
    check_index(traj, t)?;
    Ok(stack_history(
        |u| &traj.steps[u].obs,
        |u| Some(traj.steps[u].action),
        t,
    ))
}

/// History as seen when the action at `t` is being chosen: identical to
/// [`build_history`] except that the lag-0 action block is zero.
pub fn build_decision_input(traj: &Trajectory, t: usize) -> Result<HistoryVector> {
    check_index(traj, t)?;
    Ok(stack_history(
        |u| &traj.steps[u].obs,
        |u| (u < t).then(|| traj.steps[u].action),
        t,
    ))
}

/// Incrementally built episode used by simulators and model rollouts.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    observations: Vec<Observation>,
    actions: Vec<Action>,
}

impl EpisodeBuffer {
    pub fn new(first: Observation) -> Self {
        Self {
            observations: vec![first],
            actions: Vec::new(),
        }
    }

    pub fn from_prefix(traj: &Trajectory, len: usize) -> Result<Self> {
        if len == 0 || len > traj.len() {
            return Err(Error::Index {
                index: len,
                len: traj.len(),
            });
        }
        Ok(Self {
            observations: traj.steps[..len].iter().map(|s| s.obs.clone()).collect(),
            actions: traj.steps[..len - 1].iter().map(|s| s.action).collect(),
        })
    }

    /// Index of the current (latest) timestep.
    pub fn t(&self) -> usize {
        self.observations.len() - 1
    }

    pub fn current(&self) -> &Observation {
        self.observations.last().expect("buffer is never empty")
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn state(&self) -> StateVector {
        stack_state(|u| &self.observations[u], self.t())
    }

    pub fn decision_input(&self) -> HistoryVector {
        stack_history(
            |u| &self.observations[u],
            |u| self.actions.get(u).copied(),
            self.t(),
        )
    }

    /// History including `action` as the current action.
    pub fn history_with(&self, action: Action) -> HistoryVector {
        let t = self.t();
        stack_history(
            |u| &self.observations[u],
            |u| if u == t { Some(action) } else { self.actions.get(u).copied() },
            t,
        )
    }

    pub fn push(&mut self, action: Action, next: Observation) {
        self.actions.push(action);
        self.observations.push(next);
    }
}
