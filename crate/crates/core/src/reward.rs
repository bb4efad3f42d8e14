//! Clinically guided reward and discounted returns.
//!
//! Intermediate steps are scored on SOFA and lactate changes:
//! `c0 * 1[sofa' = sofa and sofa' > 0] + c1 * (sofa' - sofa) + c2 * tanh(lactate' - lactate)`.
//! The terminal step pays `+terminal_magnitude` on survival and the negative
//! of it otherwise.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, Observation, Trajectory, SOFA_MAX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub terminal_magnitude: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            c0: -0.025,
            c1: -0.125,
            c2: -2.0,
            terminal_magnitude: 15.0,
            gamma: 0.99,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.terminal_magnitude > 0.0) {
            return Err(Error::Config("terminal_magnitude must be > 0".into()));
        }
        check_gamma(self.gamma)?;
        if ![self.c0, self.c1, self.c2].iter().all(|c| c.is_finite()) {
            return Err(Error::Config("reward coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Largest possible |intermediate reward| for valid inputs.
    pub fn intermediate_bound(&self) -> f64 {
        self.c0.abs() + self.c1.abs() * SOFA_MAX + self.c2.abs()
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    Ok(())
}

pub fn intermediate_reward(
    sofa_t: f64,
    sofa_t1: f64,
    lactate_t: f64,
    lactate_t1: f64,
    params: &RewardParams,
) -> Result<f64> {
    for (v, name) in [(sofa_t, "sofa_t"), (sofa_t1, "sofa_t1"), (lactate_t, "lactate_t"), (lactate_t1, "lactate_t1")] {
        if !v.is_finite() {
            return Err(Error::Domain(format!("{name} is not finite")));
        }
    }
    if !(0.0..=SOFA_MAX).contains(&sofa_t) || !(0.0..=SOFA_MAX).contains(&sofa_t1) {
        return Err(Error::Domain(format!(
            "SOFA pair ({sofa_t}, {sofa_t1}) outside [0, 24]"
        )));
    }
    if lactate_t < 0.0 || lactate_t1 < 0.0 {
        return Err(Error::Domain("lactate must be nonnegative".into()));
    }
    let unchanged = if sofa_t1 == sofa_t && sofa_t1 > 0.0 { params.c0 } else { 0.0 };
    Ok(unchanged + params.c1 * (sofa_t1 - sofa_t) + params.c2 * (lactate_t1 - lactate_t).tanh())
}

/// Intermediate reward for the transition `obs -> next`.
pub fn transition_reward(
    schema: &FeatureSchema,
    obs: &Observation,
    next: &Observation,
    params: &RewardParams,
) -> Result<f64> {
    intermediate_reward(
        obs.sofa(schema),
        next.sofa(schema),
        obs.lactate(schema),
        next.lactate(schema),
        params,
    )
}

pub fn terminal_reward(survived: bool, params: &RewardParams) -> f64 {
    if survived {
        params.terminal_magnitude
    } else {
        -params.terminal_magnitude
    }
}

pub fn discounted_return(rewards: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

pub fn trajectory_return(trajectory: &Trajectory, gamma: f64) -> f64 {
    discounted_return(trajectory.rewards(), gamma)
}

/// Mean discounted return over the cohort.
pub fn behavior_value(cohort: &[Trajectory], gamma: f64) -> Result<f64> {
    if cohort.is_empty() {
        return Err(Error::InsufficientData("behavior value of an empty cohort".into()));
    }
    let total: f64 = cohort.iter().map(|t| trajectory_return(t, gamma)).sum();
    Ok(total / cohort.len() as f64)
}

/// Rewrites every step's reward from the observations and outcome label.
pub fn recompute_rewards(
    trajectory: &mut Trajectory,
    schema: &FeatureSchema,
    params: &RewardParams,
) -> Result<()> {
    let n = trajectory.steps.len();
    for t in 0..n {
        let r = if t + 1 < n {
            transition_reward(schema, &trajectory.steps[t].obs, &trajectory.steps[t + 1].obs, params)?
        } else {
            match trajectory.survived {
                Some(s) => terminal_reward(s, params),
                None => trajectory.steps[t].reward,
            }
        };
        trajectory.steps[t].reward = r;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> RewardParams {
        RewardParams::default()
    }

    #[test]
    fn hand_cases() {
        let r = |a, b, c, d| intermediate_reward(a, b, c, d, &p()).unwrap();
        assert!((r(5.0, 5.0, 2.0, 2.0) + 0.025).abs() < 1e-12);
        assert_eq!(r(0.0, 0.0, 1.0, 1.0), 0.0);
        assert!((r(6.0, 4.0, 3.0, 3.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn terminal_and_returns() {
        assert_eq!(terminal_reward(true, &p()), 15.0);
        assert_eq!(terminal_reward(false, &p()), -15.0);
        let unit = RewardParams { terminal_magnitude: 1.0, ..p() };
        assert_eq!(terminal_reward(true, &unit), 1.0);
        assert_eq!(discounted_return([1.0, 1.0, 1.0], 1.0), 3.0);
        assert_eq!(discounted_return([0.0, 0.0, 15.0], 0.5), 3.75);
        assert_eq!(discounted_return([-2.5], 0.3), -2.5);
    }

    #[test]
    fn domain_errors() {
        assert!(intermediate_reward(f64::NAN, 1.0, 1.0, 1.0, &p()).is_err());
        assert!(intermediate_reward(25.0, 1.0, 1.0, 1.0, &p()).is_err());
        assert!(intermediate_reward(2.0, 1.0, -1.0, 1.0, &p()).is_err());
        assert!(behavior_value(&[], 0.99).is_err());
        assert!(RewardParams { gamma: 0.0, ..p() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn bounded(s0 in 0u8..=24, s1 in 0u8..=24, l0 in 0.0f64..20.0, l1 in 0.0f64..20.0) {
            let params = p();
            let r = intermediate_reward(s0 as f64, s1 as f64, l0, l1, &params).unwrap();
            prop_assert!(r.abs() <= params.intermediate_bound());
            let lact = params.c2 * (l1 - l0).tanh();
            prop_assert!(lact.abs() <= params.c2.abs());
        }

        #[test]
        fn decreasing_in_lactate_change(s in 1u8..=24, l0 in 0.0f64..5.0, d1 in -3.0f64..3.0, gap in 0.01f64..3.0) {
            let params = p();
            let s = s as f64;
            let a = intermediate_reward(s, s, l0 + 3.0, l0 + 3.0 + d1, &params).unwrap();
            let b = intermediate_reward(s, s, l0 + 3.0, l0 + 3.0 + d1 + gap, &params).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn decreasing_in_sofa_change(s0 in 0u8..=20, k in 1u8..=4) {
            // both transitions change SOFA, so the indicator is off for each
            let params = p();
            let s0 = s0 as f64;
            let worse = intermediate_reward(s0, s0 + k as f64, 1.0, 1.0, &params).unwrap();
            let better = if s0 >= 1.0 {
                intermediate_reward(s0, s0 - 1.0, 1.0, 1.0, &params).unwrap()
            } else {
                f64::INFINITY
            };
            prop_assert!(worse < better);
        }

        #[test]
        fn undiscounted_return_is_plain_sum(rs in proptest::collection::vec(-15.0f64..15.0, 1..30)) {
            let sum: f64 = rs.iter().sum();
            prop_assert!((discounted_return(rs.iter().copied(), 1.0) - sum).abs() < 1e-12);
        }
    }
}
