//! Stochastic policies over the discrete action grid and SOFA-regime
//! blending.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{EpisodeBuffer, FeatureSchema, Trajectory, N_ACTIONS, SOFA_MAX};
use crate::data::{build_decision_input, build_state};
use crate::error::{Error, Result};

/// Everything a policy may condition on when choosing the action at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPoint {
    /// Raw stacked state (current observation plus three lags).
    pub state: Vec<f64>,
    /// Raw history vector with the current action block left empty.
    pub history: Vec<f64>,
    /// SOFA entry of the current observation.
    pub sofa: f64,
}

impl DecisionPoint {
    pub fn from_trajectory(traj: &Trajectory, t: usize, schema: &FeatureSchema) -> Result<Self> {
        Ok(Self {
            state: build_state(traj, t)?.0,
            history: build_decision_input(traj, t)?.0,
            sofa: traj.steps[t].obs.sofa(schema),
        })
    }

    pub fn from_buffer(buf: &EpisodeBuffer, schema: &FeatureSchema) -> Self {
        Self {
            state: buf.state().0,
            history: buf.decision_input().0,
            sofa: buf.current().sofa(schema),
        }
    }
}

pub trait StochasticPolicy: Send + Sync {
    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>>;

    fn action_proba_batch(&self, points: &[&DecisionPoint]) -> Result<Vec<Vec<f64>>> {
        points.iter().map(|p| self.action_proba(p)).collect()
    }
}

impl<P: StochasticPolicy + ?Sized> StochasticPolicy for Arc<P> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }

    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        (**self).action_proba(point)
    }

    fn action_proba_batch(&self, points: &[&DecisionPoint]) -> Result<Vec<Vec<f64>>> {
        (**self).action_proba_batch(points)
    }
}

impl<P: StochasticPolicy + ?Sized> StochasticPolicy for &P {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }

    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        (**self).action_proba(point)
    }

    fn action_proba_batch(&self, points: &[&DecisionPoint]) -> Result<Vec<Vec<f64>>> {
        (**self).action_proba_batch(points)
    }
}

/// Inverse-CDF draw from a discrete distribution given `u` in `[0, 1)`.
pub fn sample_index(proba: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in proba.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` a hair below 1: take the last action with mass
    proba.iter().rposition(|&p| p > 0.0).unwrap_or(proba.len() - 1)
}

/// `KL(p || q)` in nats; `q` entries are floored at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(1e-12)).ln())
        .sum()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Low,
    Medium,
    High,
}

/// Which policy acts in a regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Clinician,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSpec {
    pub sofa_low_max: u8,
    pub sofa_high_min: u8,
    pub low: Source,
    pub medium: Source,
    pub high: Source,
}

impl Default for BlendSpec {
    fn default() -> Self {
        Self::with_sources(Source::Clinician, Source::Learned, Source::Clinician)
    }
}

impl BlendSpec {
    pub fn with_sources(low: Source, medium: Source, high: Source) -> Self {
        Self {
            sofa_low_max: 5,
            sofa_high_min: 15,
            low,
            medium,
            high,
        }
    }

    /// The five (low, medium, high) assignments reported in the blend table,
    /// in table order.
    pub fn table_rows(sofa_low_max: u8, sofa_high_min: u8) -> [BlendSpec; 5] {
        use Source::{Clinician as C, Learned as L};
        [(L, L, L), (L, L, C), (C, L, C), (L, C, L), (C, C, C)].map(|(low, medium, high)| BlendSpec {
            sofa_low_max,
            sofa_high_min,
            low,
            medium,
            high,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.sofa_low_max >= self.sofa_high_min || self.sofa_high_min as f64 > SOFA_MAX {
            return Err(Error::Config(format!(
                "SOFA thresholds need 0 <= low_max ({}) < high_min ({}) <= 24",
                self.sofa_low_max, self.sofa_high_min
            )));
        }
        Ok(())
    }

    /// Low is `sofa <= sofa_low_max`, high is `sofa >= sofa_high_min`; both
    /// boundaries inclusive.
    pub fn regime(&self, sofa: f64) -> Result<Regime> {
        if !(0.0..=SOFA_MAX).contains(&sofa) {
            return Err(Error::Domain(format!("SOFA {sofa} outside [0, 24]")));
        }
        Ok(if sofa <= self.sofa_low_max as f64 {
            Regime::Low
        } else if sofa >= self.sofa_high_min as f64 {
            Regime::High
        } else {
            Regime::Medium
        })
    }

    pub fn source(&self, regime: Regime) -> Source {
        match regime {
            Regime::Low => self.low,
            Regime::Medium => self.medium,
            Regime::High => self.high,
        }
    }

    /// Short label such as `clinician/learned/clinician`.
    pub fn label(&self) -> String {
        let name = |s: Source| match s {
            Source::Clinician => "clinician",
            Source::Learned => "learned",
        };
        format!("{}/{}/{}", name(self.low), name(self.medium), name(self.high))
    }
}

/// Routes each decision to the clinician or learned policy by SOFA regime.
#[derive(Clone)]
pub struct BlendedPolicy {
    clinician: Arc<dyn StochasticPolicy>,
    learned: Arc<dyn StochasticPolicy>,
    spec: BlendSpec,
}

impl BlendedPolicy {
    pub fn new(
        clinician: Arc<dyn StochasticPolicy>,
        learned: Arc<dyn StochasticPolicy>,
        spec: BlendSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if clinician.n_actions() != learned.n_actions() {
            return Err(Error::Shape("blended policies disagree on action count".into()));
        }
        Ok(Self {
            clinician,
            learned,
            spec,
        })
    }

    pub fn spec(&self) -> &BlendSpec {
        &self.spec
    }

    fn pick(&self, sofa: f64) -> Result<&Arc<dyn StochasticPolicy>> {
        Ok(match self.spec.source(self.spec.regime(sofa)?) {
            Source::Clinician => &self.clinician,
            Source::Learned => &self.learned,
        })
    }
}

impl StochasticPolicy for BlendedPolicy {
    fn n_actions(&self) -> usize {
        self.clinician.n_actions()
    }

    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        self.pick(point.sofa)?.action_proba(point)
    }

    fn action_proba_batch(&self, points: &[&DecisionPoint]) -> Result<Vec<Vec<f64>>> {
        let mut to_clin = Vec::new();
        let mut to_learned = Vec::new();
        for (i, p) in points.iter().enumerate() {
            match self.spec.source(self.spec.regime(p.sofa)?) {
                Source::Clinician => to_clin.push(i),
                Source::Learned => to_learned.push(i),
            }
        }
        let mut out = vec![Vec::new(); points.len()];
        for (idx, policy) in [(to_clin, &self.clinician), (to_learned, &self.learned)] {
            if idx.is_empty() {
                continue;
            }
            let batch: Vec<&DecisionPoint> = idx.iter().map(|&i| points[i]).collect();
            for (i, proba) in idx.into_iter().zip(policy.action_proba_batch(&batch)?) {
                out[i] = proba;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Distribution depends on the first state feature only.
    struct Table(f64);

    impl StochasticPolicy for Table {
        fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
            let mut p = vec![0.0; N_ACTIONS];
            let i = ((point.state[0] * self.0).abs() as usize) % N_ACTIONS;
            p[i] = 0.5;
            p[(i + 1) % N_ACTIONS] = 0.5;
            Ok(p)
        }
    }

    fn point(sofa: f64) -> DecisionPoint {
        DecisionPoint {
            state: vec![sofa],
            history: vec![],
            sofa,
        }
    }

    fn blend(spec: BlendSpec) -> BlendedPolicy {
        BlendedPolicy::new(Arc::new(Table(1.0)), Arc::new(Table(3.0)), spec).unwrap()
    }

    #[test]
    fn routes_by_regime() {
        let b = blend(BlendSpec::default());
        let learned = Table(3.0);
        let clin = Table(1.0);
        let p = point(10.0);
        assert_eq!(b.action_proba(&p).unwrap(), learned.action_proba(&p).unwrap());
        let p = point(5.0);
        assert_eq!(b.spec().regime(5.0).unwrap(), Regime::Low);
        assert_eq!(b.action_proba(&p).unwrap(), clin.action_proba(&p).unwrap());
        assert_eq!(b.spec().regime(15.0).unwrap(), Regime::High);
        assert!(b.action_proba(&point(24.5)).is_err());
    }

    #[test]
    fn all_clinician_is_identity_and_reblending_is_stable() {
        use Source::Clinician as C;
        let b = blend(BlendSpec::with_sources(C, C, C));
        let clin = Table(1.0);
        for s in 0..=24 {
            let p = point(s as f64);
            assert_eq!(b.action_proba(&p).unwrap(), clin.action_proba(&p).unwrap());
        }
        let once = Arc::new(blend(BlendSpec::default()));
        let twice = BlendedPolicy::new(Arc::new(Table(1.0)), once.clone(), BlendSpec::default()).unwrap();
        let pts: Vec<DecisionPoint> = (0..=24).map(|s| point(s as f64)).collect();
        let refs: Vec<&DecisionPoint> = pts.iter().collect();
        assert_eq!(twice.action_proba_batch(&refs).unwrap(), once.action_proba_batch(&refs).unwrap());
        for p in &pts {
            let s: f64 = once.action_proba(p).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_rows_and_validation() {
        let rows = BlendSpec::table_rows(5, 15);
        assert_eq!(rows[2], BlendSpec::default());
        assert_eq!(rows[4].label(), "clinician/clinician/clinician");
        let bad = BlendSpec { sofa_low_max: 15, ..BlendSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_and_divergences() {
        let p = [0.2, 0.0, 0.8];
        assert_eq!(sample_index(&p, 0.1), 0);
        assert_eq!(sample_index(&p, 0.2), 2);
        assert_eq!(sample_index(&p, 0.999_999_999), 2);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!((total_variation(&p, &[0.5, 0.0, 0.5]) - 0.3).abs() < 1e-12);
    }
}
