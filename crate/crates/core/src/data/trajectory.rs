use serde::{Deserialize, Serialize};

use super::action::{Action, Doses};
use super::schema::FeatureSchema;
use crate::error::{Error, Result};

pub const SOFA_MAX: f64 = 24.0;

/// Raw physiological measurements at one timestep, laid out by a
/// [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sofa(&self, schema: &FeatureSchema) -> f64 {
        self.0[schema.sofa_index()]
    }

    pub fn lactate(&self, schema: &FeatureSchema) -> f64 {
        self.0[schema.lactate_index()]
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.0.len() != schema.d_raw() {
            return Err(Error::Shape(format!(
                "observation has {} values, schema expects {}",
                self.0.len(),
                schema.d_raw()
            )));
        }
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "feature `{}` is not finite",
                schema.names()[i]
            )));
        }
        let sofa = self.sofa(schema);
        if !(0.0..=SOFA_MAX).contains(&sofa) {
            return Err(Error::Domain(format!("SOFA {sofa} outside [0, 24]")));
        }
        let lactate = self.lactate(schema);
        if lactate < 0.0 {
            return Err(Error::Domain(format!("lactate {lactate} is negative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub doses: Doses,
    pub action: Action,
    pub reward: f64,
    pub terminal: bool,
}

/// One patient episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    pub steps: Vec<Step>,
    /// Outcome label; `None` for censored (incomplete) episodes.
    pub survived: Option<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::InsufficientData(format!(
                "trajectory `{}` has no steps",
                self.patient_id
            )));
        }
        for (t, step) in self.steps.iter().enumerate() {
            step.obs.validate(schema)?;
            if !step.reward.is_finite() {
                return Err(Error::Domain(format!(
                    "trajectory `{}` step {t}: reward not finite",
                    self.patient_id
                )));
            }
            if step.terminal != (t + 1 == n) {
                return Err(Error::Domain(format!(
                    "trajectory `{}`: exactly the last step must be terminal",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}
