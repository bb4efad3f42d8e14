//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepsis_mbrl::behavior::BcConfig;
use sepsis_mbrl::dynamics::{MlpTrainConfig, DEFAULT_HORIZON};
use sepsis_mbrl::model_io::sha256_hex;
use sepsis_mbrl::ope::OpeConfig;
use sepsis_mbrl::policy_opt::PolicyOptConfig;
use sepsis_mbrl::synth::SynthConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Cohort CSV read by `ingest`.
    pub input: Option<PathBuf>,
    /// Feature schema JSON for `ingest`; the synthetic layout when absent.
    pub schema: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            input: None,
            schema: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Overwrite logged rewards with the reward function.
    pub recompute_rewards: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsStageConfig {
    pub model: DynamicsKind,
    pub ridge_lambda: f64,
    pub mlp: MlpTrainConfig,
}

impl Default for DynamicsStageConfig {
    fn default() -> Self {
        Self {
            model: DynamicsKind::Mlp,
            ridge_lambda: 1e-3,
            mlp: MlpTrainConfig::default(),
        }
    }
}

/// SOFA thresholds of the low, medium and high regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    pub sofa_low_max: u8,
    pub sofa_high_min: u8,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            sofa_low_max: 5,
            sofa_high_min: 15,
        }
    }
}

/// Source of the behavior probabilities used for importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSource {
    Knn,
    /// The generating clinician of a synthetic cohort.
    GroundTruth,
}

/// Policy acting in the clinician regimes of a blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClinicianSource {
    BehaviorClone,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateStageConfig {
    pub ope: OpeConfig,
    pub behavior: BehaviorSource,
    pub clinician: ClinicianSource,
    /// Monte-Carlo rollouts per blend in the true simulator (synthetic
    /// cohorts only); 0 skips the oracle column.
    pub oracle_rollouts: usize,
}

impl Default for EvaluateStageConfig {
    fn default() -> Self {
        Self {
            ope: OpeConfig::default(),
            behavior: BehaviorSource::Knn,
            clinician: ClinicianSource::BehaviorClone,
            oracle_rollouts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutExportConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
}

impl Default for RolloutExportConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 5,
            horizon: 2 * DEFAULT_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub gamma: f64,
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub dynamics: DynamicsStageConfig,
    pub behavior: BcConfig,
    pub policy: PolicyOptConfig,
    pub blend: BlendConfig,
    pub evaluate: EvaluateStageConfig,
    pub rollout_export: RolloutExportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gamma: 0.99,
            paths: PathsConfig::default(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            dynamics: DynamicsStageConfig::default(),
            behavior: BcConfig::default(),
            policy: PolicyOptConfig::default(),
            blend: BlendConfig::default(),
            evaluate: EvaluateStageConfig::default(),
            rollout_export: RolloutExportConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Propagates the global seed and discount into every stage section.
    /// Stage seeds are `seed + offset` so stages draw independent streams.
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.synth.seed = s;
        self.dynamics.mlp.seed = s.wrapping_add(1);
        self.behavior.seed = s.wrapping_add(2);
        self.policy.seed = s.wrapping_add(3);
        self.evaluate.ope.seed = s.wrapping_add(4);
        self.policy.gamma = self.gamma;
        self.evaluate.ope.gamma = self.gamma;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: sepsis_mbrl::Error| CliError::Config(e.to_string());
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CliError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        sepsis_mbrl::data::split_sizes(100, (self.split.train, self.split.validation, self.split.test))
            .map_err(config)?;
        self.synth.validate().map_err(config)?;
        if !(self.dynamics.ridge_lambda >= 0.0) {
            return Err(CliError::Config("dynamics.ridge_lambda must be >= 0".into()));
        }
        self.dynamics.mlp.validate().map_err(config)?;
        self.behavior.validate().map_err(config)?;
        self.policy.validate().map_err(config)?;
        self.blend_thresholds().map_err(config)?;
        self.evaluate.ope.validate().map_err(config)?;
        if self.rollout_export.horizon < 1 {
            return Err(CliError::Config("rollout_export.horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn blend_thresholds(&self) -> sepsis_mbrl::Result<(u8, u8)> {
        let spec = sepsis_mbrl::policy::BlendSpec::table_rows(self.blend.sofa_low_max, self.blend.sofa_high_min)[0];
        spec.validate()?;
        Ok((spec.sofa_low_max, spec.sofa_high_min))
    }

    /// SHA-256 of the canonical JSON of everything except `paths`, so runs
    /// in different directories share a hash.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("paths");
        }
        sha256_hex(&serde_json::to_vec(&value).expect("json value serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = PipelineConfig::from_json(r#"{"synth": {"n_patiens": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("n_patiens"), "{err}");
        let err = PipelineConfig::from_json(r#"{"evaluate": {"ope": {"kk": 3}}}"#).unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
    }

    #[test]
    fn nested_sections_accept_their_fields() {
        let c = PipelineConfig::from_json(
            r#"{"policy": {"iterations": 3}, "blend": {"sofa_low_max": 4}, "evaluate": {"ope": {"k": 10}, "behavior": "ground_truth"}}"#,
        )
        .unwrap();
        assert_eq!(c.policy.iterations, 3);
        assert_eq!(c.blend.sofa_low_max, 4);
        assert_eq!(c.evaluate.ope.k, 10);
        assert_eq!(c.evaluate.behavior, BehaviorSource::GroundTruth);
    }

    #[test]
    fn hash_ignores_paths_but_not_seed() {
        let a = PipelineConfig::default().resolve();
        let mut b = a.clone();
        b.paths.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { seed: 5, ..PipelineConfig::default() }.resolve();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn resolve_propagates_seed_and_gamma() {
        let c = PipelineConfig { seed: 10, gamma: 0.9, ..PipelineConfig::default() }.resolve();
        assert_eq!(c.synth.seed, 10);
        assert_eq!(c.policy.seed, 13);
        assert_eq!(c.evaluate.ope.gamma, 0.9);
        c.validate().unwrap();
    }
}
