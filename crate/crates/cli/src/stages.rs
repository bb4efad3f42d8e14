//! Pipeline stages. Each stage reads named artifacts from the output
//! directory, writes its own, and records both in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sepsis_mbrl::behavior::{bc_fit, BcDataset, PolicyNet};
use sepsis_mbrl::data::{
    fit_action_bins, read_cohort_csv, read_doses, split_cohort, write_cohort_csv, ActionBins, FeatureSchema, Trajectory,
};
use sepsis_mbrl::dynamics::{
    fit_linear_env, fit_mlp_env, rollout, write_rollout_csv, ActionSource, EnvModel, EpochRecord, RolloutConfig,
    TransitionSet,
};
use sepsis_mbrl::model_io::{load_model, save_model, ArtifactMeta};
use sepsis_mbrl::ope::{evaluate_policy, knn_behavior_table, BehaviorModel, OpeReport};
use sepsis_mbrl::policy::{BlendSpec, BlendedPolicy, Source, StochasticPolicy};
use sepsis_mbrl::policy_opt::{train_policy, write_diagnostics_csv};
use sepsis_mbrl::reward::{behavior_value, recompute_rewards};
use sepsis_mbrl::synth::{generate_cohort, true_policy_value, GroundTruth};

use crate::config::{BehaviorSource, ClinicianSource, DynamicsKind, PipelineConfig};
use crate::error::CliError;
use crate::manifest::{hash_file, hash_files, record_timing, up_to_date, DirLock, RunManifest, StageRecord};

pub const COHORT: &str = "cohort.csv";
pub const SCHEMA: &str = "schema.json";
pub const BINS: &str = "action_bins.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const DYNAMICS: &str = "dynamics.json";
pub const DYNAMICS_METRICS: &str = "dynamics_metrics.csv";
pub const BEHAVIOR: &str = "behavior.json";
pub const BEHAVIOR_METRICS: &str = "behavior_metrics.csv";
pub const POLICY: &str = "policy.json";
pub const POLICY_METRICS: &str = "policy_metrics.csv";
pub const EVALUATION: &str = "evaluation.json";
pub const EVALUATION_TABLE: &str = "evaluation.csv";
pub const EVALUATION_ESTIMATORS: &str = "evaluation_estimators.csv";
pub const ROLLOUTS: &str = "rollouts.csv";
pub const ROLLOUT_DIR: &str = "rollouts";

/// Envelope kind of each JSON artifact.
pub fn artifact_kind(name: &str) -> &'static str {
    match name {
        SCHEMA => "schema",
        BINS => "action_bins",
        GROUND_TRUTH => "ground_truth",
        DYNAMICS => "dynamics",
        BEHAVIOR => "behavior",
        POLICY => "policy",
        EVALUATION => "evaluation",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    FitDynamics,
    FitBehavior,
    TrainPolicy,
    Evaluate,
    RolloutExport,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::FitDynamics => "fit-dynamics",
            Stage::FitBehavior => "fit-behavior",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
            Stage::RolloutExport => "rollout-export",
        }
    }

    fn seed(self, config: &PipelineConfig) -> u64 {
        match self {
            Stage::Synth | Stage::Ingest | Stage::RolloutExport => config.seed,
            Stage::FitDynamics => config.dynamics.mlp.seed,
            Stage::FitBehavior => config.behavior.seed,
            Stage::TrainPolicy => config.policy.seed,
            Stage::Evaluate => config.evaluate.ope.seed,
        }
    }

    /// Artifacts of this output directory the stage reads.
    fn inputs(self, config: &PipelineConfig) -> Vec<&'static str> {
        let data = [COHORT, SCHEMA, BINS];
        let mut v: Vec<&'static str> = match self {
            Stage::Synth | Stage::Ingest => Vec::new(),
            Stage::FitDynamics | Stage::FitBehavior => data.to_vec(),
            Stage::TrainPolicy => [&data[..], &[DYNAMICS, BEHAVIOR]].concat(),
            Stage::Evaluate => [&data[..], &[BEHAVIOR, POLICY]].concat(),
            Stage::RolloutExport => [&data[..], &[DYNAMICS]].concat(),
        };
        if self == Stage::Evaluate {
            let e = &config.evaluate;
            if e.behavior == BehaviorSource::GroundTruth || e.clinician == ClinicianSource::GroundTruth || e.oracle_rollouts > 0 {
                v.push(GROUND_TRUTH);
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub status: Status,
    pub outputs: Vec<String>,
}

/// Resolved configuration plus run options.
pub struct RunContext {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub config_hash: String,
    pub force: bool,
}

impl RunContext {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        let config = config.resolve();
        config.validate()?;
        Ok(Self {
            out: config.paths.out.clone(),
            config_hash: config.hash(),
            config,
            force,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self, stage: Stage) -> ArtifactMeta {
        ArtifactMeta {
            config_hash: Some(self.config_hash.clone()),
            seed: Some(stage.seed(&self.config)),
        }
    }

    fn save<T: Serialize>(&self, stage: Stage, name: &str, payload: &T) -> Result<()> {
        save_model(&self.path(name), artifact_kind(name), payload, &self.meta(stage)).with_context(|| format!("writing {name}"))
    }

    /// Loads a JSON artifact, refusing one written under another
    /// configuration unless forced.
    fn load<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let (payload, meta) = load_model(&self.path(name), artifact_kind(name)).with_context(|| format!("loading {name}"))?;
        if !self.force && meta.config_hash.as_deref() != Some(self.config_hash.as_str()) {
            return Err(CliError::Dependency(format!(
                "{name} was produced under config hash {} but the current config hash is {}; rerun the upstream stage or pass --force",
                meta.config_hash.as_deref().unwrap_or("<none>"),
                self.config_hash
            ))
            .into());
        }
        Ok(payload)
    }

    fn load_cohort(&self) -> Result<(Vec<Trajectory>, FeatureSchema)> {
        let schema: FeatureSchema = self.load(SCHEMA)?;
        let bins: ActionBins = self.load(BINS)?;
        let cohort = read_cohort_csv(&self.path(COHORT), &schema, &bins).context("reading cohort.csv")?;
        for traj in &cohort {
            traj.validate(&schema)?;
        }
        Ok((cohort, schema))
    }

    /// Train, validation and test splits by patient.
    fn splits(&self, cohort: &[Trajectory]) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Vec<Trajectory>)> {
        let s = self.config.split;
        Ok(split_cohort(cohort, (s.train, s.validation, s.test), self.config.seed)?)
    }
}

/// Runs one stage under the directory lock, skipping it when the manifest
/// shows identical inputs and unchanged outputs.
pub fn run_stage(stage: Stage, ctx: &RunContext) -> Result<StageOutcome> {
    let _lock = DirLock::acquire(&ctx.out)?;
    let mut manifest = RunManifest::load_or_new(&ctx.out, &ctx.config_hash)?;
    let local: Vec<String> = stage.inputs(&ctx.config).into_iter().map(String::from).collect();
    let missing: Vec<String> = local
        .iter()
        .filter(|n| !ctx.path(n).exists())
        .map(|n| ctx.path(n).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Dependency(format!("{} needs missing artifacts: {}", stage.name(), missing.join(", "))).into());
    }
    for name in local.iter().filter(|n| n.ends_with(".json")) {
        load_model::<serde_json::Value>(&ctx.path(name), artifact_kind(name)).with_context(|| format!("loading {name}"))?;
    }
    let mut inputs = hash_files(&ctx.out, &local)?;
    if !ctx.force {
        for (name, hash) in &inputs {
            match manifest.producer(name) {
                Some((_, rec)) if rec.config_hash == ctx.config_hash && rec.outputs.get(name) == Some(hash) => {}
                Some((producer, _)) => {
                    return Err(CliError::Dependency(format!(
                        "{name} does not match what `{producer}` recorded for the current config; rerun `{producer}` or pass --force"
                    ))
                    .into())
                }
                None => {
                    return Err(CliError::Dependency(format!(
                        "{name} is not recorded in the manifest of {}; pass --force to use it anyway",
                        ctx.out.display()
                    ))
                    .into())
                }
            }
        }
    }
    if stage == Stage::Ingest {
        let input = ingest_input(ctx)?;
        let key = format!("input/{}", input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        inputs.insert(key, hash_file(&input)?);
    }
    if !ctx.force {
        if let Some(rec) = manifest.stages.get(stage.name()) {
            if up_to_date(&ctx.out, rec, &ctx.config_hash, &inputs) {
                return Ok(StageOutcome {
                    stage: stage.name(),
                    status: Status::UpToDate,
                    outputs: rec.outputs.keys().cloned().collect(),
                });
            }
        }
    }
    let started = Instant::now();
    let outputs = match stage {
        Stage::Synth => synth(ctx)?,
        Stage::Ingest => ingest(ctx)?,
        Stage::FitDynamics => fit_dynamics(ctx)?,
        Stage::FitBehavior => fit_behavior(ctx)?,
        Stage::TrainPolicy => train(ctx)?,
        Stage::Evaluate => evaluate(ctx)?,
        Stage::RolloutExport => rollout_export(ctx)?,
    };
    let record = StageRecord {
        config_hash: ctx.config_hash.clone(),
        seed: stage.seed(&ctx.config),
        inputs,
        outputs: hash_files(&ctx.out, &outputs)?,
    };
    manifest.stages.insert(stage.name().into(), record);
    manifest.save(&ctx.out)?;
    record_timing(&ctx.out, stage.name(), started.elapsed().as_secs_f64())?;
    Ok(StageOutcome {
        stage: stage.name(),
        status: Status::Ran,
        outputs,
    })
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn synth(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, truth) = generate_cohort(&ctx.config.synth)?;
    write_cohort_csv(&cohort, &truth.schema, &ctx.path(COHORT))?;
    ctx.save(Stage::Synth, SCHEMA, &truth.schema)?;
    ctx.save(Stage::Synth, BINS, &truth.dose_bins)?;
    ctx.save(Stage::Synth, GROUND_TRUTH, &truth)?;
    Ok(names(&[COHORT, SCHEMA, BINS, GROUND_TRUTH]))
}

fn ingest_input(ctx: &RunContext) -> Result<PathBuf> {
    let input = ctx
        .config
        .paths
        .input
        .clone()
        .ok_or_else(|| CliError::Config("ingest needs paths.input".into()))?;
    if !input.exists() {
        return Err(CliError::Dependency(format!("ingest input {} does not exist", input.display())).into());
    }
    Ok(input)
}

fn ingest(ctx: &RunContext) -> Result<Vec<String>> {
    let input = ingest_input(ctx)?;
    let schema = match &ctx.config.paths.schema {
        Some(p) if !p.exists() => {
            return Err(CliError::Dependency(format!("schema file {} does not exist", p.display())).into())
        }
        Some(p) => FeatureSchema::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => FeatureSchema::synthetic(),
    };
    let bins = fit_action_bins(&read_doses(&input, &schema)?)?;
    let mut cohort = read_cohort_csv(&input, &schema, &bins)?;
    if cohort.is_empty() {
        return Err(CliError::Data(format!("{} holds no patients", input.display())).into());
    }
    for traj in &mut cohort {
        traj.validate(&schema)?;
        if ctx.config.ingest.recompute_rewards {
            recompute_rewards(traj, &schema, &ctx.config.policy.reward)?;
        }
    }
    write_cohort_csv(&cohort, &schema, &ctx.path(COHORT))?;
    ctx.save(Stage::Ingest, SCHEMA, &schema)?;
    ctx.save(Stage::Ingest, BINS, &bins)?;
    Ok(names(&[COHORT, SCHEMA, BINS]))
}

fn write_epochs(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for r in records {
        w.write_record([r.epoch.to_string(), r.train_mse.to_string(), r.val_mse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn fit_dynamics(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, schema) = ctx.load_cohort()?;
    let (train, val, _) = ctx.splits(&cohort)?;
    let tr = TransitionSet::from_cohort(&train, &schema)?;
    let va = TransitionSet::from_cohort(&val, &schema)?;
    let cfg = &ctx.config.dynamics;
    let (model, curve) = match cfg.model {
        DynamicsKind::Linear => {
            let model = fit_linear_env(&schema, &tr, cfg.ridge_lambda)?;
            let record = EpochRecord { epoch: 0, train_mse: model.scaled_mse(&tr)?, val_mse: model.scaled_mse(&va)? };
            (model, vec![record])
        }
        DynamicsKind::Mlp => fit_mlp_env(&schema, &tr, &va, &cfg.mlp)?,
    };
    ctx.save(Stage::FitDynamics, DYNAMICS, &model)?;
    write_epochs(&ctx.path(DYNAMICS_METRICS), &curve)?;
    Ok(names(&[DYNAMICS, DYNAMICS_METRICS]))
}

fn fit_behavior(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, schema) = ctx.load_cohort()?;
    let (train, val, _) = ctx.splits(&cohort)?;
    let tr = BcDataset::from_cohort(&train, &schema)?;
    let va = BcDataset::from_cohort(&val, &schema)?;
    let (model, curve) = bc_fit(&tr, &va, schema.d_raw(), &ctx.config.behavior)?;
    ctx.save(Stage::FitBehavior, BEHAVIOR, &model)?;
    let mut w = csv_writer(&ctx.path(BEHAVIOR_METRICS))?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy"])?;
    for r in &curve {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.val_accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(names(&[BEHAVIOR, BEHAVIOR_METRICS]))
}

/// Trained policy together with the regime thresholds it is blended under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub policy: PolicyNet,
    pub blend: BlendSpec,
}

fn train(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, _) = ctx.load_cohort()?;
    let (train, _, _) = ctx.splits(&cohort)?;
    let env: EnvModel = ctx.load(DYNAMICS)?;
    let bc: PolicyNet = ctx.load(BEHAVIOR)?;
    let (policy, records) = train_policy(&bc, &env, &train, &ctx.config.policy)?;
    let (low, high) = ctx.config.blend_thresholds()?;
    let blend = BlendSpec { sofa_low_max: low, sofa_high_min: high, ..BlendSpec::default() };
    ctx.save(Stage::TrainPolicy, POLICY, &PolicyArtifact { policy, blend })?;
    write_diagnostics_csv(&records, &ctx.path(POLICY_METRICS))?;
    Ok(names(&[POLICY, POLICY_METRICS]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendRow {
    pub label: String,
    pub blend: BlendSpec,
    pub report: OpeReport,
    /// True value and standard error in the generating simulator.
    pub oracle: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub held_out_mean_return: f64,
    pub n_test_episodes: usize,
    pub behavior: BehaviorSource,
    pub clinician: ClinicianSource,
    pub sofa_low_max: u8,
    pub sofa_high_min: u8,
    pub k: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub rows: Vec<BlendRow>,
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Clinician => "clinician",
        Source::Learned => "learned",
    }
}

fn evaluate(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, schema) = ctx.load_cohort()?;
    let (train, _, test) = ctx.splits(&cohort)?;
    if test.is_empty() {
        return Err(CliError::Data("the test split is empty".into()).into());
    }
    let e = &ctx.config.evaluate;
    let truth: Option<GroundTruth> = if ctx.config.evaluate.behavior == BehaviorSource::GroundTruth
        || e.clinician == ClinicianSource::GroundTruth
        || e.oracle_rollouts > 0
    {
        Some(ctx.load(GROUND_TRUTH)?)
    } else {
        None
    };
    let learned: PolicyArtifact = ctx.load(POLICY)?;
    let learned: Arc<dyn StochasticPolicy> = Arc::new(learned.policy);
    let clinician: Arc<dyn StochasticPolicy> = match (e.clinician, &truth) {
        (ClinicianSource::GroundTruth, Some(t)) => Arc::new(t.clinician()),
        _ => Arc::new(ctx.load::<PolicyNet>(BEHAVIOR)?),
    };
    let true_clinician = truth.as_ref().map(|t| t.clinician());
    let knn_table = match e.behavior {
        BehaviorSource::Knn => Some(knn_behavior_table(&train, &test, e.ope.k, e.ope.alpha)?),
        BehaviorSource::GroundTruth => None,
    };
    let (low, high) = ctx.config.blend_thresholds()?;
    let gamma = ctx.config.gamma;
    let mut rows = Vec::new();
    for spec in BlendSpec::table_rows(low, high) {
        let blend = BlendedPolicy::new(clinician.clone(), learned.clone(), spec)?;
        let behavior = match (&knn_table, &true_clinician) {
            (Some(table), _) => BehaviorModel::Table(table),
            (None, Some(c)) => BehaviorModel::Given(c),
            (None, None) => unreachable!("ground truth is loaded for ground-truth behavior"),
        };
        let mut report = evaluate_policy(&test, &schema, &blend, behavior, &e.ope)?;
        report.blend = Some(spec);
        let oracle = match &truth {
            Some(t) if e.oracle_rollouts > 0 => Some(true_policy_value(t, &blend, e.oracle_rollouts, gamma, ctx.config.seed)?),
            _ => None,
        };
        rows.push(BlendRow { label: spec.label(), blend: spec, report, oracle });
    }
    let summary = EvaluationReport {
        held_out_mean_return: behavior_value(&test, gamma)?,
        n_test_episodes: test.len(),
        behavior: e.behavior,
        clinician: e.clinician,
        sofa_low_max: low,
        sofa_high_min: high,
        k: e.ope.k,
        alpha: e.ope.alpha,
        gamma,
        rows,
    };
    ctx.save(Stage::Evaluate, EVALUATION, &summary)?;
    let mut w = csv_writer(&ctx.path(EVALUATION_TABLE))?;
    w.write_record(["blend", "low", "medium", "high", "phwis", "phwdr", "am"])?;
    for row in &summary.rows {
        let b = row.blend;
        w.write_record([
            row.label.clone(),
            source_name(b.low).to_string(),
            source_name(b.medium).to_string(),
            source_name(b.high).to_string(),
            row.report.phwis.to_string(),
            row.report.phwdr.to_string(),
            row.report.am.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&ctx.path(EVALUATION_ESTIMATORS))?;
    w.write_record(["blend", "estimator", "value", "ess", "clip_fraction"])?;
    for row in &summary.rows {
        let r = &row.report;
        let entries = [
            ("phwis", r.phwis, r.phwis_diagnostics.ess, r.phwis_diagnostics.clip_fraction),
            ("phwdr", r.phwdr, r.phwdr_diagnostics.ess, r.phwdr_diagnostics.clip_fraction),
            ("am", r.am, r.n_episodes as f64, 0.0),
        ];
        for (name, v, ess, clip) in entries {
            w.write_record([row.label.clone(), name.to_string(), v.to_string(), ess.to_string(), clip.to_string()])?;
        }
    }
    w.flush()?;
    Ok(names(&[EVALUATION, EVALUATION_TABLE, EVALUATION_ESTIMATORS]))
}

fn file_stem(patient_id: &str) -> String {
    patient_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn rollout_export(ctx: &RunContext) -> Result<Vec<String>> {
    let (cohort, schema) = ctx.load_cohort()?;
    let (_, val, _) = ctx.splits(&cohort)?;
    let env: EnvModel = ctx.load(DYNAMICS)?;
    let cfg = RolloutConfig {
        horizon: ctx.config.rollout_export.horizon,
        stochastic: false,
        reward: ctx.config.policy.reward,
    };
    let sofa = schema.sofa_index();
    fs::create_dir_all(ctx.path(ROLLOUT_DIR))?;
    let mut outputs = vec![ROLLOUTS.to_string()];
    let mut w = csv_writer(&ctx.path(ROLLOUTS))?;
    w.write_record(["patient_id", "t", "sofa_pred", "sofa_actual"])?;
    let mut by_id = BTreeMap::new();
    for traj in val.iter().filter(|t| t.len() >= 2).take(ctx.config.rollout_export.n_trajectories) {
        let result = rollout(&env, traj, 1, ActionSource::Logged, &cfg, ctx.config.seed)?;
        let predicted = std::iter::once(&result.start).chain(&result.observations);
        for (k, obs) in predicted.enumerate() {
            let t = result.start_t + k;
            w.write_record([
                traj.patient_id.clone(),
                t.to_string(),
                obs.values()[sofa].to_string(),
                traj.steps[t].obs.values()[sofa].to_string(),
            ])?;
        }
        let name = format!("{ROLLOUT_DIR}/{}.csv", file_stem(&traj.patient_id));
        if by_id.insert(name.clone(), ()).is_some() {
            return Err(CliError::Data(format!("patient ids collide in rollout file name {name}")).into());
        }
        write_rollout_csv(&result, Some(traj), &schema, &ctx.path(&name))?;
        outputs.push(name);
    }
    w.flush()?;
    Ok(outputs)
}
