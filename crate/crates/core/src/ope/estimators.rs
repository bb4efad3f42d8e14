use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::ForestConfig;
use super::fqi::fqi_fit;
use super::knn::KnnBehavior;
use super::{state_value, ActionValue, OpeData, PolicyTable};
use crate::data::{FeatureSchema, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{BlendSpec, StochasticPolicy};

pub const DEFAULT_CLIP_MAX: f64 = 100.0;

/// Cumulative importance ratios `rho_{0:t}` per episode and step.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratios {
    pub cumulative: Vec<Vec<f64>>,
    pub n_ratios: usize,
    pub n_clipped: usize,
}

impl Ratios {
    pub fn clip_fraction(&self) -> f64 {
        if self.n_ratios == 0 {
            0.0
        } else {
            self.n_clipped as f64 / self.n_ratios as f64
        }
    }

    /// Final weights `rho_{0:T-1}`.
    pub fn finals(&self) -> Vec<f64> {
        self.cumulative.iter().map(|r| *r.last().expect("nonempty episode")).collect()
    }
}

/// Per-step ratios `pi_e(a|s) / pi_b(a|s)` clipped into
/// `[1/clip_max, clip_max]` and multiplied along each episode. A zero
/// evaluation probability gives a zero ratio, which is not clipped.
pub fn is_ratios(data: &OpeData, eval: &PolicyTable, behavior: &PolicyTable, clip_max: f64) -> Result<Ratios> {
    if !(clip_max >= 1.0) {
        return Err(Error::Config(format!("clip_max {clip_max} must be >= 1")));
    }
    eval.check(data)?;
    behavior.check(data)?;
    let (lo, hi) = (1.0 / clip_max, clip_max);
    let mut n_ratios = 0;
    let mut n_clipped = 0;
    let mut cumulative = Vec::with_capacity(data.len());
    for ((e, pe), pb) in data.episodes.iter().zip(&eval.probs).zip(&behavior.probs) {
        let mut rho = 1.0;
        let mut row = Vec::with_capacity(e.len());
        for (t, &a) in e.actions.iter().enumerate() {
            let b = pb[t][a];
            if b <= 0.0 {
                return Err(Error::DivisionHazard { step: t, action: a });
            }
            let raw = pe[t][a] / b;
            let r = if raw == 0.0 { 0.0 } else { raw.clamp(lo, hi) };
            if r != raw {
                n_clipped += 1;
            }
            n_ratios += 1;
            rho *= r;
            row.push(rho);
        }
        cumulative.push(row);
    }
    Ok(Ratios { cumulative, n_ratios, n_clipped })
}

/// `(sum w)^2 / sum w^2`; zero for an all-zero weight set.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonGroup {
    pub horizon: usize,
    pub n_episodes: usize,
    pub weight_sum: f64,
    pub ess: f64,
    /// Group estimate; `None` when the group was dropped.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDiagnostics {
    pub groups: Vec<HorizonGroup>,
    pub n_episodes: usize,
    pub dropped_groups: usize,
    pub ess: f64,
    pub clip_fraction: f64,
}

fn horizon_groups(data: &OpeData) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in data.episodes.iter().enumerate() {
        groups.entry(e.len()).or_default().push(i);
    }
    groups
}

fn check_ratios(data: &OpeData, ratios: &Ratios) -> Result<()> {
    let ok = ratios.cumulative.len() == data.len()
        && ratios.cumulative.iter().zip(&data.episodes).all(|(r, e)| r.len() == e.len());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("importance ratios do not match the episodes".into()))
    }
}

fn discounted(rewards: &[f64], gamma: f64) -> f64 {
    crate::reward::discounted_return(rewards.iter().copied(), gamma)
}

/// Per-horizon weighted importance sampling. Groups whose weights sum to
/// zero are dropped and the remaining group fractions renormalized.
pub fn phwis(data: &OpeData, ratios: &Ratios, gamma: f64) -> Result<(f64, EstimatorDiagnostics)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("PHWIS on an empty cohort".into()));
    }
    check_ratios(data, ratios)?;
    let finals = ratios.finals();
    let mut groups = Vec::new();
    let mut kept = 0usize;
    let mut total = 0.0;
    for (horizon, members) in horizon_groups(data) {
        let w: Vec<f64> = members.iter().map(|&i| finals[i]).collect();
        let weight_sum: f64 = w.iter().sum();
        let value = (weight_sum > 0.0).then(|| {
            members
                .iter()
                .zip(&w)
                .map(|(&i, wi)| wi * discounted(&data.episodes[i].rewards, gamma))
                .sum::<f64>()
                / weight_sum
        });
        if let Some(v) = value {
            kept += members.len();
            total += members.len() as f64 * v;
        }
        groups.push(HorizonGroup { horizon, n_episodes: members.len(), weight_sum, ess: effective_sample_size(&w), value });
    }
    if kept == 0 {
        return Err(Error::Domain("every horizon group has zero importance weight".into()));
    }
    let diagnostics = diagnostics(groups, data.len(), ratios);
    Ok((total / kept as f64, diagnostics))
}

fn diagnostics(groups: Vec<HorizonGroup>, n_episodes: usize, ratios: &Ratios) -> EstimatorDiagnostics {
    EstimatorDiagnostics {
        dropped_groups: groups.iter().filter(|g| g.value.is_none()).count(),
        ess: groups.iter().map(|g| g.ess).sum(),
        groups,
        n_episodes,
        clip_fraction: ratios.clip_fraction(),
    }
}

/// Self-normalized stepwise weights `w_{i,t}` within one group; a step
/// whose ratios all vanish gets zero weights.
fn stepwise_weights(members: &[usize], ratios: &Ratios, horizon: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; horizon]; members.len()];
    for t in 0..horizon {
        let sum: f64 = members.iter().map(|&i| ratios.cumulative[i][t]).sum();
        if sum > 0.0 {
            for (row, &i) in w.iter_mut().zip(members) {
                row[t] = ratios.cumulative[i][t] / sum;
            }
        }
    }
    w
}

/// Per-horizon stepwise weighted importance sampling:
/// `sum_l W_l sum_t gamma^t sum_i w_{i,t} r_{i,t}` with `W_l = n_l / n`.
pub fn stepwise_wis(data: &OpeData, ratios: &Ratios, gamma: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("weighted IS on an empty cohort".into()));
    }
    check_ratios(data, ratios)?;
    let mut total = 0.0;
    for (horizon, members) in horizon_groups(data) {
        let w = stepwise_weights(&members, ratios, horizon);
        let mut group = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            group += discount * members.iter().zip(&w).map(|(&i, wi)| wi[t] * data.episodes[i].rewards[t]).sum::<f64>();
            discount *= gamma;
        }
        total += members.len() as f64 * group;
    }
    Ok(total / data.len() as f64)
}

fn check_q(data: &OpeData, q: &dyn ActionValue, gamma: Option<f64>) -> Result<()> {
    if q.n_actions() != data.n_actions {
        return Err(Error::Shape(format!("Q covers {} actions, data has {}", q.n_actions(), data.n_actions)));
    }
    if let (Some(fitted), Some(g)) = (q.gamma(), gamma) {
        if (fitted - g).abs() > 1e-12 {
            return Err(Error::Config(format!("Q was fitted with gamma {fitted} but the estimator uses {g}")));
        }
    }
    Ok(())
}

/// Per-horizon weighted doubly robust estimate with stepwise
/// self-normalized weights and `w_{i,-1} = 1/n_l`.
pub fn phwdr(
    data: &OpeData,
    eval: &PolicyTable,
    ratios: &Ratios,
    q: &dyn ActionValue,
    gamma: f64,
) -> Result<(f64, EstimatorDiagnostics)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("PHWDR on an empty cohort".into()));
    }
    check_ratios(data, ratios)?;
    eval.check(data)?;
    check_q(data, q, Some(gamma))?;
    let finals = ratios.finals();
    let mut total = 0.0;
    let mut groups = Vec::new();
    for (horizon, members) in horizon_groups(data) {
        let w = stepwise_weights(&members, ratios, horizon);
        let prior = 1.0 / members.len() as f64;
        let mut group = 0.0;
        for (&i, wi) in members.iter().zip(&w) {
            let e = &data.episodes[i];
            let states: Vec<&[f64]> = e.states.iter().map(Vec::as_slice).collect();
            let qs = q.q_values(&states)?;
            let mut discount = 1.0;
            for t in 0..horizon {
                let w_prev = if t == 0 { prior } else { wi[t - 1] };
                let q_sa = qs[t][e.actions[t]];
                let v_s = state_value(&eval.probs[i][t], &qs[t]);
                group += discount * (wi[t] * e.rewards[t] - (wi[t] * q_sa - w_prev * v_s));
                discount *= gamma;
            }
        }
        total += members.len() as f64 * group;
        let fw: Vec<f64> = members.iter().map(|&i| finals[i]).collect();
        groups.push(HorizonGroup {
            horizon,
            n_episodes: members.len(),
            weight_sum: fw.iter().sum(),
            ess: effective_sample_size(&fw),
            value: Some(group),
        });
    }
    Ok((total / data.len() as f64, diagnostics(groups, data.len(), ratios)))
}

/// Approximate-model estimate: mean of `V_Q(s_0)` over initial states.
pub fn am(data: &OpeData, eval: &PolicyTable, q: &dyn ActionValue) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("AM estimate on an empty cohort".into()));
    }
    eval.check(data)?;
    check_q(data, q, None)?;
    let starts: Vec<&[f64]> = data.episodes.iter().map(|e| e.states[0].as_slice()).collect();
    let qs = q.q_values(&starts)?;
    let total: f64 = qs.iter().zip(&eval.probs).map(|(qv, pi)| state_value(&pi[0], qv)).sum();
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeConfig {
    pub gamma: f64,
    pub k: usize,
    pub alpha: f64,
    pub clip_max: f64,
    /// FQI iterations; `None` uses the longest evaluation episode.
    pub fqi_iterations: Option<usize>,
    pub forest: ForestConfig,
    pub seed: u64,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            k: 250,
            alpha: 0.5,
            clip_max: DEFAULT_CLIP_MAX,
            fqi_iterations: None,
            forest: ForestConfig::default(),
            seed: 0,
        }
    }
}

impl OpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(self.clip_max >= 1.0) {
            return Err(Error::Config(format!("clip_max {} must be >= 1", self.clip_max)));
        }
        self.forest.validate()
    }
}

/// Where behavior probabilities come from.
#[derive(Clone, Copy)]
pub enum BehaviorModel<'a> {
    /// Fit a nearest-neighbor model on the states and actions of a
    /// reference cohort.
    Knn { reference: &'a [Trajectory] },
    /// Use known probabilities.
    Given(&'a dyn StochasticPolicy),
    /// Probabilities already tabulated on the evaluation cohort.
    Table(&'a PolicyTable),
}

/// Behavior probabilities on `cohort` from a nearest-neighbor model fitted
/// on the states and actions of `reference`.
pub fn knn_behavior_table(reference: &[Trajectory], cohort: &[Trajectory], k: usize, alpha: f64) -> Result<PolicyTable> {
    let refs = OpeData::from_cohort(reference)?;
    let data = OpeData::from_cohort(cohort)?;
    let states: Vec<Vec<f64>> = refs.episodes.iter().flat_map(|e| e.states.iter().cloned()).collect();
    let actions: Vec<usize> = refs.episodes.iter().flat_map(|e| e.actions.iter().copied()).collect();
    let knn = KnnBehavior::fit(&states, &actions, refs.n_actions, k, alpha)?;
    PolicyTable::from_states(&data, |s| knn.proba(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub phwis: f64,
    pub phwdr: f64,
    pub am: f64,
    pub behavior: String,
    pub n_episodes: usize,
    pub n_steps: usize,
    pub fqi_iterations: usize,
    pub phwis_diagnostics: EstimatorDiagnostics,
    pub phwdr_diagnostics: EstimatorDiagnostics,
    pub config: OpeConfig,
    /// Regime assignment and SOFA thresholds of a blended policy.
    pub blend: Option<BlendSpec>,
}

/// Fits the behavior model and Q estimate and runs all three estimators on
/// `cohort`.
pub fn evaluate_policy(
    cohort: &[Trajectory],
    schema: &FeatureSchema,
    eval_policy: &dyn StochasticPolicy,
    behavior: BehaviorModel<'_>,
    config: &OpeConfig,
) -> Result<OpeReport> {
    config.validate()?;
    let data = OpeData::from_cohort(cohort)?;
    let eval = PolicyTable::from_cohort(eval_policy, cohort, schema)?;
    let (behavior_table, label) = match behavior {
        BehaviorModel::Knn { reference } => (knn_behavior_table(reference, cohort, config.k, config.alpha)?, "knn"),
        BehaviorModel::Given(policy) => (PolicyTable::from_cohort(policy, cohort, schema)?, "given"),
        BehaviorModel::Table(table) => (table.clone(), "table"),
    };
    let ratios = is_ratios(&data, &eval, &behavior_table, config.clip_max)?;
    let (phwis_value, phwis_diagnostics) = phwis(&data, &ratios, config.gamma)?;
    let q = fqi_fit(&data, &eval, config.gamma, config.fqi_iterations, &config.forest, config.seed)?;
    let (phwdr_value, phwdr_diagnostics) = phwdr(&data, &eval, &ratios, &q, config.gamma)?;
    let am_value = am(&data, &eval, &q)?;
    for (name, v) in [("PHWIS", phwis_value), ("PHWDR", phwdr_value), ("AM", am_value)] {
        if !v.is_finite() {
            return Err(Error::Domain(format!("{name} estimate is not finite")));
        }
    }
    Ok(OpeReport {
        phwis: phwis_value,
        phwdr: phwdr_value,
        am: am_value,
        behavior: label.into(),
        n_episodes: data.len(),
        n_steps: data.n_steps(),
        fqi_iterations: q.iterations,
        phwis_diagnostics,
        phwdr_diagnostics,
        config: config.clone(),
        blend: None,
    })
}

/// Writes `estimator,value,ess,clip_fraction`; the AM row reports the
/// number of initial states as its sample size.
pub fn write_report_csv(report: &OpeReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let rows = [
        ("phwis", report.phwis, report.phwis_diagnostics.ess, report.phwis_diagnostics.clip_fraction),
        ("phwdr", report.phwdr, report.phwdr_diagnostics.ess, report.phwdr_diagnostics.clip_fraction),
        ("am", report.am, report.n_episodes as f64, 0.0),
    ];
    w.write_record(["estimator", "value", "ess", "clip_fraction"]).map_err(|e| csv_error(path, e))?;
    for (name, v, ess, clip) in rows {
        w.write_record([name.to_string(), v.to_string(), ess.to_string(), clip.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
