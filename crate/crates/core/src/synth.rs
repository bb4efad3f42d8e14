//! Parametric ground-truth MDP producing ICU-shaped synthetic cohorts.
//!
//! A latent severity scalar `x` (roughly half the SOFA scale) drives every
//! observed feature:
//!
//! * initial severity `x0 ~ N(4.5, 1.8^2)` clipped to `[0.25, 11.5]`;
//! * episode length uniform on `ceil(max_horizon / 2) ..= max_horizon`;
//! * transition `x' = clamp(x + severity_drift + treatment_effect[a] * response(x) + N(0, noise_std^2), 0, 12)`
//!   with `response(x) = tanh((x - 2.75) / 0.75)`, so treatments that help
//!   sicker patients hurt mild ones;
//! * emission `SOFA = clamp(round(2x), 0, 24)`, `lactate = max(softplus(x) + N(0, 0.1^2), 0.05)`
//!   and ten auxiliary features linear in `x` plus Gaussian noise;
//! * after the last action the patient dies with probability
//!   `sigmoid(mortality_slope * x_T + mortality_intercept)`.
//!
//! The clinician acts on the observed SOFA only: a softmax (temperature
//! `clinician_temperature`) over negative squared distances between the dose
//! bins and a per-regime target. In the medium regime the target under-doses
//! relative to the optimum of the default treatment-effect matrix.
//!
//! Every patient (or oracle rollout) `i` draws from its own ChaCha8 stream
//! `i` of the run seed, in a fixed order: horizon, initial severity, then per
//! step emission noise, action, doses and transition noise, and finally the
//! outcome. Results therefore do not depend on batching or iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    Action, ActionBins, Doses, EpisodeBuffer, FeatureSchema, Observation, StateVector, Step,
    Trajectory, N_ACTIONS, N_BINS,
};
use crate::error::{Error, Result};
use crate::policy::{sample_index, DecisionPoint, StochasticPolicy};
use crate::reward::{discounted_return, terminal_reward, transition_reward, RewardParams};

const SEVERITY_MAX: f64 = 12.0;
const PRIOR_MEAN: f64 = 4.5;
const PRIOR_STD: f64 = 1.8;
const PRIOR_RANGE: (f64, f64) = (0.25, 11.5);
const RESPONSE_PIVOT: f64 = 2.75;
const RESPONSE_WIDTH: f64 = 0.75;
const LACTATE_NOISE: f64 = 0.1;
const LACTATE_FLOOR: f64 = 0.05;

/// (base, slope in x, noise std) of the ten auxiliary features, in schema
/// order after SOFA and lactate.
const AUX_EMISSION: [(f64, f64, f64); 10] = [
    (78.0, 4.0, 4.0),    // heart_rate
    (88.0, -3.0, 3.0),   // mean_bp
    (128.0, -4.0, 5.0),  // systolic_bp
    (15.0, 1.2, 1.5),    // respiratory_rate
    (36.9, 0.08, 0.3),   // temperature
    (97.5, -0.5, 0.8),   // spo2
    (0.9, 0.25, 0.15),   // creatinine
    (14.0, 3.0, 3.0),    // bun
    (260.0, -12.0, 20.0), // platelets
    (9.0, 0.8, 1.5),     // wbc
];

/// Clinician dose-bin targets `(iv, vp)` per observed-SOFA regime.
const CLINICIAN_TARGETS: [(f64, f64); 3] = [(0.3, 0.1), (1.3, 0.6), (3.4, 3.6)];
const CLINICIAN_LOW_MAX: f64 = 5.0;
const CLINICIAN_HIGH_MIN: f64 = 15.0;

/// Fixed dose-bin edges used to turn sampled actions into raw doses.
const IV_EDGES: [f64; 3] = [50.0, 180.0, 530.0];
const VP_EDGES: [f64; 3] = [0.08, 0.22, 0.45];

pub type EffectMatrix = [[f64; N_BINS]; N_BINS];

/// Severity change per action at full responsiveness, largest benefit at
/// moderate combined dosing (bins 2-3 of both drugs).
pub fn default_treatment_effect() -> EffectMatrix {
    let mut m = [[0.0; N_BINS]; N_BINS];
    for (iv, row) in m.iter_mut().enumerate() {
        for (vp, v) in row.iter_mut().enumerate() {
            let d2 = (iv as f64 - 2.5).powi(2) + (vp as f64 - 2.5).powi(2);
            *v = -0.3 * (-d2 / 3.0).exp();
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub max_horizon: usize,
    pub severity_drift: f64,
    pub treatment_effect: EffectMatrix,
    pub noise_std: f64,
    pub clinician_temperature: f64,
    pub mortality_slope: f64,
    pub mortality_intercept: f64,
    pub reward: RewardParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            max_horizon: 12,
            severity_drift: 0.1,
            treatment_effect: default_treatment_effect(),
            noise_std: 0.25,
            clinician_temperature: 2.0,
            mortality_slope: 0.8,
            mortality_intercept: -6.0,
            reward: RewardParams::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 1 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        if self.max_horizon < 2 {
            return Err(Error::Config("max_horizon must be >= 2".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be > 0".into()));
        }
        if !(self.clinician_temperature > 0.0) {
            return Err(Error::Config("clinician_temperature must be > 0".into()));
        }
        let finite = [self.severity_drift, self.mortality_slope, self.mortality_intercept]
            .iter()
            .chain(self.treatment_effect.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("synthetic dynamics parameters must be finite".into()));
        }
        self.reward.validate()
    }
}

/// The generating process of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub schema: FeatureSchema,
    pub dose_bins: ActionBins,
}

impl GroundTruth {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            schema: FeatureSchema::synthetic(),
            dose_bins: ActionBins::new(IV_EDGES, VP_EDGES)?,
        })
    }

    pub fn clinician(&self) -> ClinicianPolicy {
        ClinicianPolicy {
            sofa_index: self.schema.sofa_index(),
            temperature: self.config.clinician_temperature,
        }
    }

    pub fn response(x: f64) -> f64 {
        ((x - RESPONSE_PIVOT) / RESPONSE_WIDTH).tanh()
    }

    /// Expected severity after taking `action` at severity `x` (before
    /// noise and clamping).
    pub fn mean_transition(&self, x: f64, action: Action) -> f64 {
        let effect = self.config.treatment_effect[action.iv_bin()][action.vp_bin()];
        x + self.config.severity_drift + effect * Self::response(x)
    }

    pub fn death_probability(&self, x: f64) -> f64 {
        sigmoid(self.config.mortality_slope * x + self.config.mortality_intercept)
    }

    fn emit(&self, x: f64, rng: &mut ChaCha8Rng) -> Observation {
        let mut v = Vec::with_capacity(2 + AUX_EMISSION.len());
        v.push((2.0 * x).round().clamp(0.0, 24.0));
        let lactate = softplus(x) + LACTATE_NOISE * rng.sample::<f64, _>(StandardNormal);
        v.push(lactate.max(LACTATE_FLOOR));
        for (base, slope, noise) in AUX_EMISSION {
            v.push(base + slope * x + noise * rng.sample::<f64, _>(StandardNormal));
        }
        Observation(v)
    }

    fn transition(&self, x: f64, action: Action, rng: &mut ChaCha8Rng) -> f64 {
        let noise = self.config.noise_std * rng.sample::<f64, _>(StandardNormal);
        (self.mean_transition(x, action) + noise).clamp(0.0, SEVERITY_MAX)
    }

    fn sample_doses(&self, action: Action, rng: &mut ChaCha8Rng) -> Doses {
        let mut draw = |bin: usize, edges: [f64; 3]| {
            let u: f64 = rng.random();
            let (lo, hi) = match bin {
                0 => return 0.0,
                4 => (edges[2], 2.0 * edges[2]),
                k => (if k == 1 { 0.0 } else { edges[k - 2] }, edges[k - 1]),
            };
            // (lo, hi]
            hi - (hi - lo) * u
        };
        let iv = draw(action.iv_bin(), IV_EDGES);
        let vp = draw(action.vp_bin(), VP_EDGES);
        Doses { iv, vp }
    }

    fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    /// Simulates `n` episodes under `policy`; episode `i` uses stream `i` of
    /// `seed`. Policy queries are batched across live episodes.
    pub fn simulate(
        &self,
        policy: &dyn StochasticPolicy,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Trajectory>> {
        if policy.n_actions() != N_ACTIONS {
            return Err(Error::Shape("policy must act on the 25-action grid".into()));
        }
        let lo = self.config.max_horizon.div_ceil(2);
        let hi = self.config.max_horizon;
        let mut live: Vec<Episode> = (0..n)
            .map(|i| {
                let mut rng = Self::rng_for(seed, i as u64);
                let horizon = rng.random_range(lo..=hi);
                let z: f64 = rng.sample(StandardNormal);
                let x = (PRIOR_MEAN + PRIOR_STD * z).clamp(PRIOR_RANGE.0, PRIOR_RANGE.1);
                let obs = self.emit(x, &mut rng);
                Episode {
                    rng,
                    horizon,
                    x,
                    buffer: EpisodeBuffer::new(obs),
                    steps: Vec::with_capacity(horizon),
                    survived: None,
                }
            })
            .collect();

        for t in 0..hi {
            let active: Vec<usize> = (0..n).filter(|&i| live[i].horizon > t).collect();
            if active.is_empty() {
                break;
            }
            let points: Vec<DecisionPoint> = active
                .iter()
                .map(|&i| DecisionPoint::from_buffer(&live[i].buffer, &self.schema))
                .collect();
            let refs: Vec<&DecisionPoint> = points.iter().collect();
            let probas = policy.action_proba_batch(&refs)?;
            for (&i, proba) in active.iter().zip(probas) {
                self.advance(&mut live[i], &proba, t)?;
            }
        }

        Ok(live
            .into_iter()
            .enumerate()
            .map(|(i, ep)| Trajectory {
                patient_id: format!("p{i:06}"),
                steps: ep.steps,
                survived: ep.survived,
            })
            .collect())
    }

    fn advance(&self, ep: &mut Episode, proba: &[f64], t: usize) -> Result<()> {
        let u: f64 = ep.rng.random();
        let action = Action::from_flat(sample_index(proba, u))?;
        let doses = self.sample_doses(action, &mut ep.rng);
        let next_x = self.transition(ep.x, action, &mut ep.rng);
        let obs = ep.buffer.current().clone();
        let reward_params = &self.config.reward;
        if t + 1 < ep.horizon {
            let next_obs = self.emit(next_x, &mut ep.rng);
            let reward = transition_reward(&self.schema, &obs, &next_obs, reward_params)?;
            ep.steps.push(Step { obs, doses, action, reward, terminal: false });
            ep.buffer.push(action, next_obs);
        } else {
            let death: f64 = ep.rng.random();
            let survived = death >= self.death_probability(next_x);
            ep.survived = Some(survived);
            ep.steps.push(Step {
                obs,
                doses,
                action,
                reward: terminal_reward(survived, reward_params),
                terminal: true,
            });
        }
        ep.x = next_x;
        Ok(())
    }
}

struct Episode {
    rng: ChaCha8Rng,
    horizon: usize,
    x: f64,
    buffer: EpisodeBuffer,
    steps: Vec<Step>,
    survived: Option<bool>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Generates `config.n_patients` clinician-treated patients.
pub fn generate_cohort(config: &SynthConfig) -> Result<(Vec<Trajectory>, GroundTruth)> {
    let truth = GroundTruth::new(config.clone())?;
    let clinician = truth.clinician();
    let cohort = truth.simulate(&clinician, config.n_patients, config.seed)?;
    Ok((cohort, truth))
}

/// Monte-Carlo value of `policy` in the true MDP: mean and standard error of
/// discounted returns over `n_rollouts` fresh episodes. `gamma = 0` scores
/// the first reward only.
pub fn true_policy_value(
    truth: &GroundTruth,
    policy: &dyn StochasticPolicy,
    n_rollouts: usize,
    gamma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_rollouts < 1 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let episodes = truth.simulate(policy, n_rollouts, seed)?;
    let returns: Vec<f64> = episodes
        .iter()
        .map(|e| discounted_return(e.rewards(), gamma))
        .collect();
    Ok(mean_and_standard_error(&returns))
}

pub(crate) fn mean_and_standard_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// The clinician of the synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicianPolicy {
    sofa_index: usize,
    temperature: f64,
}

impl ClinicianPolicy {
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Unnormalized preference of each action at an observed SOFA.
    pub fn scores(sofa: f64) -> [f64; N_ACTIONS] {
        let (ti, tv) = if sofa <= CLINICIAN_LOW_MAX {
            CLINICIAN_TARGETS[0]
        } else if sofa >= CLINICIAN_HIGH_MIN {
            CLINICIAN_TARGETS[2]
        } else {
            CLINICIAN_TARGETS[1]
        };
        let mut s = [0.0; N_ACTIONS];
        for (a, v) in s.iter_mut().enumerate() {
            let (iv, vp) = ((a / N_BINS) as f64, (a % N_BINS) as f64);
            *v = -((iv - ti).powi(2) + (vp - tv).powi(2));
        }
        s
    }

    pub fn proba_for_state(&self, state: &[f64]) -> Vec<f64> {
        let scores = Self::scores(state[self.sofa_index]);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = scores.iter().map(|s| ((s - max) / self.temperature).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }
}

impl StochasticPolicy for ClinicianPolicy {
    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        Ok(self.proba_for_state(&point.state))
    }
}

/// Ground-truth clinician action distribution at a stacked state.
pub fn clinician_action_proba(truth: &GroundTruth, state: &StateVector) -> Vec<f64> {
    truth.clinician().proba_for_state(&state.0)
}
