//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sepsis_mbrl::behavior::{bc_evaluate, bc_fit, BcConfig, BcDataset, PolicyNet};
use sepsis_mbrl::data::{history_dim, split_cohort, FeatureSchema, Observation, Standardizer, Step, Trajectory, N_ACTIONS};
use sepsis_mbrl::data::{Action, Doses};
use sepsis_mbrl::dynamics::{fit_linear_env, fit_mlp_env, MlpDynamics, MlpTrainConfig, TransitionSet};
use sepsis_mbrl::nn::Parameterized;
use sepsis_mbrl::ope::{
    am, fqi_fit, is_ratios, phwdr, phwis, stepwise_wis, ForestConfig, OpeData, OpeEpisode, PolicyTable, ZeroQ,
};
use sepsis_mbrl::policy::{BlendSpec, BlendedPolicy, DecisionPoint, StochasticPolicy};
use sepsis_mbrl::policy_opt::{train_policy, PolicyOptConfig};
use sepsis_mbrl::reward::{behavior_value, intermediate_reward, terminal_reward, RewardParams};
use sepsis_mbrl::synth::{generate_cohort, true_policy_value, GroundTruth, SynthConfig};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth.abs()
}

// ---------------------------------------------------------------------------
// 1. reward exactness

fn c1_reward_table() -> Outcome {
    let p = RewardParams::default();
    let (c0, c1, c2) = (-0.025, -0.125, -2.0);
    // (sofa_t, sofa_t1, lactate_t, lactate_t1, expected)
    let cases = [
        (5.0, 5.0, 2.0, 2.0, -0.025),
        (0.0, 0.0, 1.0, 1.0, 0.0),
        (6.0, 4.0, 3.0, 3.0, 0.25),
        (3.0, 7.0, 1.0, 1.0, -0.5),
        (0.0, 24.0, 0.0, 0.0, -3.0),
        (24.0, 0.0, 0.0, 0.0, 3.0),
        (0.0, 0.0, 1.0, 2.0, c2 * 1f64.tanh()),
        (10.0, 10.0, 4.0, 2.5, c0 + c2 * (-1.5f64).tanh()),
        (12.0, 11.0, 0.5, 0.75, -c1 + c2 * 0.25f64.tanh()),
        (1.0, 3.0, 6.0, 0.0, 2.0 * c1 + c2 * (-6f64).tanh()),
        (8.0, 8.0, 0.0, 30.0, c0 + c2 * 30f64.tanh()),
        (0.0, 1.0, 2.0, 2.0, c1),
    ];
    let mut worst: f64 = 0.0;
    for (s0, s1, l0, l1, want) in cases {
        let got = intermediate_reward(s0, s1, l0, l1, &p).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    let terminal_ok = terminal_reward(true, &p) == 15.0 && terminal_reward(false, &p) == -15.0;
    check(
        worst <= 1e-12 && terminal_ok,
        format!("{} cases, max abs error {worst:.1e}, terminal ±15 exact: {terminal_ok}", cases.len()),
    )
}

// ---------------------------------------------------------------------------
// 2. gradient correctness

fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn c2_gradients() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut classes = std::collections::BTreeSet::new();
    let mut checked = 0usize;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = MlpDynamics::new(5, [6, 4], 3, &mut rng);
        let x = random_matrix(&mut rng, 8, 5);
        let y = random_matrix(&mut rng, 8, 3);
        let (out, cache) = m.forward_train(&x).map_err(|e| e.to_string())?;
        let (_, grads) = m.backward(&cache, &out, &y).map_err(|e| e.to_string())?;
        let names = m.param_names();
        for (b, block) in grads.iter().enumerate() {
            classes.insert(format!("dynamics:{}", names[b]));
            for (k, &g) in block.iter().enumerate() {
                let mut plus = m.clone();
                plus.param_slices_mut()[b][k] += h;
                let mut minus = m.clone();
                minus.param_slices_mut()[b][k] -= h;
                let fd = (plus.train_loss(&x, &y).unwrap() - minus.train_loss(&x, &y).unwrap()) / (2.0 * h);
                worst = worst.max(relative_gap(g, fd));
                checked += 1;
            }
        }

        let d = 3;
        let net = PolicyNet::new(Standardizer::identity(d), [5, 4], 1e-2, &mut rng);
        let x = random_matrix(&mut rng, 7, history_dim(d));
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..N_ACTIONS)).collect();
        let (_, grads) = net.loss_and_grad(&x, &labels).map_err(|e| e.to_string())?;
        let names = net.param_names();
        for (b, block) in grads.iter().enumerate() {
            classes.insert(format!("policy:{}", names[b]));
            for (k, &g) in block.iter().enumerate() {
                let mut plus = net.clone();
                plus.param_slices_mut()[b][k] += h;
                let mut minus = net.clone();
                minus.param_slices_mut()[b][k] -= h;
                let fd = (plus.loss(&x, &labels).unwrap() - minus.loss(&x, &labels).unwrap()) / (2.0 * h);
                worst = worst.max(relative_gap(g, fd));
                checked += 1;
            }
        }
    }
    check(
        worst <= 1e-4,
        format!("5 seeds, {} parameter blocks, {checked} entries, max relative error {worst:.2e}", classes.len()),
    )
}

// ---------------------------------------------------------------------------
// 3. dynamics model ordering

fn small_schema() -> FeatureSchema {
    FeatureSchema::new(vec!["sofa".into(), "lactate".into(), "hr".into()], 0, 1).unwrap()
}

/// One-transition trajectories `obs -> next(obs)` with a random action.
fn one_step_cohort(n: usize, seed: u64, next: impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let obs = vec![rng.random_range(6.0..18.0), rng.random_range(1.0..3.0), rng.random_range(60.0..120.0)];
            let after = next(&obs, &mut rng);
            let action = Action::from_flat(rng.random_range(0..N_ACTIONS)).unwrap();
            let second = Action::from_flat(rng.random_range(0..N_ACTIONS)).unwrap();
            let doses = Doses { iv: 0.0, vp: 0.0 };
            Trajectory {
                patient_id: format!("q{i:05}"),
                steps: vec![
                    Step { obs: Observation(obs), doses, action, reward: 0.0, terminal: false },
                    Step { obs: Observation(after), doses, action: second, reward: 0.0, terminal: true },
                ],
                survived: Some(true),
            }
        })
        .collect()
}

fn c3_dynamics_ordering() -> Outcome {
    let schema = small_schema();
    let split = |cohort: &[Trajectory]| {
        let tr = TransitionSet::from_cohort(&cohort[..4000], &schema).unwrap();
        let va = TransitionSet::from_cohort(&cohort[4000..], &schema).unwrap();
        (tr, va)
    };

    let quadratic = one_step_cohort(5000, 31, |o, rng| {
        let z = [(o[0] - 12.0) / 6.0, o[1] - 2.0, (o[2] - 90.0) / 30.0];
        let noise = |rng: &mut ChaCha8Rng| 0.05 * rng.random_range(-1.0..1.0);
        vec![
            o[0] + 2.0 * z[0] * z[0] + z[1] * z[2] + noise(rng),
            o[1] + z[1] * z[1] + 0.5 * z[0] * z[2] + 0.1 * noise(rng),
            o[2] + 10.0 * z[2] * z[2] - 5.0 * z[0] * z[1] + noise(rng),
        ]
    });
    let (tr, va) = split(&quadratic);
    let linear = fit_linear_env(&schema, &tr, 1e-3).map_err(|e| e.to_string())?;
    let cfg = MlpTrainConfig { seed: 3, ..MlpTrainConfig::default() };
    let (mlp, _) = fit_mlp_env(&schema, &tr, &va, &cfg).map_err(|e| e.to_string())?;
    let lin_mse = linear.scaled_mse(&va).map_err(|e| e.to_string())?;
    let mlp_mse = mlp.scaled_mse(&va).map_err(|e| e.to_string())?;

    let affine = one_step_cohort(5000, 32, |o, _| {
        vec![
            0.8 * o[0] + 0.1 * o[1] + 2.0,
            0.9 * o[1] - 0.05 * o[0] + 0.7,
            0.7 * o[2] + 0.2 * o[0] + 25.0,
        ]
    });
    let (tr, va) = split(&affine);
    let exact = fit_linear_env(&schema, &tr, 0.0).map_err(|e| e.to_string())?;
    let exact_mse = exact.scaled_mse(&va).map_err(|e| e.to_string())?;

    check(
        mlp_mse <= 0.9 * lin_mse && exact_mse <= 1e-6,
        format!(
            "quadratic: mlp {mlp_mse:.4} vs linear {lin_mse:.4} (ratio {:.3}); affine: linear {exact_mse:.1e}",
            mlp_mse / lin_mse
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. OPE identities

fn c4_ope_identities() -> Outcome {
    let gamma = 0.99;
    let (cohort, truth) = generate_cohort(&SynthConfig { n_patients: 500, seed: 41, ..SynthConfig::default() })
        .map_err(|e| e.to_string())?;
    let schema = truth.schema.clone();
    let clinician = truth.clinician();
    let data = OpeData::from_cohort(&cohort).map_err(|e| e.to_string())?;
    let behavior = PolicyTable::from_cohort(&clinician, &cohort, &schema).map_err(|e| e.to_string())?;

    let ratios = is_ratios(&data, &behavior, &behavior, 100.0).map_err(|e| e.to_string())?;
    let (estimate, _) = phwis(&data, &ratios, gamma).map_err(|e| e.to_string())?;
    let mean = behavior_value(&cohort, gamma).map_err(|e| e.to_string())?;
    let is_gap = (estimate - mean).abs();

    let other = clinician.with_temperature(0.8);
    let eval = PolicyTable::from_cohort(&other, &cohort, &schema).map_err(|e| e.to_string())?;
    let ratios = is_ratios(&data, &eval, &behavior, 100.0).map_err(|e| e.to_string())?;
    let dr = phwdr(&data, &eval, &ratios, &ZeroQ { n_actions: N_ACTIONS }, gamma)
        .map_err(|e| e.to_string())?
        .0;
    let wis = stepwise_wis(&data, &ratios, gamma).map_err(|e| e.to_string())?;
    let dr_gap = (dr - wis).abs();

    check(
        is_gap <= 1e-9 && dr_gap <= 1e-10,
        format!("|PHWIS - mean return| = {is_gap:.1e}; |PHWDR(Q=0) - stepwise WIS| = {dr_gap:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. OPE accuracy on a tabular MDP

struct Tabular {
    start: [f64; 3],
    /// `transition[s][a][s']`
    transition: [[[f64; 3]; 2]; 3],
    reward: [[f64; 2]; 3],
    stop: f64,
    behavior: [[f64; 2]; 3],
    target: [[f64; 2]; 3],
    gamma: f64,
}

impl Tabular {
    fn new() -> Self {
        Self {
            start: [0.5, 0.3, 0.2],
            transition: [
                [[0.8, 0.2, 0.0], [0.1, 0.6, 0.3]],
                [[0.3, 0.6, 0.1], [0.0, 0.3, 0.7]],
                [[0.5, 0.0, 0.5], [0.2, 0.2, 0.6]],
            ],
            reward: [[1.0, 2.0], [0.5, 3.0], [2.5, 1.0]],
            stop: 0.2,
            behavior: [[0.7, 0.3], [0.5, 0.5], [0.3, 0.7]],
            target: [[0.5, 0.5], [0.35, 0.65], [0.55, 0.45]],
            gamma: 0.9,
        }
    }

    /// Exact value of the target policy by fixed-point iteration.
    fn true_value(&self) -> f64 {
        let mut v = [0.0; 3];
        for _ in 0..2000 {
            v = std::array::from_fn(|s| {
                (0..2)
                    .map(|a| {
                        let future: f64 = (0..3).map(|u| self.transition[s][a][u] * v[u]).sum();
                        self.target[s][a] * (self.reward[s][a] + self.gamma * (1.0 - self.stop) * future)
                    })
                    .sum()
            });
        }
        (0..3).map(|s| self.start[s] * v[s]).sum()
    }

    fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    fn sample(&self, n: usize, seed: u64) -> OpeData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episodes = (0..n)
            .map(|_| {
                let mut s = Self::draw(&self.start, &mut rng);
                let mut ep = OpeEpisode { states: Vec::new(), actions: Vec::new(), rewards: Vec::new() };
                loop {
                    let a = Self::draw(&self.behavior[s], &mut rng);
                    ep.states.push(vec![s as f64]);
                    ep.actions.push(a);
                    ep.rewards.push(self.reward[s][a]);
                    if rng.random::<f64>() < self.stop {
                        break ep;
                    }
                    s = Self::draw(&self.transition[s][a], &mut rng);
                }
            })
            .collect();
        OpeData::new(episodes, 2).unwrap()
    }

    fn table(data: &OpeData, probs: &[[f64; 2]; 3]) -> PolicyTable {
        PolicyTable::from_states(data, |s| Ok(probs[s[0] as usize].to_vec())).unwrap()
    }
}

fn c5_tabular_accuracy() -> Outcome {
    let mdp = Tabular::new();
    let truth = mdp.true_value();
    let forest = ForestConfig { n_trees: 10, ..ForestConfig::default() };
    let mut errors = Vec::new();
    let mut worst = [0.0f64; 3];
    for seed in 0..20u64 {
        let data = mdp.sample(5000, 500 + seed);
        let behavior = Tabular::table(&data, &mdp.behavior);
        let target = Tabular::table(&data, &mdp.target);
        let ratios = is_ratios(&data, &target, &behavior, 100.0).map_err(|e| e.to_string())?;
        let q = fqi_fit(&data, &target, mdp.gamma, None, &forest, seed).map_err(|e| e.to_string())?;
        let is = phwis(&data, &ratios, mdp.gamma).map_err(|e| e.to_string())?.0;
        let dr = phwdr(&data, &target, &ratios, &q, mdp.gamma).map_err(|e| e.to_string())?.0;
        let model = am(&data, &target, &q).map_err(|e| e.to_string())?;
        for (w, v) in worst.iter_mut().zip([is, dr, model]) {
            *w = w.max(rel_err(v, truth));
        }
        errors.push(((is - truth).abs(), (dr - truth).abs()));
    }
    let n = errors.len() as f64;
    let mae_is = errors.iter().map(|e| e.0).sum::<f64>() / n;
    let mae_dr = errors.iter().map(|e| e.1).sum::<f64>() / n;
    let diffs: Vec<f64> = errors.iter().map(|(i, d)| i - d).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    // one-sided 95% quantile of Student's t with 19 degrees of freedom
    let t_crit = 1.729_133;
    check(
        worst.iter().all(|&w| w <= 0.05) && t >= t_crit,
        format!(
            "V = {truth:.4}; worst relative error over 20 seeds PHWIS {:.3} PHWDR {:.3} AM {:.3}; MAE IS {mae_is:.4} DR {mae_dr:.4}, paired t = {t:.2} (need >= {t_crit})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. FQI on a deterministic chain

fn c6_fqi_chain() -> Outcome {
    // states 0 -> 1 -> 2 (terminal); reward 1 on leaving state 2; two actions
    // with identical effects, logged uniformly at random
    let reward = [0.0, 0.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut episodes = Vec::new();
    for start in 0..3usize {
        for _ in 0..40 {
            let states: Vec<Vec<f64>> = (start..3).map(|s| vec![s as f64]).collect();
            let actions = (start..3).map(|_| rng.random_range(0..2)).collect();
            let rewards = (start..3).map(|s| reward[s]).collect();
            episodes.push(OpeEpisode { states, actions, rewards });
        }
    }
    let data = OpeData::new(episodes, 2).unwrap();
    let target = PolicyTable::from_states(&data, |_| Ok(vec![1.0, 0.0])).unwrap();
    let q = fqi_fit(&data, &target, 1.0, None, &ForestConfig::default(), 6).map_err(|e| e.to_string())?;
    // backward dynamic programming with gamma = 1
    let mut exact = [[0.0; 2]; 3];
    for s in (0..3).rev() {
        let future = if s + 1 < 3 { exact[s + 1][0] } else { 0.0 };
        exact[s] = [reward[s] + future; 2];
    }
    let mut worst: f64 = 0.0;
    for (s, row) in exact.iter().enumerate() {
        for (a, &v) in row.iter().enumerate() {
            worst = worst.max((q.predict(&[s as f64], a) - v).abs());
        }
    }
    check(worst <= 0.05, format!("max |Q - Q_dp| = {worst:.2e} over 6 state-action pairs"))
}

// ---------------------------------------------------------------------------
// 7. policy improvement in the true simulator

fn c7_policy_improvement() -> Outcome {
    let schema = FeatureSchema::synthetic();
    let mut lines = Vec::new();
    let mut wins = 0;
    let mut clinician_value = None;
    for seed in 0..3u64 {
        let (cohort, truth) = generate_cohort(&SynthConfig { seed, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
        let (train, val, _) = split_cohort(&cohort, (0.7, 0.15, 0.15), seed).map_err(|e| e.to_string())?;
        let tr = TransitionSet::from_cohort(&train, &schema).map_err(|e| e.to_string())?;
        let va = TransitionSet::from_cohort(&val, &schema).map_err(|e| e.to_string())?;
        let mlp = MlpTrainConfig { epochs: 30, seed: seed + 1, ..MlpTrainConfig::default() };
        let (env, _) = fit_mlp_env(&schema, &tr, &va, &mlp).map_err(|e| e.to_string())?;
        let btr = BcDataset::from_cohort(&train, &schema).map_err(|e| e.to_string())?;
        let bva = BcDataset::from_cohort(&val, &schema).map_err(|e| e.to_string())?;
        let (bc, _) = bc_fit(&btr, &bva, schema.d_raw(), &BcConfig { seed: seed + 2, ..BcConfig::default() })
            .map_err(|e| e.to_string())?;
        let cfg = PolicyOptConfig { learning_rate: 1e-4, seed: seed + 3, ..PolicyOptConfig::default() };
        let (learned, _) = train_policy(&bc, &env, &train, &cfg).map_err(|e| e.to_string())?;

        let clinician_part: Arc<dyn StochasticPolicy> = Arc::new(bc);
        let blend = BlendedPolicy::new(clinician_part, Arc::new(learned), BlendSpec::default()).map_err(|e| e.to_string())?;
        let (v_blend, se_blend) = true_policy_value(&truth, &blend, 10_000, 0.99, 700).map_err(|e| e.to_string())?;
        let (v_clin, se_clin) = match clinician_value {
            Some(v) => v,
            None => {
                let v = true_policy_value(&truth, &truth.clinician(), 10_000, 0.99, 700).map_err(|e| e.to_string())?;
                clinician_value = Some(v);
                v
            }
        };
        if v_blend > v_clin {
            wins += 1;
        }
        lines.push(format!("seed {seed}: blend {v_blend:.3}±{se_blend:.3} vs clinician {v_clin:.3}±{se_clin:.3}"));
    }
    check(wins == 3, format!("{wins}/3 seeds improve; {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 8 and 9. pipeline runs

fn pipeline_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let config = json!({
        "seed": 5,
        "paths": {"out": out},
        "synth": {"n_patients": 2000},
        "dynamics": {"mlp": {"epochs": 5}},
        "behavior": {"epochs": 10},
        "policy": {"iterations": 5, "rollouts_per_iteration": 64, "learning_rate": 1e-4},
        "evaluate": {"ope": {"forest": {"n_trees": 10}}, "behavior": "ground_truth", "clinician": "ground_truth"},
        "rollout_export": {"n_trajectories": 5}
    });
    let path = dir.join(format!("{}.json", out.file_name().unwrap().to_string_lossy()));
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

const STAGES: [&str; 6] = ["synth", "fit-dynamics", "fit-behavior", "train-policy", "evaluate", "rollout-export"];

fn run_pipeline(config: &Path) -> Result<(), String> {
    for stage in STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_sepsis-mbrl"))
            .arg("--config")
            .arg(config)
            .arg(stage)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{stage} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn c8_blend_rows(run: &Path) -> Outcome {
    let text = fs::read_to_string(run.join("evaluation.csv")).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let labels: Vec<String> = rows.iter().map(|r| r[0].to_string()).collect();
    let expected: Vec<String> = BlendSpec::table_rows(5, 15).iter().map(|b| b.label()).collect();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("evaluation.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mean = report["payload"]["held_out_mean_return"].as_f64().ok_or("missing held-out mean")?;
    let ccc = rows
        .iter()
        .find(|r| &r[0] == "clinician/clinician/clinician")
        .ok_or("no all-clinician row")?;
    let phwis: f64 = ccc[4].parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    let gap = rel_err(phwis, mean);
    check(
        labels == expected && gap <= 0.02,
        format!("rows {labels:?}; all-clinician PHWIS {phwis:.4} vs held-out mean {mean:.4} (relative gap {gap:.4})"),
    )
}

fn c9_determinism(a: &Path, b: &Path) -> Outcome {
    let mut files = vec![
        "manifest.json".to_string(),
        "dynamics_metrics.csv".into(),
        "behavior_metrics.csv".into(),
        "policy_metrics.csv".into(),
        "evaluation.csv".into(),
        "evaluation_estimators.csv".into(),
        "rollouts.csv".into(),
    ];
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    for stage in manifest["stages"].as_object().ok_or("manifest has no stages")?.values() {
        files.extend(stage["outputs"].as_object().unwrap().keys().cloned());
    }
    files.sort();
    files.dedup();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        format!("{} files compared byte for byte; differing: {differing:?}", files.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. behavior cloning

fn transitions(cohort: &[Trajectory], schema: &FeatureSchema, n: usize) -> Result<BcDataset, String> {
    let full = BcDataset::from_cohort(cohort, schema).map_err(|e| e.to_string())?;
    if full.len() < n {
        return Err(format!("cohort has {} transitions, need {n}", full.len()));
    }
    Ok(full.select(&(0..n).collect::<Vec<_>>()))
}

fn decision_points(cohort: &[Trajectory], schema: &FeatureSchema, n: usize) -> Vec<DecisionPoint> {
    cohort
        .iter()
        .flat_map(|t| (0..t.len()).map(move |i| DecisionPoint::from_trajectory(t, i, schema).unwrap()))
        .take(n)
        .collect()
}

fn mean_tv(model: &PolicyNet, truth: &GroundTruth, points: &[DecisionPoint]) -> f64 {
    let clinician = truth.clinician();
    let refs: Vec<&DecisionPoint> = points.iter().collect();
    let fitted = model.action_proba_batch(&refs).unwrap();
    let total: f64 = points
        .iter()
        .zip(&fitted)
        .map(|(p, q)| {
            let exact = clinician.proba_for_state(&p.state);
            0.5 * exact.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    total / points.len() as f64
}

fn c10_behavior_cloning() -> Outcome {
    let schema = FeatureSchema::synthetic();
    let config = SynthConfig { n_patients: 1000, clinician_temperature: 1e-3, seed: 101, ..SynthConfig::default() };
    let truth = GroundTruth::new(config.clone()).map_err(|e| e.to_string())?;
    let cohort = truth.simulate(&truth.clinician(), config.n_patients, config.seed).map_err(|e| e.to_string())?;
    let train = transitions(&cohort, &schema, 5000)?;
    let held_out = truth.simulate(&truth.clinician(), 300, 102).map_err(|e| e.to_string())?;
    let val = BcDataset::from_cohort(&held_out, &schema).map_err(|e| e.to_string())?;
    let cfg = BcConfig { epochs: 50, l2: 1e-2, seed: 103, ..BcConfig::default() };
    let (net, _) = bc_fit(&train, &val, schema.d_raw(), &cfg).map_err(|e| e.to_string())?;
    let (_, accuracy) = bc_evaluate(&net, &val).map_err(|e| e.to_string())?;

    let mut trends = Vec::new();
    let mut monotone = true;
    for seed in 0..3u64 {
        let synth = SynthConfig { n_patients: 2600, seed: 200 + seed, ..SynthConfig::default() };
        let (cohort, truth) = generate_cohort(&synth).map_err(|e| e.to_string())?;
        let held_out = truth.simulate(&truth.clinician(), 400, 300 + seed).map_err(|e| e.to_string())?;
        let val = BcDataset::from_cohort(&held_out[..200], &schema).map_err(|e| e.to_string())?;
        let points = decision_points(&held_out[200..], &schema, 1500);
        let mut tv = Vec::new();
        for n in [1000, 4000, 16000] {
            let train = transitions(&cohort, &schema, n)?;
            let (net, _) = bc_fit(&train, &val, schema.d_raw(), &BcConfig { seed: 400 + seed, ..BcConfig::default() })
                .map_err(|e| e.to_string())?;
            tv.push(mean_tv(&net, &truth, &points));
        }
        monotone &= tv[0] > tv[1] && tv[1] > tv[2];
        trends.push(format!("seed {seed}: {:.3} > {:.3} > {:.3}", tv[0], tv[1], tv[2]));
    }
    check(
        accuracy >= 0.95 && monotone,
        format!("deterministic clinician accuracy {accuracy:.4}; TV at 1k/4k/16k {}", trends.join("; ")),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("temporary directory");
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    let pipelines = run_pipeline(&pipeline_config(dir.path(), &run_a))
        .and_then(|_| run_pipeline(&pipeline_config(dir.path(), &run_b)));

    let criteria: Vec<Criterion> = vec![
        ("C1 reward exactness", Box::new(c1_reward_table)),
        ("C2 gradient correctness", Box::new(c2_gradients)),
        ("C3 dynamics model ordering", Box::new(c3_dynamics_ordering)),
        ("C4 OPE identities", Box::new(c4_ope_identities)),
        ("C5 OPE oracle accuracy", Box::new(c5_tabular_accuracy)),
        ("C6 FQI chain", Box::new(c6_fqi_chain)),
        ("C7 policy improvement", Box::new(c7_policy_improvement)),
        (
            "C8 blend-row report",
            Box::new(|| pipelines.clone().and_then(|_| c8_blend_rows(&run_a))),
        ),
        (
            "C9 determinism",
            Box::new(|| pipelines.clone().and_then(|_| c9_determinism(&run_a, &run_b))),
        ),
        ("C10 behavior cloning", Box::new(c10_behavior_cloning)),
    ];
    let mut failed = 0;
    for (name, criterion) in &criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(criterion))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
