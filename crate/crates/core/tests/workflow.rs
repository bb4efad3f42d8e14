//! Cross-module workflows on a small synthetic cohort.

use sepsis_mbrl::data::{read_cohort_csv, split_cohort, write_cohort_csv};
use sepsis_mbrl::dynamics::{fit_linear_env, EnvModel, TransitionSet};
use sepsis_mbrl::model_io::{load_model, save_model, ArtifactMeta};
use sepsis_mbrl::ope::{evaluate_policy, BehaviorModel, OpeConfig};
use sepsis_mbrl::reward::{behavior_value, recompute_rewards};
use sepsis_mbrl::synth::{generate_cohort, SynthConfig};
use sepsis_mbrl::Error;

fn cohort() -> (Vec<sepsis_mbrl::data::Trajectory>, sepsis_mbrl::synth::GroundTruth) {
    generate_cohort(&SynthConfig { n_patients: 120, seed: 17, ..SynthConfig::default() }).unwrap()
}

#[test]
fn cohort_survives_a_csv_round_trip() {
    let (cohort, truth) = cohort();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.csv");
    write_cohort_csv(&cohort, &truth.schema, &path).unwrap();
    let back = read_cohort_csv(&path, &truth.schema, &truth.dose_bins).unwrap();
    assert_eq!(back, cohort);
}

#[test]
fn synthetic_rewards_match_recomputation() {
    let (cohort, truth) = cohort();
    for traj in &cohort {
        let mut again = traj.clone();
        recompute_rewards(&mut again, &truth.schema, &truth.config.reward).unwrap();
        assert_eq!(&again, traj);
    }
}

#[test]
fn saved_environment_model_predicts_identically() {
    let (cohort, truth) = cohort();
    let (train, val, _) = split_cohort(&cohort, (0.7, 0.15, 0.15), 1).unwrap();
    let tr = TransitionSet::from_cohort(&train, &truth.schema).unwrap();
    let va = TransitionSet::from_cohort(&val, &truth.schema).unwrap();
    let env = fit_linear_env(&truth.schema, &tr, 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("env.json");
    let meta = ArtifactMeta { config_hash: Some("abc".into()), seed: Some(3) };
    save_model(&path, "dynamics", &env, &meta).unwrap();
    let (loaded, loaded_meta): (EnvModel, _) = load_model(&path, "dynamics").unwrap();
    assert_eq!(loaded_meta, meta);
    assert_eq!(loaded.predict_deltas(&va.histories), env.predict_deltas(&va.histories));
    assert!(matches!(load_model::<EnvModel>(&path, "behavior"), Err(Error::ModelFormat(_))));
}

#[test]
fn exact_behavior_probabilities_recover_the_logged_value() {
    let (cohort, truth) = cohort();
    let clinician = truth.clinician();
    let cfg = OpeConfig { forest: sepsis_mbrl::ope::ForestConfig { n_trees: 5, ..Default::default() }, ..Default::default() };
    let report = evaluate_policy(&cohort, &truth.schema, &clinician, BehaviorModel::Given(&clinician), &cfg).unwrap();
    let mean = behavior_value(&cohort, cfg.gamma).unwrap();
    assert!((report.phwis - mean).abs() <= 1e-9);
    assert_eq!(report.phwis_diagnostics.clip_fraction, 0.0);
    assert_eq!(report.n_episodes, cohort.len());
}
