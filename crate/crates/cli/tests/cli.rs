//! End-to-end behavior of the `sepsis-mbrl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use sepsis_mbrl::data::FeatureSchema;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sepsis-mbrl"))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Small, fast pipeline configuration writing into `out`, with `extra`
/// merged over it.
fn small_config(dir: &Path, out: &Path, extra: Value) -> PathBuf {
    let mut config = json!({
        "paths": {"out": out},
        "synth": {"n_patients": 100},
        "dynamics": {"mlp": {"epochs": 4}},
        "behavior": {"epochs": 3},
        "policy": {"iterations": 2, "rollouts_per_iteration": 16},
        "evaluate": {"ope": {"k": 20, "forest": {"n_trees": 4}}}
    });
    merge(&mut config, extra);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn synth_is_reproducible_and_has_distinct_patients() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = small_config(dir.path(), &a, json!({}));
    ok(run(&cfg, &["synth"]));
    ok(run(&cfg, &["synth", "--out", b.to_str().unwrap()]));
    for name in ["cohort.csv", "ground_truth.json", "schema.json", "action_bins.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let mut reader = csv::Reader::from_path(a.join("cohort.csv")).unwrap();
    let ids: std::collections::BTreeSet<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(ids.len(), 100);
}

#[test]
fn seed_flag_changes_the_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = small_config(dir.path(), &a, json!({}));
    ok(run(&cfg, &["synth"]));
    ok(run(&cfg, &["synth", "--seed", "7", "--out", b.to_str().unwrap()]));
    assert_ne!(fs::read(a.join("cohort.csv")).unwrap(), fs::read(b.join("cohort.csv")).unwrap());
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"synth": {"n_patiens": 10}}"#).unwrap();
    let out = run(&cfg, &["synth", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_patiens"), "{}", stderr(&out));
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("o"), json!({"gamma": 1.5}));
    let out = run(&cfg, &["synth"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_upstream_exits_3_and_lists_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(dir.path(), &out_dir, json!({}));
    let out = run(&cfg, &["fit-dynamics"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("cohort.csv"), "{}", stderr(&out));
    ok(run(&cfg, &["synth"]));
    let out = run(&cfg, &["train-policy"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("dynamics.json") && stderr(&out).contains("behavior.json"));
}

#[test]
fn rerun_is_up_to_date_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("o"), json!({}));
    assert!(ok(run(&cfg, &["synth"])).contains("wrote"));
    assert!(ok(run(&cfg, &["synth"])).contains("up-to-date"));
    assert!(ok(run(&cfg, &["synth", "--force"])).contains("wrote"));
}

#[test]
fn changed_config_refuses_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(dir.path(), &out_dir, json!({}));
    ok(run(&cfg, &["synth"]));
    let out = run(&cfg, &["fit-dynamics", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    ok(run(&cfg, &["fit-dynamics", "--seed", "9", "--force"]));
}

#[test]
fn metrics_have_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(dir.path(), &out_dir, json!({}));
    ok(run(&cfg, &["synth"]));
    ok(run(&cfg, &["fit-dynamics"]));
    ok(run(&cfg, &["fit-behavior"]));
    ok(run(&cfg, &["train-policy"]));
    assert_eq!(data_lines(&out_dir.join("dynamics_metrics.csv")), 4);
    assert_eq!(data_lines(&out_dir.join("behavior_metrics.csv")), 3);
    assert_eq!(data_lines(&out_dir.join("policy_metrics.csv")), 2);
}

#[test]
fn corrupted_model_exits_4_with_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(dir.path(), &out_dir, json!({"dynamics": {"model": "linear"}}));
    ok(run(&cfg, &["synth"]));
    ok(run(&cfg, &["fit-dynamics"]));
    let path = out_dir.join("dynamics.json");
    let text = fs::read_to_string(&path).unwrap();
    let pos = text.find("\"weights\"").unwrap();
    let digit = pos + text[pos..].find(|c: char| c.is_ascii_digit() && c != '0').unwrap();
    let mut bytes = text.into_bytes();
    bytes[digit] = if bytes[digit] == b'9' { b'8' } else { bytes[digit] + 1 };
    fs::write(&path, bytes).unwrap();
    let out = run(&cfg, &["rollout-export"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn evaluate_writes_five_blend_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(dir.path(), &out_dir, json!({}));
    for stage in ["synth", "fit-dynamics", "fit-behavior", "train-policy", "evaluate"] {
        ok(run(&cfg, &[stage]));
    }
    let table = fs::read_to_string(out_dir.join("evaluation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[2].starts_with("clinician/learned/clinician,"));
    assert!(rows[4].starts_with("clinician/clinician/clinician,"));
    assert_eq!(data_lines(&out_dir.join("evaluation_estimators.csv")), 15);
}

#[test]
fn lock_file_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".lock"), "").unwrap();
    let cfg = small_config(dir.path(), &out_dir, json!({}));
    let out = run(&cfg, &["synth"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn rollout_export_is_deterministic_and_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = small_config(
        dir.path(),
        &out_dir,
        json!({"dynamics": {"model": "linear"}, "rollout_export": {"n_trajectories": 8, "horizon": 500}}),
    );
    ok(run(&cfg, &["synth"]));
    ok(run(&cfg, &["fit-dynamics"]));
    ok(run(&cfg, &["rollout-export"]));
    let first = fs::read(out_dir.join("rollouts.csv")).unwrap();
    ok(run(&cfg, &["rollout-export", "--force"]));
    assert_eq!(first, fs::read(out_dir.join("rollouts.csv")).unwrap());

    let cohort = fs::read_to_string(out_dir.join("cohort.csv")).unwrap();
    let mut lengths = std::collections::BTreeMap::<String, usize>::new();
    for line in cohort.lines().skip(1) {
        *lengths.entry(line.split(',').next().unwrap().to_string()).or_default() += 1;
    }
    let mut per_patient = std::collections::BTreeMap::<String, usize>::new();
    for line in String::from_utf8(first).unwrap().lines().skip(1) {
        *per_patient.entry(line.split(',').next().unwrap().to_string()).or_default() += 1;
    }
    assert_eq!(per_patient.len(), 8);
    for (pid, rows) in per_patient {
        assert_eq!(rows, lengths[&pid], "{pid}: one row per logged observation, no padding");
    }
}

/// Writes a noiseless cohort whose next observation is an affine function
/// of the current one.
fn write_linear_cohort(path: &Path, schema: &FeatureSchema) {
    let d = schema.d_raw();
    let sofa = schema.sofa_index();
    let lactate = schema.lactate_index();
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend(schema.names().iter().cloned());
    header.extend(["iv_dose", "vp_dose", "reward", "terminal", "survived"].map(String::from));
    w.write_record(&header).unwrap();
    for p in 0..60usize {
        let len = 3 + p % 9;
        let mut obs: Vec<f64> = (0..d).map(|j| 20.0 + ((p * 7 + j * 3) % 11) as f64).collect();
        obs[sofa] = 2.0 + (p % 17) as f64;
        obs[lactate] = 0.5 + (p % 5) as f64;
        for t in 0..len {
            let mut rec = vec![format!("p{p:03}"), t.to_string()];
            rec.extend(obs.iter().map(|v| v.to_string()));
            rec.push((((p + t) % 5) * 100).to_string());
            rec.push(((((p * 3 + t) % 4) as f64) * 0.1).to_string());
            rec.push("0".into());
            rec.push(if t + 1 == len { "1" } else { "0" }.into());
            rec.push("1".into());
            w.write_record(&rec).unwrap();
            for (j, v) in obs.iter_mut().enumerate() {
                let target = if j == sofa { 10.0 } else if j == lactate { 2.0 } else { 25.0 };
                *v = 0.8 * *v + 0.2 * target;
            }
        }
    }
    w.flush().unwrap();
}

#[test]
fn exact_linear_model_reproduces_a_linear_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let schema = FeatureSchema::synthetic();
    let input = dir.path().join("linear.csv");
    write_linear_cohort(&input, &schema);
    let extra = json!({
        "paths": {"input": input},
        "dynamics": {"model": "linear", "ridge_lambda": 0.0},
        "rollout_export": {"n_trajectories": 6}
    });
    let cfg = small_config(dir.path(), &out_dir, extra);
    ok(run(&cfg, &["ingest"]));
    ok(run(&cfg, &["fit-dynamics"]));
    ok(run(&cfg, &["rollout-export"]));
    let mut reader = csv::Reader::from_path(out_dir.join("rollouts.csv")).unwrap();
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let pred: f64 = rec[2].parse().unwrap();
        let actual: f64 = rec[3].parse().unwrap();
        assert!((pred - actual).abs() <= 1e-6, "{rec:?}");
        n += 1;
    }
    assert!(n > 6);
    assert!(out_dir.join("rollouts").read_dir().unwrap().count() == 6);
}
