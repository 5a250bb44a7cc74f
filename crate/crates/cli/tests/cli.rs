use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn medm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medm"))
        .current_dir(dir)
        .env("MEDM_LOG_LEVEL", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SPEC: &str = r#"
kind = "blobs"
num_classes = 3
samples_per_domain = 150
target_class_proportions = [0.5, 0.3, 0.2]
shift = [1.0, 0.5]
rotation_deg = 20.0
noise_sigma = 0.6
seed = 3
"#;

const CONFIG: &str = r#"
dataset = "data/blobs.csv"
[network]
hidden_dim = 16
feature_dim = 8
[hyper]
lr = 0.005
epochs = 3
dropout_rate = 0.0
seed = 1
[grid]
lambdas = [0.1, 0.5]
betas = [0.0, 0.4, 0.8]
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blobs.toml"), SPEC).unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    let o = medm(dir.path(), &["gen", "--spec", "blobs.toml", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn gen_writes_csv_and_truth_deterministically() {
    let dir = workspace();
    let csv = fs::read(dir.path().join("data/blobs.csv")).unwrap();
    let truth = fs::read(dir.path().join("data/blobs.truth.csv")).unwrap();
    let o = medm(dir.path(), &["gen", "--spec", "blobs.toml", "--out", "again"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("again/blobs.csv")).unwrap(), csv);
    assert_eq!(fs::read(dir.path().join("again/blobs.truth.csv")).unwrap(), truth);
}

#[test]
fn gen_with_missing_spec_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = medm(dir.path(), &["gen", "--spec", "nope.toml", "--out", "data"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn negative_weights_are_rejected() {
    let dir = workspace();
    for args in [["--lambda", "-1", "--beta", "0"], ["--lambda", "1", "--beta", "-0.5"]] {
        let mut a = vec!["train", "--config", "exp.toml"];
        a.extend(args);
        assert_eq!(code(&medm(dir.path(), &a)), 2);
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&medm(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn train_eval_and_report_both_series() {
    let dir = workspace();
    for (out, lambda, beta) in [("emo", "1.0", "0"), ("medm", "1.0", "0.4"), ("plain", "0", "0")] {
        let o = medm(
            dir.path(),
            &["train", "--config", "exp.toml", "--lambda", lambda, "--beta", beta, "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(out).join("checkpoint.json").exists());
        let log = fs::read_to_string(dir.path().join(out).join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
    }
    let o = medm(
        dir.path(),
        &[
            "report",
            "--config",
            "exp.toml",
            "--checkpoint",
            "emo/checkpoint.json",
            "--checkpoint",
            "medm/checkpoint.json",
            "--out",
            "rep",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bars = fs::read_to_string(dir.path().join("rep/qhat_bar.csv")).unwrap();
    assert!(bars.contains("lambda=1.0 beta=0.0"));
    assert!(bars.contains("lambda=1.0 beta=0.4"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rep/summary.json")).unwrap()).unwrap();
    let r = &summary["reports"][0]["report"];
    for key in [
        "overall_accuracy",
        "per_class_accuracy",
        "mean_class_accuracy",
        "inferred_q_star",
        "inferred_entropy",
        "max_class_share",
        "expected_batch_diversity",
    ] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn eval_without_truth_sidecar_fails() {
    let dir = workspace();
    let o = medm(dir.path(), &["train", "--config", "exp.toml", "--lambda", "0", "--beta", "0", "--out", "m"]);
    assert_eq!(code(&o), 0);
    fs::remove_file(dir.path().join("data/blobs.truth.csv")).unwrap();
    let o = medm(dir.path(), &["eval", "--config", "exp.toml", "--checkpoint", "m/checkpoint.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("target truth required"));
}

#[test]
fn mismatched_checkpoint_names_the_tensor() {
    let dir = workspace();
    let o = medm(dir.path(), &["train", "--config", "exp.toml", "--lambda", "0", "--beta", "0", "--out", "m"]);
    assert_eq!(code(&o), 0);
    let path = dir.path().join("m/checkpoint.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["tensors"]["f.b2"]["shape"] = serde_json::json!([7]);
    fs::write(&path, v.to_string()).unwrap();
    let o = medm(dir.path(), &["eval", "--config", "exp.toml", "--checkpoint", "m/checkpoint.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("f.b2"));
}

#[test]
fn sweep_is_worker_independent_resumable_and_evaluable() {
    let dir = workspace();
    let run = |out: &str, workers: &str, extra: &[&str]| {
        let mut a = vec!["sweep", "--config", "exp.toml", "--out", out, "--workers", workers];
        a.extend(extra);
        let o = medm(dir.path(), &a);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join(out).join("manifest.json")).unwrap()
    };
    let one = run("s1", "1", &[]);
    let four = run("s4", "4", &[]);
    assert_eq!(one, four);
    let m: serde_json::Value = serde_json::from_str(&one).unwrap();
    assert!(m["phase1"].as_array().unwrap().len() <= 2);
    assert_eq!(m["phase2"].as_array().unwrap().len(), 3);

    // a resumed run reuses the stored records instead of training again
    let stamp = |p: &Path| fs::metadata(p).unwrap().modified().unwrap();
    let ck = dir.path().join("s1").join(m["selected_checkpoint"].as_str().unwrap());
    let before = stamp(&ck);
    assert_eq!(run("s1", "2", &["--resume"]), one);
    assert_eq!(stamp(&ck), before);

    let o = medm(
        dir.path(),
        &["eval", "--config", "exp.toml", "--checkpoint", ck.to_str().unwrap(), "--out", "ev"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("ev/summary.json").exists());

    let o = medm(dir.path(), &["report", "--config", "exp.toml", "--manifest", "s1/manifest.json", "--out", "rp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("rp/lambda_table.csv")).unwrap();
    assert!(table.lines().count() >= 4);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = workspace();
    let train = |out: &str, seed: &str| {
        let o = medm(
            dir.path(),
            &["train", "--config", "exp.toml", "--lambda", "0.5", "--beta", "0.2", "--out", out, "--seed", seed],
        );
        assert_eq!(code(&o), 0);
        fs::read(dir.path().join(out).join("checkpoint.json")).unwrap()
    };
    assert_eq!(train("a", "7"), train("b", "7"));
    assert_ne!(train("a", "7"), train("c", "8"));
}
