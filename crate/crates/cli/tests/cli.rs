use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gbsr_core::checkpoint;
use gbsr_core::data::load_dataset;
use gbsr_core::denoiser::DenoiserParams;
use gbsr_core::trainer::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gbsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbsr")).args(args).output().unwrap()
}

fn gbsr_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbsr"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", s(&out), "--users-per-cluster", "25", "--items-per-cluster", "25", "--interaction-rate", "0.2"];
    args.extend_from_slice(extra);
    let res = gbsr(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "train",
        "--interactions",
        s(&data.join("interactions.tsv")),
        "--social",
        s(&data.join("social.tsv")),
        "--out",
        s(out),
        "--dim",
        "8",
        "--epochs",
        "3",
        "--eval-every",
        "1",
        "--lr",
        "0.01",
        "--batch-size",
        "128",
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    if !extra.contains(&"--seed") {
        v.extend(["--seed".to_string(), "0".to_string()]);
    }
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

fn run_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let args = train_args(data, out, extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    gbsr(&refs)
}

fn log_lines(run: &Path, seed: u64) -> Vec<serde_json::Value> {
    fs::read_to_string(run.join(format!("seed-{seed}/train_log.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--seed", "9"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    let again = dir.path().join("again");
    let res = gbsr(&["synth", "--config", s(&data.join("manifest.json")), "--out", s(&again)]);
    assert!(res.status.success());
    for f in ["interactions.tsv", "social.tsv", "noise_labels.tsv", "manifest.json"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_without_noise_labels_everything_genuine() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--eta", "0"]);
    let labels = fs::read_to_string(data.join("noise_labels.tsv")).unwrap();
    assert!(!labels.is_empty());
    assert!(labels.lines().all(|l| l.ends_with("\t0")));
}

#[test]
fn invalid_synth_spec_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let res = gbsr(&["synth", "--out", s(dir.path()), "--eta", "1.5"]);
    assert_eq!(res.status.code(), Some(1));
    let res = gbsr(&["synth", "--out", s(dir.path()), "--clusters", "1"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn train_writes_artifacts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    let res = run_train(&data, &run, &["--beta", "40", "--sigma2", "2.5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["manifest.json", "metrics.json", "seed-0/checkpoint.gbsr", "seed-0/train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = log_lines(&run, 0);
    assert_eq!(log[0]["config"]["beta"], "40");
    assert_eq!(log[0]["config"]["sigma2"], "2.5");
    assert_eq!(log.len(), 4);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["20"]["recall"].is_number());
    assert_eq!(metrics["per_seed"].as_array().unwrap().len(), 1);
    assert!(metrics["users_evaluated"].as_u64().unwrap() > 0);
}

#[test]
fn zero_beta_logs_zero_bottleneck() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    assert!(run_train(&data, &run, &["--beta", "0"]).status.success());
    for rec in &log_lines(&run, 0)[1..] {
        assert_eq!(rec["ib_loss"], 0.0);
    }
}

#[test]
fn manifest_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let first = dir.path().join("first");
    assert!(run_train(&data, &first, &["--seed", "2,5"]).status.success());
    let second = dir.path().join("second");
    let res = gbsr(&["train", "--config", s(&first.join("manifest.json")), "--out", s(&second)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["seed-2/train_log.jsonl", "seed-5/train_log.jsonl", "seed-5/checkpoint.gbsr", "metrics.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    // one worker thread gives the same bytes
    let third = dir.path().join("third");
    let res = gbsr_env(&["train", "--config", s(&first.join("manifest.json")), "--out", s(&third)], "GBSR_THREADS", "1");
    assert!(res.status.success());
    assert_eq!(fs::read(first.join("seed-2/train_log.jsonl")).unwrap(), fs::read(third.join("seed-2/train_log.jsonl")).unwrap());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nbeta = 5\nlambda=0.001\nepochs=99\n").unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run, &["--beta", "7"]);
    args.splice(1..1, ["--config".to_string(), s(&cfg).to_string()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(gbsr(&refs).status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["beta"], "7");
    assert_eq!(manifest["lambda"], "0.001");
    assert_eq!(manifest["epochs"], "3");
    assert_eq!(manifest["temperature"], "0.2");
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let out = dir.path().join("x");

    // missing social file: data error naming the path
    let missing = dir.path().join("no-such-social.tsv");
    let res = gbsr(&[
        "train", "--interactions", s(&data.join("interactions.tsv")), "--social", s(&missing), "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no-such-social.tsv"));

    // unknown config key
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma=3\n").unwrap();
    let res = gbsr(&["train", "--config", s(&cfg)]);
    assert_eq!(res.status.code(), Some(1));

    // invalid hyperparameter and unknown flag
    assert_eq!(run_train(&data, &out, &["--layers", "7"]).status.code(), Some(1));
    assert_eq!(gbsr(&["train", "--gamma", "1"]).status.code(), Some(1));
    assert_eq!(gbsr_env(&["synth", "--out", s(&out)], "GBSR_THREADS", "zero").status.code(), Some(1));

    // corrupt checkpoint
    let bad = dir.path().join("bad.gbsr");
    fs::write(&bad, b"GBSRCKPT\x01\x00").unwrap();
    let res = gbsr(&[
        "export-confidence", "--checkpoint", s(&bad), "--interactions", s(&data.join("interactions.tsv")),
        "--social", s(&data.join("social.tsv")), "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.join("confidence.csv").exists());
}

#[test]
fn exported_confidences_cover_every_edge() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    assert!(run_train(&data, &run, &[]).status.success());
    let conf = dir.path().join("conf");
    let res = gbsr(&[
        "export-confidence", "--checkpoint", s(&run.join("seed-0/checkpoint.gbsr")),
        "--interactions", s(&data.join("interactions.tsv")), "--social", s(&data.join("social.tsv")), "--out", s(&conf),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(conf.join("confidence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("user_a,user_b,confidence,relaxed_weight"));
    let w: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let social_rows = fs::read_to_string(data.join("social.tsv")).unwrap().lines().count();
    assert_eq!(w.len(), social_rows);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(conf.join("confidence_summary.json")).unwrap()).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((summary["mean"].as_f64().unwrap() - mean).abs() < 1e-15);
    assert_eq!(summary["edges"], w.len());
}

#[test]
fn zero_denoiser_exports_one_half_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let (inter, social) = (data.join("interactions.tsv"), data.join("social.tsv"));
    let cfg = TrainConfig { dim: 8, ..TrainConfig::default() };
    let ds = load_dataset(&inter, &social, cfg.split_ratio, cfg.split_seed).unwrap();
    let mut state = trainer::init(&cfg, &ds, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    state.params.denoiser = DenoiserParams::zeros(8, cfg.temperature, cfg.epsilon);
    let ckpt = dir.path().join("zero.gbsr");
    checkpoint::save(&ckpt, &state, &cfg).unwrap();
    let conf = dir.path().join("conf");
    let res = gbsr(&["export-confidence", "--checkpoint", s(&ckpt), "--interactions", s(&inter), "--social", s(&social), "--out", s(&conf)]);
    assert!(res.status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(conf.join("confidence_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mean"], 0.5);
    assert_eq!(summary["variance"], 0.0);
    let csv = fs::read_to_string(conf.join("confidence.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0.5")));
}

#[test]
fn evaluate_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    assert!(run_train(&data, &run, &["--seed", "1,2"]).status.success());
    let eval_out = dir.path().join("eval");
    let res = gbsr(&[
        "evaluate", "--checkpoint", s(&run.join("seed-1/checkpoint.gbsr")), "--checkpoint", s(&run.join("seed-2/checkpoint.gbsr")),
        "--interactions", s(&data.join("interactions.tsv")), "--social", s(&data.join("social.tsv")), "--out", s(&eval_out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), fs::read(eval_out.join("metrics.json")).unwrap());
}
