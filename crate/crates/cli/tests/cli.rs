use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use asr_core::bench::steering_toy;
use asr_core::graph::StructuralGraph;
use asr_core::harness::{ExperimentConfig, RunReport};
use asr_core::identify::IdentifiedParams;
use asr_core::objective::LearnableModel;
use asr_core::policy::QPolicy;

fn asr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_toy(dir: &Path) {
    let (g, p) = steering_toy();
    fs::write(dir.join("truth.json"), p.to_json()).unwrap();
    fs::write(dir.join("graph.json"), g.to_json()).unwrap();
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = asr(&["--help"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for sub in ["simulate", "identify", "asr", "learn", "train-policy", "eval", "pipeline", "benchmark"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn asr_prints_figure1_set() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.json"), StructuralGraph::figure1().to_json()).unwrap();
    let out = asr(&["asr", "--graph", "g.json", "--check"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "2,3");
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    let run = |args: &[&str]| {
        let out = asr(args, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["simulate", "--params", "truth.json", "--steps", "500", "--episodes", "2", "--seed", "3", "--out", "traj.jsonl"]);
    let first = fs::read(d.join("traj.jsonl")).unwrap();
    run(&["simulate", "--params", "truth.json", "--steps", "500", "--episodes", "2", "--seed", "3", "--out", "again.jsonl"]);
    assert_eq!(fs::read(d.join("again.jsonl")).unwrap(), first);

    run(&["identify", "--traj", "traj.jsonl", "--lags", "4", "--dstate", "2", "--out", "id.json"]);
    let id_text = fs::read_to_string(d.join("id.json")).unwrap();
    assert_eq!(IdentifiedParams::from_json(&id_text).unwrap().to_json(), id_text);

    fs::write(d.join("learn.json"), r#"{"gamma": 0.5, "train": {"iterations": 3}}"#).unwrap();
    run(&["learn", "--traj", "traj.jsonl", "--dstate", "2", "--config", "learn.json", "--identified", "id.json", "--out", "model.json", "--history", "history.csv"]);
    let model_text = fs::read_to_string(d.join("model.json")).unwrap();
    assert_eq!(LearnableModel::from_json(&model_text).unwrap().to_json(), model_text);
    let history = fs::read_to_string(d.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("iteration,"));

    fs::write(d.join("rl.json"), r#"{"episodes": 3, "horizon": 20, "imagination_steps": 2}"#).unwrap();
    run(&["train-policy", "--env-params", "truth.json", "--model", "truth.json", "--asr", "1", "--config", "rl.json", "--curve-out", "curve.csv", "--policy-out", "policy.json"]);
    let curve = fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("episode,return,epsilon,real_steps"));
    assert_eq!(curve.lines().count(), 4);
    let policy_text = fs::read_to_string(d.join("policy.json")).unwrap();
    assert_eq!(QPolicy::from_json(&policy_text).unwrap().to_json(), policy_text);

    let out = run(&["eval", "--policy", "policy.json", "--env-params", "truth.json", "--episodes", "3", "--horizon", "20"]);
    assert!(stdout(&out).contains('±'));
}

#[test]
fn benchmark_then_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = asr(&["benchmark", "--name", "steering-toy", "--seed", "1", "--out-dir", "bench"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg_path = d.join("bench/config.json");
    let mut cfg = ExperimentConfig::from_json(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.data.episodes = 2;
    cfg.data.steps = 400;
    cfg.learning.train.iterations = 2;
    cfg.policy.config.episodes = 2;
    cfg.policy.config.horizon = 20;
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = asr(&["pipeline", "--config", "bench/config.json"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::from_json(&fs::read_to_string(d.join("bench/run/report.json")).unwrap()).unwrap();
    assert_eq!(report.asr.true_asr.as_deref(), Some("1"));
    assert_eq!(report.config_hash.len(), 64);
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    fs::write(d.join("bad.json"), "{ not json").unwrap();
    fs::write(d.join("bad.jsonl"), "{\"t\":0,\"o\":[1.0],\"a\":[1.0]}\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["simulate", "--params", "missing.json", "--steps", "10", "--seed", "0", "--out", "t.jsonl"],
        &["simulate", "--params", "bad.json", "--steps", "10", "--seed", "0", "--out", "t.jsonl"],
        &["identify", "--traj", "bad.jsonl", "--dstate", "2", "--out", "id.json"],
        &["asr", "--graph", "truth.json"],
        &["benchmark", "--name", "nope", "--seed", "0", "--out-dir", "x"],
        &["train-policy", "--env-params", "truth.json", "--model", "truth.json", "--asr", "7", "--curve-out", "c.csv"],
    ];
    for args in cases {
        let out = asr(args, d);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(code(&asr(&["simulate"], d)), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    let out = asr(&["simulate", "--params", "truth.json", "--steps", "300", "--seed", "0", "--out", "t.jsonl"], d);
    assert_eq!(code(&out), 0);
    // More latent dimensions than the observations can support.
    let out = asr(&["identify", "--traj", "t.jsonl", "--lags", "4", "--dstate", "5", "--out", "id.json"], d);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("rl.json"), r#"{"episodes": 5, "horizon": 50, "learning_rate": 80.0, "feature_degree": 2}"#).unwrap();
    let out = asr(&["train-policy", "--env-params", "truth.json", "--model", "truth.json", "--asr", "1,2", "--config", "rl.json", "--curve-out", "c.csv"], d);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}
