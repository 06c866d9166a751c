//! End-to-end runs of the `dmsd` binary.

use std::path::Path;
use std::process::{Command, Output};

use dmsd::data::load_features;
use dmsd::harness::{read_metrics, Checkpoint};

fn dmsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsd")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.txt");
    std::fs::write(
        &spec,
        "source_classes=8\nsource_per_class=6\ntarget_classes=5\ntarget_per_class=24\nframes=4\ndim=8\n",
    )
    .unwrap();
    let data = root.join("data");
    ok(&dmsd(&["gen-data", "--spec", s(&spec), "--out", s(&data), "--seed", "3"]));
    let source = load_features(data.join("source.dmf")).unwrap();
    assert_eq!((source.len(), source.num_categories), (48, 8));

    let config = root.join("run.cfg");
    std::fs::write(
        &config,
        "source_features=data/source.dmf\ntarget_features=data/target.dmf\nframes=4\ndim=8\nhidden=16\n\
         pretrain_episodes=12\nmetatrain_episodes=12\naccum_steps=4\neval_episodes=50\nwall_clock=false\n",
    )
    .unwrap();
    let metrics = root.join("metrics.jsonl");
    let (pre, meta) = (root.join("pre.ckpt"), root.join("meta.ckpt"));
    ok(&dmsd(&["pretrain", "--config", s(&config), "--out", s(&pre), "--metrics", s(&metrics)]));
    ok(&dmsd(&["metatrain", "--config", s(&config), "--init", s(&pre), "--out", s(&meta), "--metrics", s(&metrics)]));
    let report = ok(&dmsd(&["eval", "--config", s(&config), "--ckpt", s(&meta), "--metrics", s(&metrics)]));
    assert!(report.contains("50 episodes"), "{report}");

    assert_eq!(Checkpoint::load(&pre).unwrap().step, 3);
    assert_eq!(Checkpoint::load(&meta).unwrap().step, 6);
    let records = read_metrics(&metrics).unwrap();
    let count = |stage: &str| records.iter().filter(|r| r.stage == stage).count();
    assert_eq!((count("pretrain"), count("metatrain"), count("eval")), (12, 12, 1));
    let acc = records.last().unwrap().eval_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(records.iter().all(|r| r.wall_time.is_none() && r.error.is_none()));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "n_wya=5\n").unwrap();
    let out = dmsd(&["pretrain", "--config", s(&config), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_wya"));

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    std::fs::write(&config, "pretrain_episodes=1\n").unwrap();
    let out = dmsd(&["eval", "--config", s(&config), "--ckpt", s(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn gradcheck_reports_every_operation() {
    let out = dmsd(&["gradcheck", "--scale", "tiny", "--seed", "4"]);
    let text = ok(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!text.contains("FAIL"));
}
