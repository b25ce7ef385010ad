use std::path::{Path, PathBuf};
use std::process::Command;

use pierce_cli::config::ExperimentConfig;
use pierce_cli::stages::Run;

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml")
}

/// The bundled demo scenario with a model small enough for a smoke run.
fn light() -> ExperimentConfig {
    let mut c = ExperimentConfig::load(&demo()).unwrap();
    c.scenario.steps = 864;
    c.model.hidden_d = 8;
    c.model.heads = 2;
    c.train.epochs = 1;
    c.window.train_stride = 12;
    c.window.eval_stride = 6;
    c.eval.forecasters = vec!["persistence".into(), "full".into(), "no_conditioning".into()];
    c.finalize().unwrap();
    c
}

#[test]
fn demo_config_loads() {
    let c = ExperimentConfig::load(&demo()).unwrap();
    assert_eq!(c.scenario.steps, 2016);
    assert_eq!(c.scenario.seed, c.seed);
    assert_eq!(c.eval.forecasters.len(), 6);
}

#[test]
fn full_pipeline_emits_every_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), light()).unwrap();
    let table = run.run_all().unwrap();
    assert!(table.contains("persistence") && table.contains("no_conditioning"), "{table}");
    for f in [
        "manifest.json",
        "raw/obs_NTUS.csv",
        "raw/obs_SIN1.csv",
        "raw/truth.csv",
        "raw/indices.csv",
        "features/features.csv",
        "labels/labels.csv",
        "labels/label_stats.csv",
        "build/snapshots.jsonl",
        "build/norm.json",
        "train/full.ckpt.json",
        "train/full.log.csv",
        "eval/full/subsets.csv",
        "eval/full/lead.csv",
        "eval/full/dropout.csv",
        "eval/persistence/metrics.txt",
        "report/table.csv",
        "report/table.txt",
        "report/lead_curves.csv",
        "report/ambiguous.csv",
        "report/dropout.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let table = std::fs::read_to_string(dir.path().join("report/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    assert!(!dir.path().join("train/persistence.ckpt.json").exists());
}

fn pierce(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pierce"))
        .arg("--config")
        .arg(demo())
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = pierce(dir.path(), &["preprocess"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("pierce preprocess:"), "{err}");
    assert!(err.contains("`generate`"), "{err}");

    let out = pierce(dir.path(), &["evaluate", "--variant", "full"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`build`"));

    let out = pierce(dir.path(), &["train", "--variant", "lstm"]);
    assert!(!out.status.success());
}

#[test]
fn persistence_evaluates_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate", "preprocess", "label", "build"] {
        let out = pierce(dir.path(), &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = pierce(dir.path(), &["evaluate", "--variant", "persistence", "--subset", "new"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("roc_auc 0.500000"), "{text}");
    let out = pierce(dir.path(), &["evaluate", "--variant", "full"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`train:full`"));
}

#[test]
fn rerun_with_another_seed_is_refused_by_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = light();
    c.eval.forecasters = vec!["persistence".into()];
    let mut run = Run::open(dir.path(), c.clone()).unwrap();
    run.run_all().unwrap();
    c.set_seed(c.seed + 1).unwrap();
    let mut other = Run::open(dir.path(), c).unwrap();
    let err = other.report().unwrap_err().to_string();
    assert!(err.contains("different configuration"), "{err}");
}
