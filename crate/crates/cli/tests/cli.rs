//! The `shortcutlab` binary on the smoke preset.

use std::path::Path;
use std::process::{Command, Output};

use shortcutlab_cli::ExperimentConfig;

fn shortcutlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shortcutlab"))
        .args(args)
        .env_remove("SHORTCUTLAB_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = shortcutlab(&["generate", "--preset", "smoke", "--output-dir", path(tmp.path())]);
    let b = shortcutlab(&["generate", "--preset", "smoke", "--output-dir", path(tmp.path())]);
    assert!(a.status.success() && b.status.success());
    assert!(stdout(&a).contains("digest"));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn unknown_preset_lists_presets_and_fails() {
    let o = shortcutlab(&["preset", "table9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("table1-desk"));
}

#[test]
fn train_needs_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let o = shortcutlab(&["train", "--preset", "smoke", "--output-dir", path(tmp.path())]);
    assert!(!o.status.success());
}

#[test]
fn train_then_eval_with_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("smoke");
    assert!(shortcutlab(&["generate", "--preset", "smoke", "--output-dir", path(tmp.path())]).status.success());
    let cfg = dir.join("config.json");
    let o = shortcutlab(&[
        "train",
        "--config",
        path(&cfg),
        "--output-dir",
        path(&dir),
        "--method",
        "factor-src",
        "--lambda",
        "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(echoed.model.cells.len(), 1);
    assert_eq!(echoed.loss.lambda, 0.0);

    let run = dir.join("runs/factor-src/0");
    let o = shortcutlab(&["eval", path(&run), "--bias-sweep", "-10:10:41", "--crosspred", "--assoc-heatmap"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("41 points"));
    let curve = std::fs::read_to_string(run.join("bias_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 42);
    for f in ["crosspred.csv", "assoc.ppm", "report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let o = shortcutlab(&["eval", path(&dir)]);
    assert!(o.status.success());
    assert!(dir.join("summary.csv").is_file());
}

#[test]
fn seed_variable_replaces_configured_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_shortcutlab"))
        .args(["preset", "smoke", "--output-dir", path(tmp.path())])
        .env("SHORTCUTLAB_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = tmp.path().join("smoke/runs/factor-0");
    let seeds: Vec<String> =
        std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(seeds, vec!["5".to_string()]);
    assert!(tmp.path().join("study.json").is_file());
}

#[test]
fn gradcheck_passes() {
    let o = shortcutlab(&["gradcheck"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 12);
}
