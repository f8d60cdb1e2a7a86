use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[reward]
seeds = [0, 20]
epochs = 1

[projector]
warmup_epochs = 1
final_epochs = 1
train_seeds = [0, 4]
prompts = [0]

[eval]
unseen_seeds = [350, 353]
probe_seeds = [350, 352]
diversity_samples = 520
fid_reshuffles = 2
is_folds = 2
ablation_taus = [100.0, 200.0]
"#;

fn noiseproj(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noiseproj"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = noiseproj(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();

    ok(d, &["make-world"]);
    let world: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("world.json")).unwrap()).unwrap();
    assert_eq!(world["prompts"].as_array().unwrap().len(), 5);

    assert!(ok(d, &["gen-data"]).contains("triplets"));
    ok(d, &["train-reward"]);
    ok(d, &["warmup"]);
    ok(d, &["train-projector", "--tau", "150"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("projector_report.json")).unwrap()).unwrap();
    assert_eq!(report["tau"], 150.0);

    ok(d, &["eval"]);
    let ckpt = d.join("projector.ckpt");
    ok(d, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--seed-range", "0..2"]);
    let csv = fs::read_to_string(d.join("eval_projector_0_2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(d.join("eval_pretrained_350_353.json").exists());

    ok(d, &["diversity"]);
    assert!(d.join("diversity.csv").exists());
    let table = ok(d, &["ablate-tau", "--seed-range", "350..351"]);
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = noiseproj(dir.path(), &["train-reward"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_usage_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    assert_eq!(noiseproj(dir.path(), &["eval", "--seed-range", "9..3"]).status.code(), Some(2));
    assert_eq!(noiseproj(dir.path(), &["no-such-stage"]).status.code(), Some(2));

    fs::write(dir.path().join("tiny.toml"), "[world]\nunknown_key = 1\n").unwrap();
    assert_eq!(noiseproj(dir.path(), &["make-world"]).status.code(), Some(2));
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["warmup"]);
    fs::write(d.join("tiny.toml"), format!("{TINY}\n[backbone]\ninit_seed = 9\n")).unwrap();
    let ckpt = d.join("warmup.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = noiseproj(d, &["eval", "--checkpoint", ckpt, "--seed-range", "0..1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
    ok(d, &["eval", "--checkpoint", ckpt, "--seed-range", "0..1", "--allow-mismatch"]);
}
