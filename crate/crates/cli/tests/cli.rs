use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
independent_model = false
[dataset]
kind = "blobs"
num_classes = 3
dim = 6
per_class = 60
[model]
kind = "mlp"
hidden = [24, 12]
[train]
epochs = 20
batch_size = 16
lr = 0.05
[trigger]
size = 5

[[attacks]]
name = "soft"
kind = "extract_soft"
kl_direction = "source_first"
[attacks.train]
epochs = 3
batch_size = 16
lr = 0.05
"#;

fn mvmark(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvmark"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn staged_subcommands_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for sub in ["select-trigger", "train-source", "train-benign", "attack", "verify"] {
        let o = mvmark(&[sub, "--config", &cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(dir.path().join("run/trigger/trigger.csv").is_file());
    assert!(dir.path().join("run/reports/verify-soft.toml").is_file());
    assert!(!dir.path().join("run/results.csv").exists());

    let o = mvmark(&["report", "--out", out], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("model,role,source_acc"), "{stdout}");
    assert_eq!(stdout.lines().count(), 4);

    // a full run over the finished directory only redoes the report
    let o = mvmark(&["run", "--config", &cfg, "--out", out], dir.path());
    assert!(o.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"stage\": \"source\"").count(), 1);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = mvmark(&["select-trigger", "--config", &cfg, "--out", "a"], dir.path());
    assert!(o.status.success());
    let o = mvmark(&["select-trigger", "--config", &cfg, "--out", "b", "--seed", "99"], dir.path());
    assert!(o.status.success());
    let a = std::fs::read(dir.path().join("a/trigger/trigger.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/trigger/trigger.csv")).unwrap();
    assert_ne!(a, b);
    // the seed is part of the config identity
    let o = mvmark(&["select-trigger", "--config", &cfg, "--out", "a", "--seed", "99"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn failure_exits_nonzero_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("size = 5", "size = 100000"));
    let o = mvmark(&["run", "--config", &cfg, "--out", "run"], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage `trigger`"), "{err}");

    let bad = write_config(dir.path(), &format!("{CONFIG}\nbogus_key = 1\n"));
    let o = mvmark(&["run", "--config", &bad, "--out", "run2"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `config`"));

    let o = mvmark(&["report", "--out", "missing"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `report`"));
}

#[test]
fn incomplete_run_report_lists_missing_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    assert!(mvmark(&["train-source", "--config", &cfg, "--out", "run"], dir.path()).status.success());
    let o = mvmark(&["report", "--config", &cfg, "--out", "run"], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("benign") && err.contains("verify:source"), "{err}");
}

#[test]
fn simulate_multiview_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mv.toml");
    std::fs::write(
        &cfg,
        "per_class = 40\nsurrogate_samples = 80\nseeds = [0, 1]\ntrigger_weights = [[0.8, 0.2], [0.0, 1.0]]\n",
    )
    .unwrap();
    let o = mvmark(&["simulate-multiview", "--config", cfg.to_str().unwrap(), "--out", "mv"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(dir.path().join("mv/transfer.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    let rates = std::fs::read_to_string(dir.path().join("mv/transfer_rates.csv")).unwrap();
    assert_eq!(rates.lines().next().unwrap(), "w0,w1,transfer_rate");
    assert_eq!(rates.lines().count(), 3);
}
