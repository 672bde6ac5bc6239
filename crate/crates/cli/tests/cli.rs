//! End-to-end checks of the binary: exit codes, file outputs, determinism.

use std::path::Path;
use std::process::Command;

fn prospect() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prospect"))
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        r#"
suite = "enabl3s_like"
backbone = "mlp"
window_length = 5
strategies = ["none", "er"]
seeds = [1, 2]
task_order = [0, 1]
out_dir = "{}"

[data]
sensor_dim = 4
samples_per_task = 150
test_samples = 80
noise = 0.02

[train]
max_epochs = 3
batch_size = 40
buffer_capacity = 60
"#,
        out.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn test_run_deterministic_csv_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let config = write_config(dir.path(), &out_a);
    let status = prospect().args(["run", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());
    assert!(out_a.join("report.json").exists());
    assert!(out_a.join("metrics.csv").exists());

    let out_b = dir.path().join("b");
    let status = prospect()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(out_a.join("metrics.csv")).unwrap(),
        std::fs::read(out_b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn test_config_error_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "strategies = []\nseeds = [1]\nout_dir = \"x\"\n").unwrap();
    let status = prospect().args(["run", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));
    // unknown config key is also a config error
    let path2 = dir.path().join("bad2.toml");
    std::fs::write(&path2, "no_such_key = 1\n").unwrap();
    let status = prospect().args(["run", "--config"]).arg(&path2).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn test_gen_data_and_compare_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen");
    let config = write_config(dir.path(), &out);
    let status = prospect().args(["gen-data", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());
    assert!(out.join("task_0.csv").exists());

    let run_out = dir.path().join("run");
    let status = prospect()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run_out)
        .status()
        .unwrap();
    assert!(status.success());
    // seeds [1,2] are too few for a Wilcoxon test; exit 3 (runtime), not a crash
    let output = prospect()
        .arg("compare")
        .arg(run_out.join("report.json"))
        .args(["--metric", "r2"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn test_seed_offset_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let config = write_config(dir.path(), &out_a);
    prospect().args(["run", "--config"]).arg(&config).status().unwrap();
    let out_b = dir.path().join("b");
    let status = prospect()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .args(["--seed-offset", "100"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(
        std::fs::read(out_a.join("metrics.csv")).unwrap(),
        std::fs::read(out_b.join("metrics.csv")).unwrap()
    );
}
