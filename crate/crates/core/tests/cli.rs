use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
num_images = 8
samples_per_image = 4
initial_count = 32
final_count = 8

[pretrain]
epochs = 2

[training]
crm_steps = 3
clm_steps = 3
"#;

fn run(workdir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlit-curate"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, SMALL).unwrap();
    let work = dir.path().join("work");
    (dir, config, work)
}

#[test]
fn pipeline_subcommand_succeeds() {
    let (_d, config, work) = setup();
    let out = run(&work, &config, &["pipeline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("post-training mean i2c"));
    assert!(work.join("report/summary.txt").exists());
}

#[test]
fn stages_run_individually() {
    let (_d, config, work) = setup();
    for stage in ["generate-initial", "filter", "score", "partition", "train-crm", "train-clm", "generate-final", "report"] {
        let out = run(&work, &config, &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(&work, &config, &["--no-clm", "train-clm"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "train_clm: skipped(ablation)");
    assert_eq!(run(&work, &config, &["--seed", "3", "train-clm"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let (_d, config, work) = setup();
    assert_eq!(run(&work, &config, &["bogus"]).status.code(), Some(1));
    assert_eq!(run(&work, &config, &["--fraction", "1.5", "filter"]).status.code(), Some(1));
    assert_eq!(run(&work, &config, &["--fraction", "0.1", "--fraction", "0.2", "score"]).status.code(), Some(1));
    assert_eq!(run(&work, &config, &["--help"]).status.code(), Some(0));
    let bad = config.with_file_name("bad.toml");
    std::fs::write(&bad, "unknown_key = 3\n").unwrap();
    assert_eq!(run(&work, &bad, &["pipeline"]).status.code(), Some(1));
}

#[test]
fn stage_errors_exit_two() {
    let (_d, config, work) = setup();
    let out = run(&work, &config, &["score"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("score"));
    assert!(run(&work, &config, &["generate-initial"]).status.success());
    assert_eq!(run(&work, &config, &["--seed", "9", "filter"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_fraction() {
    let (_d, config, work) = setup();
    assert!(run(&work, &config, &["pipeline"]).status.success());
    let out = run(&work, &config, &["sweep", "--fraction", "0.25", "--fraction", "1.0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(work.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(run(&work, &config, &["report"]).status.success());
    assert!(work.join("report/sweep.csv").exists());
}
