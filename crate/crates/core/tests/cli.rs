//! End-to-end checks of the command-line surface: exit codes, output
//! files, flag precedence, and byte determinism across processes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bandit-conformal"))
}

fn run_args(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn run_writes_outputs_and_exits_zero() {
    let temp = tempfile::tempdir().unwrap();
    let out = temp.path().join("run");
    let output = run_args(&[
        "run",
        "--data",
        "gm",
        "--T",
        "500",
        "--batch",
        "64",
        "--seed",
        "3",
        "--alpha",
        "0.1",
        "--policy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("seed=3"));
    assert!(summary.contains("alpha=0.1"));
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn config_errors_exit_one() {
    let bad_alpha = run_args(&["run", "--alpha", "1.5"]);
    assert_eq!(code(&bad_alpha), 1);
    assert!(String::from_utf8_lossy(&bad_alpha.stderr).contains("alpha"));

    let unknown_flag = run_args(&["run", "--no-such-flag"]);
    assert_eq!(code(&unknown_flag), 1);

    let temp = tempfile::tempdir().unwrap();
    let config = temp.path().join("bad.cfg");
    fs::write(&config, "not_a_key = 1\n").unwrap();
    let bad_key = run_args(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&bad_key), 1);
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("not_a_key"));
}

#[test]
fn runtime_errors_exit_two() {
    let temp = tempfile::tempdir().unwrap();
    let blocker = temp.path().join("blocker");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("sub");
    let output = run_args(&[
        "run",
        "--T",
        "10",
        "--batch",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
}

#[test]
fn flags_override_config_file() {
    let temp = tempfile::tempdir().unwrap();
    let config = temp.path().join("exp.cfg");
    fs::write(
        &config,
        "alpha = 0.05\nt = 200\nbatch = 64\npolicy = uniform\n",
    )
    .unwrap();
    let out = temp.path().join("out");
    let output = run_args(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--alpha",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("alpha=0.1"), "flag must beat the file");
    assert!(
        summary.contains("t=200"),
        "file values without flags survive"
    );
}

#[test]
fn reruns_are_byte_identical_across_processes() {
    let temp = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "run".to_string(),
            "--T".into(),
            "400".into(),
            "--batch".into(),
            "50".into(),
            "--seed".into(),
            "9".into(),
            "--algorithm".into(),
            "alg2".into(),
            "--policy".into(),
            "softmax".into(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let dir_a = temp.path().join("a");
    let dir_b = temp.path().join("b");
    assert_eq!(code(&bin().args(args(&dir_a)).output().unwrap()), 0);
    assert_eq!(code(&bin().args(args(&dir_b)).output().unwrap()), 0);
    for file in ["metrics.csv", "summary.txt"] {
        assert_eq!(
            fs::read(dir_a.join(file)).unwrap(),
            fs::read(dir_b.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn replicate_produces_per_run_dirs_and_aggregate() {
    let temp = tempfile::tempdir().unwrap();
    let out = temp.path().join("reps");
    let output = run_args(&[
        "replicate",
        "--T",
        "300",
        "--batch",
        "64",
        "--reps",
        "3",
        "--policy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    for i in 0..3 {
        assert!(out.join(format!("rep_{i}/summary.txt")).exists());
        assert!(out.join(format!("rep_{i}/metrics.csv")).exists());
    }
    assert!(out.join("aggregate.csv").exists());
}

#[test]
fn sweep_emits_one_table_row_per_grid_value() {
    let temp = tempfile::tempdir().unwrap();
    let out = temp.path().join("sweep");
    let output = run_args(&[
        "sweep",
        "--T",
        "300",
        "--batch",
        "64",
        "--reps",
        "1",
        "--eta2-grid",
        "0.05,0.01",
        "--policy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "header plus two rows:\n{table}");
    assert!(out.join("eta2_0.05/rep_0/summary.txt").exists());
}

#[test]
fn inspect_pretty_prints_a_summary() {
    let temp = tempfile::tempdir().unwrap();
    let out = temp.path().join("run");
    let run = run_args(&[
        "run",
        "--T",
        "100",
        "--batch",
        "50",
        "--policy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let summary = out.join("summary.txt");
    let output = run_args(&["inspect", summary.to_str().unwrap()]);
    assert_eq!(code(&output), 0);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("alpha"));
    assert!(text.contains("tau_final_1"));
}

#[test]
fn file_datasets_stream_end_to_end() {
    let temp = tempfile::tempdir().unwrap();
    let dataset = temp.path().join("data.csv");
    let mut rows = String::new();
    for i in 0..40 {
        let label = i % 3 + 1;
        rows.push_str(&format!("{}.5,{},{label}\n", i % 7, (i % 5) as f64 / 2.0));
    }
    fs::write(&dataset, rows).unwrap();
    let out = temp.path().join("out");
    let output = run_args(&[
        "run",
        "--data",
        &format!("file:{}", dataset.display()),
        "--T",
        "120",
        "--batch",
        "32",
        "--policy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("classes=3"));
}

#[test]
fn help_exits_zero() {
    let output = run_args(&["--help"]);
    assert_eq!(code(&output), 0);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("correctness-only feedback"), "{text}");
    assert!(text.contains("inspect"));
}
