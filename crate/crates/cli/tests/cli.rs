use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn branchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branchlab")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &[&str] = &[
    "--set", "family.num_vars=12",
    "--set", "family.num_cons=3",
    "--set", "split.train=8",
    "--set", "split.valid=3",
    "--set", "split.test=4",
    "--set", "collect.max_nodes=10",
    "--set", "envelope.epochs=2",
    "--set", "train.epochs=2",
    "--set", "train.checkpoint_every=1",
    "--set", "eval.max_clock=1000",
    "--set", "eval.baselines=random,pseudocost",
];

fn stage(cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--run-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    branchlab(&args)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&branchlab(&[])), 1);
    assert_eq!(code(&branchlab(&["collect"])), 1, "missing --run-dir");
    assert_eq!(code(&branchlab(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = stage("generate", dir.path(), &["--set", "no.such.key=1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
    assert_eq!(code(&stage("generate", dir.path(), &["--set", "hybrid.r0=2"])), 1);
}

#[test]
fn missing_artifacts_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stage("collect", dir.path(), &[])), 2);
    assert_eq!(code(&stage("report", dir.path(), &[])), 2);
}

#[test]
fn stages_in_sequence_reuse_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage("generate", dir.path(), SMALL);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(dir.path().join("config.txt")).unwrap().contains("split.train = 8"));
    for cmd in ["collect", "select", "train"] {
        let out = stage(cmd, dir.path(), &[]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let plot = dir.path().join("plot.csv");
    let out = stage("evaluate", dir.path(), &["--workers", "2", "--plot-data", plot.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&plot).unwrap().starts_with("instance,clock,dual_bound"));
    assert_eq!(code(&stage("compare", dir.path(), &[])), 0);
    let out = stage("report", dir.path(), &[]);
    assert_eq!(code(&out), 0);
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("best checkpoint: epoch-"));
    assert!(summary.contains("leaderboard:"));

    // A changed seed no longer matches the stored artifacts.
    assert_eq!(code(&stage("report", dir.path(), &["--set", "seed=5"])), 2);
}

#[test]
fn solve_prints_a_result_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let generated = stage("generate", dir.path(), SMALL);
    assert_eq!(code(&generated), 0);
    let inst = fs::read_dir(dir.path().join("instances/test")).unwrap().next().unwrap().unwrap().path();
    let plot = dir.path().join("trace.csv");
    let out = branchlab(&["solve", inst.to_str().unwrap(), "--policy", "strong-branching", "--plot-data", plot.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(res["status"], "optimal");
    assert!(res["incumbent_value"].as_f64().is_some());
    assert!(fs::read_to_string(&plot).unwrap().starts_with("clock,dual_bound\n0,"));
    assert_eq!(code(&branchlab(&["solve", inst.to_str().unwrap(), "--policy", "oracle"])), 2);
}
