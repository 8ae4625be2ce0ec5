use std::path::Path;
use std::process::{Command, Output};

use sdo_lab::cli::{RunManifest, MANIFEST_FILE};

const SMALL_TRAIN: &str = r#"
[train]
dataset = { kind = "standard-normal" }
train_steps = 20
hidden = [8]
"#;

const LINEAR: &str = r#"
[model]
kind = "linear"
a = 1.0
steps = 4

[verify]
draws = 2
picard_batch = 4

[optimize]
objective = { kind = "quadratic-target", target = [0.3] }
"#;

fn sdo(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sdo"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn last_run(dir: &Path) -> RunManifest {
    RunManifest::read_all(&dir.join("out")).unwrap().pop().unwrap()
}

#[test]
fn train_is_deterministic_and_quiet() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = sdo(d.path(), SMALL_TRAIN, &["--quiet", "--seed", "3", "train"]);
        assert_eq!(out.status.code(), Some(0));
        assert!(out.stdout.is_empty());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/model.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    let (ma, mb) = (last_run(a.path()), last_run(b.path()));
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!((ma.seed, ma.status.as_str(), ma.exit_code), (3, "ok", 0));
}

#[test]
fn seeds_change_the_result() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    sdo(a.path(), SMALL_TRAIN, &["--quiet", "--seed", "1", "train"]);
    sdo(b.path(), SMALL_TRAIN, &["--quiet", "--seed", "2", "train"]);
    assert_ne!(last_run(a.path()).artifacts, last_run(b.path()).artifacts);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let missing = sdo(d.path(), "[train]\ntrain_steps = 5\n", &["train"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("dataset"));

    assert_eq!(sdo(d.path(), "bogus = 1\n", &["verify"]).status.code(), Some(2));
    assert_eq!(sdo(d.path(), "", &["--seed", "x", "verify"]).status.code(), Some(2));
    assert_eq!(sdo(d.path(), "", &["launch"]).status.code(), Some(2));
    assert_eq!(sdo(d.path(), "", &["--help"]).status.code(), Some(0));
}

#[test]
fn damaged_checkpoint_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let mut bytes = sdo_lab::cli::BUNDLED_CHECKPOINT.to_vec();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(d.path().join("cut.ckpt"), &bytes).unwrap();
    let cfg = "[model]\nkind = \"checkpoint\"\npath = \"cut.ckpt\"\n";
    assert_eq!(sdo(d.path(), cfg, &["--quiet", "verify"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_partial_output() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_TRAIN}learning_rate = 1e300\n");
    let out = sdo(d.path(), &cfg, &["--quiet", "train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(d.path().join("out/loss.csv").exists());
    let m = last_run(d.path());
    assert_eq!((m.status.as_str(), m.exit_code), ("numeric-abort", 3));
}

#[test]
fn verify_passes_on_the_linear_field_and_fails_on_an_impossible_tolerance() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(sdo(d.path(), LINEAR, &["--quiet", "verify"]).status.code(), Some(0));
    let csv = std::fs::read_to_string(d.path().join("out/verify.csv")).unwrap();
    assert!(csv.starts_with("check,value,tolerance,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(d.path().join("out/bounds.json").exists());

    let strict = LINEAR.replacen("picard_batch = 4", "picard_batch = 4\nfd_tolerance = 1e-300", 1);
    let out = sdo(d.path(), &strict, &["--quiet", "verify"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_run(d.path()).status, "verify-failed");
}

#[test]
fn zero_step_optimization_records_only_the_start() {
    let d = tempfile::tempdir().unwrap();
    let cfg = LINEAR.replace("[optimize]", "[optimize]\nsteps = 0");
    assert_eq!(sdo(d.path(), &cfg, &["--quiet", "optimize"]).status.code(), Some(0));
    let h = std::fs::read_to_string(d.path().join("out/history.csv")).unwrap();
    let rows: Vec<&str> = h.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0,"));
    let t = std::fs::read_to_string(d.path().join("out/trajectory.csv")).unwrap();
    // N + 1 states plus the header
    assert_eq!(t.lines().count(), 6);
}

#[test]
fn single_entry_bench_writes_one_row() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "[bench]\nn_list = [10]\nestimators = [\"bptt\"]\nbatch = 4\nrepeats = 1\n";
    assert_eq!(sdo(d.path(), cfg, &["--quiet", "bench"]).status.code(), Some(0));
    let s = std::fs::read_to_string(d.path().join("out/sweep.csv")).unwrap();
    assert_eq!(s.lines().count(), 2);
    for f in ["grad_norm.svg", "tape_nodes.svg", "wall_time.svg", MANIFEST_FILE] {
        assert!(d.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    sdo(d.path(), LINEAR, &["--quiet", "--seed", "11", "optimize"]);
    let resolved = std::fs::read_to_string(d.path().join("out/config.resolved.toml")).unwrap();
    let again = tempfile::tempdir().unwrap();
    assert_eq!(sdo(again.path(), &resolved, &["--quiet", "optimize"]).status.code(), Some(0));
    let (a, b) = (last_run(d.path()), last_run(again.path()));
    assert_eq!(a.seed, b.seed);
    assert_eq!(a.config_hash, b.config_hash);
    let stable = |m: &RunManifest| m.artifacts.iter().filter(|a| !a.timing).cloned().collect::<Vec<_>>();
    assert_eq!(stable(&a), stable(&b));
}
