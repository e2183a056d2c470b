//! End-to-end tests of the `mgdn` binary: exit codes, determinism, and the
//! synth -> train -> fuse -> eval pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgdn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgdn"))
        .args(args)
        .current_dir(dir)
        .env("MGDN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let cfg = format!(
        "model.task=mff\nmodel.stages=1\nmodel.channels=8\nmodel.heads=2\n\
         model.window=4\nopt.lr=0.001\ndata.height=16\ndata.width=16\n{extra}"
    );
    let path = dir.join("run.cfg");
    fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

#[test]
fn usage_errors_exit_one_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown subcommand: usage error.
    let out = mgdn(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    // Bad task value: usage error.
    let out = mgdn(&["synth", "--task", "nope", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    // Missing config file: runtime (I/O) error.
    let out = mgdn(&["train", "--config", "missing.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // Unknown config key: config error.
    fs::write(dir.path().join("bad.cfg"), "no.such.key=1\n").unwrap();
    let out = mgdn(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
}

#[test]
fn synth_zero_count_succeeds_with_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgdn(
        &["synth", "--task", "mff", "--count", "0", "--seed", "1", "--out", "empty"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let manifest = dir.path().join("empty/manifest.jsonl");
    assert_eq!(fs::read_to_string(manifest).unwrap(), "");
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = mgdn(
            &[
                "synth", "--task", "mef", "--count", "2", "--seed", "9", "--out", name,
                "--height", "24", "--width", "24",
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/manifest.jsonl"), read("b/manifest.jsonl"));
    assert_eq!(read("a/mef-00000_in0.png"), read("b/mef-00000_in0.png"));
    assert_eq!(read("a/mef-00001_gt.png"), read("b/mef-00001_gt.png"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgdn(
        &[
            "synth", "--task", "mff", "--count", "3", "--seed", "4", "--out", "data",
            "--height", "16", "--width", "16",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = tiny_config(dir.path(), "data.manifest=data/manifest.jsonl\n");

    // Zero steps: only the initialization checkpoint.
    let out = mgdn(
        &["train", "--config", &cfg, "--steps", "0", "--out", "run0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run0/final.mgdn").exists());
    assert!(dir.path().join("run0/config.txt").exists());

    // A short real run.
    let out = mgdn(
        &["train", "--config", &cfg, "--steps", "3", "--seed", "5", "--out", "run1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("run1/loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4); // header + 3 steps

    // Fuse with dumps: stage count determines raster counts.
    let out = mgdn(
        &[
            "fuse", "--checkpoint", "run1/final.mgdn", "--out", "fused",
            "--dump-kernels", "--dump-masks",
            "data/mff-00000_in0.png", "data/mff-00000_in1.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("fused/fused.png").exists());
    assert!(dir.path().join("fused/mask_stage0_p0.png").exists());
    assert!(dir.path().join("fused/kv_stage0_s0.png").exists());
    assert!(dir.path().join("fused/kv_stage0_s1.png").exists());

    // Wrong input count fails before compute with a usage error.
    let out = mgdn(
        &[
            "fuse", "--checkpoint", "run1/final.mgdn", "--out", "fused2",
            "data/mff-00000_in0.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));

    // Evaluate over the training manifest.
    let out = mgdn(
        &[
            "eval", "--checkpoint", "run1/final.mgdn", "--manifest", "data/manifest.jsonl",
            "--out", "eval",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("eval/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4); // 3 samples + aggregate
    assert!(dir.path().join("eval/report.txt").exists());
}

#[test]
fn eval_on_empty_manifest_is_a_success() {
    let dir = tempfile::tempdir().unwrap();
    mgdn(
        &["synth", "--task", "mff", "--count", "1", "--seed", "2", "--out", "data",
          "--height", "16", "--width", "16"],
        dir.path(),
    );
    let cfg = tiny_config(dir.path(), "data.manifest=data/manifest.jsonl\n");
    let out = mgdn(&["train", "--config", &cfg, "--steps", "0", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(0));

    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = mgdn(
        &["eval", "--checkpoint", "r/final.mgdn", "--manifest", "empty.jsonl", "--out", "e"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read_to_string(dir.path().join("e/report.jsonl")).unwrap().lines().count(),
        1 // aggregate only
    );
}

#[test]
fn identical_seeds_reproduce_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    mgdn(
        &["synth", "--task", "mff", "--count", "2", "--seed", "3", "--out", "data",
          "--height", "16", "--width", "16"],
        dir.path(),
    );
    let cfg = tiny_config(dir.path(), "data.manifest=data/manifest.jsonl\n");
    for name in ["x", "y"] {
        let out = mgdn(
            &["train", "--config", &cfg, "--steps", "4", "--seed", "11", "--out", name],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(dir.path().join("x/loss_log.tsv")).unwrap(),
        fs::read(dir.path().join("y/loss_log.tsv")).unwrap()
    );
    // Ablation flags produce distinct run directories and logs.
    let out = mgdn(
        &["train", "--config", &cfg, "--steps", "4", "--seed", "11", "--out", "z",
          "--ablate", "maskmi"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let z = fs::read_to_string(dir.path().join("z/loss_log.tsv")).unwrap();
    let x = fs::read_to_string(dir.path().join("x/loss_log.tsv")).unwrap();
    assert!(z != x);
    assert!(fs::read_to_string(dir.path().join("z/config.txt"))
        .unwrap()
        .contains("model.disable_maskmi=true"));
}

#[test]
fn resume_continues_the_exact_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    mgdn(
        &["synth", "--task", "mff", "--count", "2", "--seed", "6", "--out", "data",
          "--height", "16", "--width", "16"],
        dir.path(),
    );
    let cfg = tiny_config(dir.path(), "data.manifest=data/manifest.jsonl\n");

    // Straight run: 6 steps.
    let out = mgdn(
        &["train", "--config", &cfg, "--steps", "6", "--seed", "13", "--out", "full"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));

    // Interrupted: 3 steps, then resume for 6 total.
    let out = mgdn(
        &["train", "--config", &cfg, "--steps", "3", "--seed", "13", "--out", "half"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let out = mgdn(
        &[
            "train", "--config", &cfg, "--steps", "3", "--seed", "13", "--out", "half2",
            "--resume", "half/final.mgdn",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let full = fs::read_to_string(dir.path().join("full/loss_log.tsv")).unwrap();
    let tail: Vec<&str> = full.lines().skip(4).collect(); // steps 4..6
    let resumed = fs::read_to_string(dir.path().join("half2/loss_log.tsv")).unwrap();
    let resumed_tail: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(tail, resumed_tail);
}
