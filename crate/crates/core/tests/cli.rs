//! End-to-end runs of the `diffplan` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "net.hidden=[16]",
    "--set",
    "net.horizon=4",
    "--set",
    "net.action_horizon=2",
    "--set",
    "diffusion.steps=20",
    "--set",
    "finetune.ddim_steps=4",
    "--set",
    "env.episode_length=12",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffplan"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

fn make_checkpoint(dir: &Path, steps: &str) {
    ok(dir, &["gen-data", "--episodes-per-task", "2", "--episode-length", "12", "--seed", "1", "--out", "d.bin"]);
    let set = format!("pretrain.steps={steps}");
    ok(dir, &with_tiny(&["pretrain", "--data", "d.bin", "--out", "p.ckpt", "--set", &set, "--set", "pretrain.batch_size=8"]));
}

#[test]
fn eval_on_fresh_checkpoint_reports_a_rate() {
    let dir = tempfile::tempdir().unwrap();
    make_checkpoint(dir.path(), "0");
    let text = ok(dir.path(), &with_tiny(&["eval", "--ckpt", "p.ckpt", "--task", "reach", "--episodes", "4", "--seed", "3"]));
    let rate: f64 = text
        .split_whitespace()
        .find_map(|f| f.strip_prefix("success_rate="))
        .expect("success_rate printed")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn usage_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--task", "reach"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));

    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));

    make_checkpoint(dir.path(), "0");
    let out = run(dir.path(), &["finetune", "--ckpt", "p.ckpt", "--task", "reach", "--out", "f.ckpt", "--set", "finetune.clip_eps=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.clip_eps"));

    std::fs::write(dir.path().join("bad.toml"), "[finetune]\nlambda = \"lots\"\n").unwrap();
    let out = run(dir.path(), &["eval", "--config", "bad.toml", "--ckpt", "p.ckpt", "--task", "reach"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.lambda"));

    let out = run(dir.path(), &with_tiny(&["eval", "--ckpt", "missing.ckpt", "--task", "reach"]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let d = d.path();
        make_checkpoint(d, "6");
        ok(d, &with_tiny(&[
            "finetune", "--ckpt", "p.ckpt", "--task", "push", "--out", "f.ckpt", "--seed", "5",
            "--set", "finetune.episodes=6", "--set", "finetune.n_init=2", "--set", "finetune.p_step=2",
        ]));
        ok(d, &with_tiny(&["export-traj", "--ckpt", "f.ckpt", "--task", "push", "-n", "2", "--out", "t.csv", "--seed", "2"]));
        let report = ok(d, &["report", "--in", "f.ckpt.metrics.csv", "other=f.ckpt.metrics.csv", "--out", "r.txt"]);
        assert_eq!(report.lines().count(), 3);
    }
    for file in ["d.bin", "d.bin.manifest", "p.ckpt", "p.ckpt.metrics.csv", "f.ckpt", "f.ckpt.metrics.csv", "t.csv", "r.txt"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
}
