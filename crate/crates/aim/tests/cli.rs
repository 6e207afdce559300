//! The `aim` binary end to end: outputs, files and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn aim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tunable_millions(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("tunable")).expect("tunable line");
    line.split_whitespace().nth(2).unwrap().trim_end_matches('M').parse().unwrap()
}

#[test]
fn count_params_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = aim(dir.path(), &["count-params", "--preset", "vitb16", "--mode", "aim", "--classes", "400", "--ratio", "0.25"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(tunable_millions(&o).round(), 11.0);
    let frozen = aim(dir.path(), &["count-params", "--mode", "frozen", "--classes", "400"]);
    let m = tunable_millions(&frozen);
    assert!((0.1..=0.3).contains(&m), "{m}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["count-params", "--mode", "sideways"][..],
        &["count-params", "--positions", "middle"],
        &["count-params", "--ratio", "0"],
        &["count-params", "--mode", "spatial", "--temporal-pos-embed"],
        &["gradcheck", "--preset", "vitb16"],
        &["train", "--preset", "vitb16"],
        &["no-such-command"],
    ] {
        assert_eq!(aim(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = aim(dir.path(), &["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("in f64"));
    let bad = aim(dir.path(), &["gradcheck", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("relative error"));
}

const SHORT: &[&str] = &["--steps", "12", "--batch", "8", "--eval-every", "6", "--eval-samples", "64"];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SHORT);
    args.extend_from_slice(extra);
    aim(dir, &args)
}

#[test]
fn train_writes_log_checkpoint_and_run_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--checkpoint", "a.aimc", "--log", "a.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    let lines = aim::metrics::read_log(&log).unwrap();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0].step, 0);
    assert_eq!(lines[0].lr, 0.0);
    assert!(lines[5].eval_acc.is_some() && lines[11].eval_acc.is_some() && lines[4].eval_acc.is_none());
    let run = aim::conf::parse(&fs::read_to_string(dir.path().join("a.aimc.conf")).unwrap()).unwrap();
    assert_eq!(run["mode"], "aim");
    assert_eq!(run["steps"], "12");
}

#[test]
fn same_seed_same_bytes_regardless_of_prefetch() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), &["--checkpoint", "a.aimc", "--log", "a.jsonl", "--prefetch", "0"]);
    let b = train(dir.path(), &["--checkpoint", "b.aimc", "--log", "b.jsonl", "--prefetch", "4"]);
    assert!(a.status.success() && b.status.success());
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.aimc"), read("b.aimc"));
    let c = train(dir.path(), &["--checkpoint", "c.aimc", "--log", "c.jsonl", "--seed", "1"]);
    assert!(c.status.success());
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), "steps = 3\nbatch = 4\neval-samples = 16\nmode = spatial\n").unwrap();
    let o = aim(dir.path(), &["train", "--config", "run.conf", "--steps", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = aim::metrics::read_log(&fs::read_to_string(dir.path().join("run.jsonl")).unwrap()).unwrap();
    assert_eq!(lines.len(), 5);
    let run = aim::conf::parse(&fs::read_to_string(dir.path().join("run.aimc.conf")).unwrap()).unwrap();
    assert_eq!(run["mode"], "spatial");
    fs::write(dir.path().join("bad.conf"), "steps 3\n").unwrap();
    assert_eq!(aim(dir.path(), &["train", "--config", "bad.conf"]).status.code(), Some(2));
    fs::write(dir.path().join("unknown.conf"), "colour = blue\n").unwrap();
    assert_eq!(aim(dir.path(), &["train", "--config", "unknown.conf"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_one_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = aim(dir.path(), &["train", "--mode", "finetune", "--lr", "1e30", "--warmup-frac", "0", "--steps", "30", "--batch", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at step"));
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(3).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attention_dump_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), &[]).status.success());
    let o = aim(dir.path(), &["attention-dump", "--config", "run.aimc.conf", "--checkpoint", "run.aimc", "--out", "maps"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["block0_spatial.csv", "block1_spatial.csv", "block0_temporal.csv", "block1_temporal.csv"] {
        let rows = csv_rows(&dir.path().join("maps").join(name));
        assert!(!rows.is_empty());
        for r in rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{name}");
        }
    }
    let pgm = fs::read(dir.path().join("maps/block0_temporal_head0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 "));
    let out_of_range = aim(dir.path(), &["attention-dump", "--config", "run.aimc.conf", "--checkpoint", "run.aimc", "--blocks", "2"]);
    assert_eq!(out_of_range.status.code(), Some(2));
}
