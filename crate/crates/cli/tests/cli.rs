use std::path::Path;
use std::process::{Command, Output};

use kvdit_cli::checkpoint::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_kvdit");

/// A small, fast training setup on top of the defaults.
const SMALL: &str = "\
train.batch_size = 4
train.checkpoint_every = 5
train.samples = 4
schedule.sample_steps = 5
";

fn kvdit(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL).unwrap();
    }
    let mut cmd = Command::new(BIN);
    cmd.arg("--config").arg(&cfg).args(args);
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec!["train", "--steps", "10", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kvdit(dir, &args)
}

#[test]
fn train_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a", &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    let a_dir = dir.path().join("a");
    let loss = std::fs::read_to_string(a_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 11);
    assert!(loss.starts_with("step,loss\n1,"));
    for f in ["final.kvdt", "ckpt_000005.kvdt", "ckpt_000010.kvdt", "samples.ppm", "resolved.cfg", "metadata.txt"] {
        assert!(a_dir.join(f).exists(), "{f}");
    }
    assert!(std::fs::read(a_dir.join("samples.ppm")).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let b = train(dir.path(), "b", &[]);
    assert!(b.status.success());
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "loss.csv"), read("b", "loss.csv"));
    assert_eq!(read("a", "final.kvdt"), read("b", "final.kvdt"));

    // Re-running from the resolved config alone reproduces the run.
    let resolved = a_dir.join("resolved.cfg");
    let c_dir = dir.path().join("c");
    let c = Command::new(BIN)
        .args(["--config", resolved.to_str().unwrap(), "--out", c_dir.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(read("a", "loss.csv"), read("c", "loss.csv"));
    assert_eq!(read("a", "samples.ppm"), read("c", "samples.ppm"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "full", &[]).status.success());
    let ckpt = dir.path().join("full/ckpt_000005.kvdt");
    let r = train(dir.path(), "resumed", &["--resume", ckpt.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("full", "final.kvdt"), read("resumed", "final.kvdt"));
    assert_eq!(read("full", "loss.csv"), read("resumed", "loss.csv"));

    let other = train(dir.path(), "other", &["--resume", ckpt.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(other.status.code(), Some(2));
    assert!(stderr(&other).contains("seed"));
}

#[test]
fn usage_errors_exit_2_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = kvdit(dir.path(), &["train", "--set", "train.stepz=3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.stepz"));
    assert!(!out.exists());

    let o = kvdit(dir.path(), &["--threads", "2", "stats", "x.txt"]);
    assert_eq!(o.status.code(), Some(2));
    let o = kvdit(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_4_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_corpus.txt");
    let o = kvdit(dir.path(), &["stats", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("no_such_corpus.txt"));

    let bad = dir.path().join("bad.kvdt");
    std::fs::write(&bad, b"KVDT\x01\0\0\0garbage-garbage").unwrap();
    let o = kvdit(dir.path(), &["sample", "--from", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn non_finite_loss_exits_3_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "nan", &["--set", "train.lr=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let loss = std::fs::read_to_string(dir.path().join("nan/loss.csv")).unwrap();
    assert!(loss.lines().count() >= 2);
    assert!(!dir.path().join("nan/final.kvdt").exists());
}

#[test]
fn stats_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a b\na b c d\n").unwrap();
    let out = dir.path().join("s");
    let o = kvdit(dir.path(), &["stats", corpus.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    assert!(csv.contains("acl,3\n") && csv.contains("distinct_words,4\n"), "{csv}");
    let hist = std::fs::read_to_string(out.join("stats_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 14);
    assert!(hist.contains("0-25,2\n"));
    assert!(std::fs::read_to_string(out.join("resolved.cfg")).unwrap().contains("stats.corpus = "));
}

#[test]
fn bench_single_cell_and_unit_stride() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = kvdit(dir.path(), &["bench", "--Ns", "256", "--Rs", "2", "--ops", "pool", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.starts_with("N,R,operator,dtype,threads,flops_total,flops_ratio_vs_dense,median_ms,p10_ms,p90_ms,speedup_measured,reliable\n"));
    assert!(out.join("bench.svg").exists());

    let o = kvdit(dir.path(), &["bench", "--Ns", "64,256", "--Rs", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = kvdit::bench::parse_csv(&std::fs::read_to_string(out.join("bench.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.flops_ratio_vs_dense == 1.0));
}

#[test]
fn corrupted_backward_fails_checkgrad() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = kvdit(dir.path(), &["checkgrad", "--fault", "mlp_weight_scale", "--set", "checkgrad.ops=conv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("block1.mlp.fc2.weight"));
}

#[test]
fn finetune_rejects_lineage_mismatch_and_runs_unit_retrofit() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "base", &[]).status.success());
    let ckpt = dir.path().join("base/final.kvdt");
    let ck = ckpt.to_str().unwrap();
    let out = dir.path().join("ft");
    let o = kvdit(dir.path(), &["finetune", "--from", ck, "--adapt", "codec", "--set", "model.channels=64"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.channels is 32 in the checkpoint but 64 in the config"), "{}", stderr(&o));

    let o = kvdit(dir.path(), &["finetune", "--from", ck, "--adapt", "upscale", "--grid", "4x4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let args = [
        "finetune", "--from", ck, "--adapt", "kvcompress", "--op", "conv", "--stride", "1", "--budget", "2", "--seeds", "1",
        "--set", "experiment.probe_size=8", "--out", out.to_str().unwrap(),
    ];
    let o = kvdit(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("avg [0.000e0, 0.000e0, 0.000e0, 0.000e0]"), "{summary}");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "a", &[]).status.success());
    let path = dir.path().join("a/final.kvdt");
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.header.step, 10);
    assert_eq!(ck.to_bytes(), bytes);
    let again = dir.path().join("again.kvdt");
    ck.clone().into_state().map(|s| Checkpoint::from_state(&s).save(&again)).unwrap().unwrap();
    assert_eq!(std::fs::read(again).unwrap(), bytes);
}
