//! End-to-end tests of the `cfil` binary: every subcommand, the exit-code
//! scheme, seed precedence, and byte-level determinism of outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfil() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cfil"));
    cmd.env_remove("CFIL_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    cfil().args(args).output().expect("spawn cfil")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_tiny(dir: &Path, seed: &str) {
    let out = run(&[
        "gen-data",
        "--families",
        "10",
        "--rho",
        "0.9",
        "--sigma",
        "0.05",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    assert_code(&out, 0);
}

#[test]
fn help_screens_exit_zero() {
    for sub in ["gen-data", "train", "eval", "gradcheck"] {
        let out = run(&[sub, "--help"]);
        assert_code(&out, 0);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed"), "{sub} help must document --seed");
    }
    assert_code(&run(&["--help"]), 0);
}

#[test]
fn gen_data_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    let out = run(&[
        "gen-data", "--families", "50", "--rho", "0.9",
        "--out", d1.to_str().unwrap(), "--seed", "7",
    ]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("50 positive + 50 negative"), "{text}");

    let manifest = fs::read_to_string(d1.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 100);

    let out = run(&[
        "gen-data", "--families", "50", "--rho", "0.9",
        "--out", d2.to_str().unwrap(), "--seed", "7",
    ]);
    assert_code(&out, 0);
    assert_eq!(
        fs::read(d1.join("manifest.csv")).unwrap(),
        fs::read(d2.join("manifest.csv")).unwrap()
    );
    // Every referenced image byte-identical too.
    for entry in fs::read_dir(d1.join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(d1.join("images").join(&name)).unwrap(),
            fs::read(d2.join("images").join(&name)).unwrap(),
            "image {name:?} differs between identical runs"
        );
    }
}

#[test]
fn gen_data_rejects_too_few_families() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data", "--families", "3",
        "--out", tmp.path().to_str().unwrap(), "--seed", "1",
    ]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("5"), "message should mention the 5-fold minimum: {err}");
}

#[test]
fn seed_precedence_flag_env_file_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfil.conf");
    fs::write(&cfg, "seed=9\nfamilies=10\n").unwrap();

    // File supplies the seed when no flag/env is present.
    let d_file = tmp.path().join("file");
    let out = cfil()
        .args(["gen-data", "--out", d_file.to_str().unwrap(), "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=9"));

    // Env beats file.
    let d_env = tmp.path().join("env");
    let out = cfil()
        .args(["gen-data", "--out", d_env.to_str().unwrap(), "--config", cfg.to_str().unwrap()])
        .env("CFIL_SEED", "11")
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=11"));

    // Flag beats env.
    let d_flag = tmp.path().join("flag");
    let out = cfil()
        .args([
            "gen-data", "--out", d_flag.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(), "--seed", "13",
        ])
        .env("CFIL_SEED", "11")
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=13"));

    // Same seed through different channels produces identical datasets.
    let d_env2 = tmp.path().join("env2");
    let out = cfil()
        .args(["gen-data", "--families", "10", "--out", d_env2.to_str().unwrap()])
        .env("CFIL_SEED", "9")
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(
        fs::read(d_file.join("manifest.csv")).unwrap(),
        fs::read(d_env2.join("manifest.csv")).unwrap()
    );
}

#[test]
fn train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");

    let run1 = tmp.path().join("run1");
    let out = run(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--epochs", "3",
        "--batch", "8",
        "--width-scale", "1/8",
        "--sign-mode", "as-algorithm",
        "--out", run1.to_str().unwrap(),
        "--seed", "5",
    ]);
    assert_code(&out, 0);

    // Schedule shows in the log file exactly: 0.001, 0.001, 0.0005.
    let log = fs::read_to_string(run1.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,mean_loss,train_acc");
    assert!(lines[1].starts_with("1,0.001,"), "{}", lines[1]);
    assert!(lines[2].starts_with("2,0.001,"), "{}", lines[2]);
    assert!(lines[3].starts_with("3,0.0005,"), "{}", lines[3]);

    // Re-running with the same flags/seed reproduces the checkpoint bitwise.
    let run2 = tmp.path().join("run2");
    let out = run(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--epochs", "3",
        "--batch", "8",
        "--width-scale", "1/8",
        "--sign-mode", "as-algorithm",
        "--out", run2.to_str().unwrap(),
        "--seed", "5",
    ]);
    assert_code(&out, 0);
    assert_eq!(
        fs::read(run1.join("checkpoint.cfnt")).unwrap(),
        fs::read(run2.join("checkpoint.cfnt")).unwrap()
    );

    // Evaluate twice: identical outputs.
    let eval1 = tmp.path().join("eval1");
    let out = run(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--checkpoint", run1.join("checkpoint.cfnt").to_str().unwrap(),
        "--out", eval1.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("auc"), "{stdout}");
    for f in ["report.csv", "roc.csv", "roc.svg"] {
        assert!(eval1.join(f).is_file(), "missing {f}");
    }
    let eval2 = tmp.path().join("eval2");
    let out = run(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--checkpoint", run1.join("checkpoint.cfnt").to_str().unwrap(),
        "--out", eval2.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for f in ["report.csv", "roc.csv", "roc.svg"] {
        assert_eq!(
            fs::read(eval1.join(f)).unwrap(),
            fs::read(eval2.join(f)).unwrap(),
            "{f} differs between identical eval runs"
        );
    }

    // --on-train evaluates the other side of the split.
    let eval3 = tmp.path().join("eval3");
    let out = run(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--checkpoint", run1.join("checkpoint.cfnt").to_str().unwrap(),
        "--out", eval3.to_str().unwrap(),
        "--on-train",
    ]);
    assert_code(&out, 0);
    let rep = fs::read_to_string(eval3.join("report.csv")).unwrap();
    // 10 families: 8 train families -> 16 train pairs at fold 1.
    let total: u64 = rep
        .lines()
        .filter(|l| l.starts_with("count,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 16);
}

#[test]
fn train_rejects_bad_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");
    let out = run(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--fold", "6",
        "--epochs", "1",
        "--out", tmp.path().join("x").to_str().unwrap(),
        "--seed", "1",
    ]);
    assert_code(&out, 2);
}

#[test]
fn eval_missing_checkpoint_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");
    let out = run(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--checkpoint", tmp.path().join("nope.cfnt").to_str().unwrap(),
        "--out", tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn eval_corrupt_checkpoint_is_incompatible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");
    let run1 = tmp.path().join("run1");
    let out = run(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--epochs", "1",
        "--batch", "8",
        "--width-scale", "1/8",
        "--out", run1.to_str().unwrap(),
        "--seed", "5",
    ]);
    assert_code(&out, 0);
    let ckpt = run1.join("checkpoint.cfnt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4] = 99; // forge an unsupported container version
    fs::write(&ckpt, bytes).unwrap();
    let out = run(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--fold", "1",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--out", tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_code(&out, 4);
}

#[test]
fn gradcheck_passes_and_gates() {
    let out = run(&["gradcheck", "--trials", "3", "--seed", "4"]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("numerics ops"), "{text}");
    assert!(text.contains("weighted ops"), "{text}");
    assert!(text.contains("network end-to-end"), "{text}");

    // An unachievable tolerance must fail with exit 1 and name the worst op.
    let out = run(&["gradcheck", "--trials", "2", "--tolerance", "0", "--seed", "4"]);
    assert_code(&out, 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("worst op"), "{text}");

    // Deterministic per seed.
    let a = run(&["gradcheck", "--trials", "2", "--seed", "9"]);
    let b = run(&["gradcheck", "--trials", "2", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
}
