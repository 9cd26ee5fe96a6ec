use std::fs;
use std::path::Path;
use std::process::Command;

use probprompt::trainer::{TrainConfig, CSV_HEADER};
use probprompt_cli::{load_config, run, write_atomic, EXIT_OK, EXIT_USAGE};

const BIN: &str = env!("CARGO_BIN_EXE_probprompt");

/// Small enough to train in well under a second per step.
const TINY: &str = r#"{"steps": 4, "eval_every": 2, "heldout_scenes": 8, "d": 16, "batch_size": 2, "N": 3, "L": 2}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["probprompt"];
    argv.extend_from_slice(args);
    run(argv)
}

#[test]
fn empty_config_is_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(Path::new(&write(dir.path(), "c.json", "{}"))).unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert_eq!((cfg.k, cfg.n, cfg.weights.beta), (3, 15, 1e-5));
}

#[test]
fn config_errors_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_config(Path::new(&write(dir.path(), "a.json", r#"{"K": 0}"#))).unwrap_err();
    assert!(e.to_string().contains("K >= 1"), "{e}");
    let e = load_config(Path::new(&write(dir.path(), "b.json", r#"{"K": 2, "N": 15}"#))).unwrap_err();
    assert!(e.to_string().contains("divisible"), "{e}");
    let e = load_config(Path::new(&write(dir.path(), "c.json", "{\n  \"K\": 3,\n  oops\n}"))).unwrap_err();
    assert!(e.to_string().contains("line 3 column"), "{e}");
    let e = load_config(Path::new(&write(dir.path(), "d.json", r#"{"kk": 1}"#))).unwrap_err();
    assert!(e.to_string().contains("unknown field"), "{e}");
}

#[test]
fn config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(Path::new(&write(dir.path(), "c.json", TINY))).unwrap();
    let again = load_config(Path::new(&write(dir.path(), "d.json", &cfg.to_json()))).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["bogus"]), EXIT_USAGE);
    assert_eq!(cli(&["gradcheck", "--nope"]), EXIT_USAGE);
    assert_eq!(cli(&[]), EXIT_USAGE);
    assert_eq!(cli(&["train", "--out", "/nonexistent/x"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn bad_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"K": 0}"#);
    let out = dir.path().join("out");
    assert_eq!(cli(&["train", "--config", &c, "--out", out.to_str().unwrap()]), EXIT_USAGE);
    assert!(!out.exists());
}

fn train(dir: &Path, config: &str, out: &str, extra: &[&str]) -> String {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    assert_eq!(cli(&args), EXIT_OK);
    out.to_string_lossy().into_owned()
}

#[test]
fn train_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", TINY);
    let a = train(dir.path(), &c, "a", &[]);
    let b = train(dir.path(), &c, "b", &[]);
    for f in ["metrics.csv", "train_log.csv", "checkpoint.json"] {
        let x = fs::read(Path::new(&a).join(f)).unwrap();
        let y = fs::read(Path::new(&b).join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let metrics = fs::read_to_string(Path::new(&a).join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // evaluations at steps 0, 2, 4
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("4,"));
    let log = fs::read_to_string(Path::new(&a).join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&a).join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["format"], "probprompt-checkpoint");
    assert_eq!(ckpt["version"], 1);
    assert_eq!(ckpt["config"]["d"], 16);
    assert!(ckpt["params"][0]["name"].is_string());
}

#[test]
fn zero_steps_emits_only_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", TINY);
    let out = train(dir.path(), &c, "z", &["--steps", "0"]);
    let metrics = fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", TINY);
    let full = train(dir.path(), &c, "full", &[]);
    let half = train(dir.path(), &c, "half", &["--steps", "2"]);
    let ckpt = Path::new(&half).join("checkpoint.json");
    let resumed = dir.path().join("resumed");
    assert_eq!(
        cli(&[
            "train",
            "--resume",
            ckpt.to_str().unwrap(),
            "--out",
            resumed.to_str().unwrap(),
            "--steps",
            "4"
        ]),
        EXIT_OK
    );
    for f in ["metrics.csv", "train_log.csv"] {
        assert_eq!(
            fs::read(Path::new(&full).join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", TINY);
    let run_with = |seed: &str, out: &str| {
        let o = Command::new(BIN)
            .args(["train", "--config", &c, "--out", dir.path().join(out).to_str().unwrap(), "--steps", "1"])
            .env("PROBPROMPT_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        String::from_utf8(o.stdout).unwrap()
    };
    let out = run_with("9", "s9");
    assert!(out.lines().any(|l| l == "seed: 9"), "{out}");
    run_with("10", "s10");
    let a = fs::read(dir.path().join("s9/train_log.csv")).unwrap();
    let b = fs::read(dir.path().join("s10/train_log.csv")).unwrap();
    assert_ne!(a, b);

    let o = Command::new(BIN)
        .args(["train", "--config", &c, "--out", dir.path().join("bad").to_str().unwrap()])
        .env("PROBPROMPT_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn eval_and_analyze_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", TINY);
    let out = train(dir.path(), &c, "run", &["--steps", "1"]);
    let ckpt = Path::new(&out).join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();

    let o = Command::new(BIN).args(["eval", "--ckpt", ckpt, "--scenes", "5"]).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed: 0");
    assert_eq!(lines[1], CSV_HEADER);
    assert!(lines[2].starts_with("1,"));

    let csv = dir.path().join("report.csv");
    assert_eq!(
        cli(&["analyze", "--ckpt", ckpt, "--out", csv.to_str().unwrap(), "--scenes", "100"]),
        EXIT_OK
    );
    let report = fs::read_to_string(&csv).unwrap();
    assert!(report.starts_with("# spearman_rho="));
    let rows = report.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 101);

    assert_eq!(
        cli(&["analyze", "--ckpt", ckpt, "--out", csv.to_str().unwrap(), "--scenes", "50"]),
        EXIT_USAGE
    );
    assert_eq!(cli(&["eval", "--ckpt", "/nonexistent.json"]), EXIT_USAGE);
}

#[test]
fn export_scene_writes_pgm_and_raw_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scenes");
    assert_eq!(cli(&["export-scene", "--seed", "5", "--out", out.to_str().unwrap()]), EXIT_OK);
    let pgm = fs::read(out.join("scene_5_labels.pgm")).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 32 * 32);
    let raw = fs::read(out.join("scene_5_image.f32")).unwrap();
    assert_eq!(raw.len(), 32 * 32 * 8 * 4);
}

#[test]
fn verification_commands_pass() {
    assert_eq!(cli(&["gradcheck", "--trials", "2"]), EXIT_OK);
    assert_eq!(cli(&["moments-check"]), EXIT_OK);
}

#[test]
fn atomic_write_replaces_without_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    write_atomic(&p, b"one").unwrap();
    write_atomic(&p, b"two").unwrap();
    assert_eq!(fs::read(&p).unwrap(), b"two");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}
