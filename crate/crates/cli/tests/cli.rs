//! Exit codes, error messages and a tiny end-to-end run of the binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
[simulator]
n_agents = 60
slots_per_day = 1200
alpha_ref = 1e-5
[benchmark]
train_days = 16
test_days = 3
[surrogate]
draws_per_day = 2
epochs = 5
[training]
epochs = 2
val_days = 4
[search]
trials = 4
warm_start = 2
"#;

fn calisim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calisim"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = calisim(dir.path(), &["evaluate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn evaluate_without_calibrations_names_the_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = calisim(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("missing input") && e.contains("calibration"), "{e}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[surrogate]\nlr = -1.0\n").unwrap();
    let o = calisim(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-benchmark"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surrogate.lr"), "{}", stderr(&o));

    std::fs::write(&cfg, "[training]\nwarp = 3\n").unwrap();
    let o = calisim(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-benchmark"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warp"), "{}", stderr(&o));
}

#[test]
fn unknown_profile_and_bad_behavior_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = calisim(dir.path(), &["--profile", "huge", "gen-benchmark"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("huge"));
    let o = calisim(dir.path(), &["simulate", "--behavior", "1,1,1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("5 values"), "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.to_str().unwrap()];
        all.extend_from_slice(args);
        let o = calisim(&out, &all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen-benchmark"]);
    assert!(out.join("bench/manifest.toml").exists());
    run(&["train-surrogate"]);
    run(&["train-metamarket"]);
    run(&["calibrate", "--method", "calisim"]);
    run(&["calibrate", "--method", "randsearch"]);
    let table = run(&["evaluate"]);
    assert!(table.contains("calisim") && table.contains("randsearch"), "{table}");
    let h = run(&["hypothesize", "--day", "37", "--set", "cpi=3.0"]);
    assert!(h.contains("delta_norm"), "{h}");

    let s = run(&["simulate", "--behavior", "1,1,1,1000,0.2", "--seed", "3"]);
    let stream = out.join("streams/stream");
    let q = run(&["extract-features", "--stream", stream.to_str().unwrap()]);
    // The features printed by both commands agree.
    let tail = |t: &str| {
        t.lines()
            .filter(|l| l.contains(" = "))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(tail(&s), tail(&q));
    assert_eq!(tail(&q).len(), 13);
}
