//! Benchmark self-checks and end-to-end determinism on a tiny profile.

use calisim::harness::{gen_benchmark, run_pipeline, Benchmark, Method, Profile, Split};
use calisim::Error;

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

fn tiny() -> Profile {
    Profile::from_toml(TINY).unwrap()
}

#[test]
fn benchmark_self_checks() {
    let p = tiny();
    let b = gen_benchmark(&p.benchmark, &p.simulator, 3).unwrap();
    let c = &p.benchmark;
    assert_eq!(b.days.len(), c.warmup_days + c.train_days + c.test_days);
    assert_eq!(b.split(Split::Train).count(), c.train_days);
    assert_eq!(b.split(Split::Test).count(), c.test_days);
    for (i, d) in b.days.iter().enumerate() {
        assert_eq!(d.day, i);
        assert_eq!(d.state.is_some(), d.split != Split::Warmup, "day {i}");
        assert!(
            d.truth.iter().all(|v| (c.clip[0]..=c.clip[1]).contains(v)),
            "day {i}: {:?}",
            d.truth
        );
        assert_eq!(d.fundamental.values.len(), p.simulator.fundamental_len());
        assert!(d.features.to_array().iter().all(|v| v.is_finite()));
        // The fundamental path starts at the day's open.
        let open = d.open_price as f64 * p.simulator.tick_size;
        assert!(
            (d.fundamental.values[0] - open).abs() <= p.simulator.tick_size,
            "day {i}"
        );
    }
    let r2 = b.state_r2();
    assert!(r2 > 0.3 && r2 <= 1.0, "state r2 {r2}");
    // Steps of the planted path stay small relative to its range.
    assert!(b.max_truth_step() < 0.05, "max step {}", b.max_truth_step());
    // Macro fields of the assembled state are exact copies of the
    // generator's.
    let agree = b.state_agreement();
    for (k, a) in agree.iter().take(3).enumerate() {
        assert!((a - 1.0).abs() < 1e-9, "field {k}: {a}");
    }
}

#[test]
fn benchmark_is_seeded_and_round_trips() {
    let p = tiny();
    let a = gen_benchmark(&p.benchmark, &p.simulator, 5).unwrap();
    let b = gen_benchmark(&p.benchmark, &p.simulator, 5).unwrap();
    assert_eq!(a, b);
    let c = gen_benchmark(&p.benchmark, &p.simulator, 6).unwrap();
    assert_ne!(a.days[30].truth, c.days[30].truth);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(Benchmark::load(dir.path()).unwrap(), a);
}

#[test]
fn pipeline_is_deterministic() {
    let p = tiny();
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&p, Some(dir.path())).unwrap();
    let b = run_pipeline(&p, None).unwrap();
    assert_eq!(format!("{:?}", a.report.records), format!("{:?}", b.report.records));
    assert_eq!(
        format!("{:?}", a.meta_curve.epochs),
        format!("{:?}", b.meta_curve.epochs)
    );
    assert!(a.report.missing.is_empty());
    for m in [Method::Calisim, Method::CalisimWs0] {
        assert_eq!(a.report.summary(m).unwrap().calls, 0);
    }
    let trials = (p.search.trials * p.benchmark.test_days) as u64;
    assert_eq!(a.report.summary(Method::Randsearch).unwrap().calls, trials);
    assert_eq!(a.report.summary(Method::Bayesopt).unwrap().calls, trials);
    for f in ["manifest.toml", "bench", "surrogate/surrogate.ckpt", "report"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn hold_out_larger_than_the_corpus_is_a_config_error() {
    let mut p = tiny();
    p.training.val_days = 15;
    match run_pipeline(&p, None) {
        Err(Error::Config { field, .. }) => assert!(field.contains("val_days"), "{field}"),
        other => panic!("expected a config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn partial_sections_keep_ci_values() {
    let p = Profile::from_toml("[simulator]\nn_agents = 200\n").unwrap();
    let ci = Profile::ci();
    assert_eq!(p.simulator.n_agents, 200);
    assert_eq!(p.simulator.alpha_ref, ci.simulator.alpha_ref);
    assert_eq!(p.simulator.slots_per_day, ci.simulator.slots_per_day);
    assert_eq!(p.training, ci.training);
    assert!(Profile::from_toml("[simulator]\nagents = 1\n").is_err());
}
