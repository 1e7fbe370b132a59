//! `calisim` command line: benchmark generation, simulation, training,
//! calibration, evaluation and counterfactual queries.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use calisim::agents::{BehaviorVector, BEHAVIOR_DIM, BEHAVIOR_NAMES};
use calisim::baselines::SearchMethod;
use calisim::features::{self, FEATURE_NAMES};
use calisim::harness::{
    self, calibrate_calisim, calibrate_ground_truth, calibrate_search, feature_window, gen_benchmark, search_seed,
    train_metamarket_stage, train_surrogate_stage, Benchmark, CalibrationSet, Layout, Method, Profile, SplitSel,
};
use calisim::metamarket::MetaMarket;
use calisim::simulator::{self, FundamentalSeries, Simulator};
use calisim::state::{MarketState, STATE_NAMES};
use calisim::surrogate::SurrogateNet;

#[derive(Parser, Debug)]
#[command(
    name = "calisim",
    version,
    about = "Multi-agent market simulation and one-shot behavior calibration"
)]
struct Cli {
    /// TOML profile file; overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile.
    #[arg(long, global = true, default_value = "ci")]
    profile: String,
    /// Output root (default: $CALISIM_OUT, else ./calisim-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic ground-truth benchmark.
    GenBenchmark {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate one day and save its order stream.
    Simulate {
        /// delta_f,delta_c,delta_n,tau,p_inst
        #[arg(long)]
        behavior: String,
        /// Use this benchmark day's fundamental path and open.
        #[arg(long)]
        day: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "stream")]
        stem: String,
    },
    /// Print the 13 features of a saved stream (`dir/stem`).
    ExtractFeatures {
        #[arg(long)]
        stream: PathBuf,
    },
    /// Build the surrogate dataset from the benchmark and train on it.
    TrainSurrogate,
    /// Train the calibrator and its w_s = 0 ablation arm.
    TrainMetamarket,
    /// Calibrate benchmark days with one method.
    Calibrate {
        /// calisim | randsearch | bayesopt | ground_truth
        #[arg(long)]
        method: String,
        /// train | test | all
        #[arg(long, default_value = "test")]
        days: String,
    },
    /// Replay calibrations and write the report.
    Evaluate,
    /// Compare the calibrator's estimate under a modified market state.
    Hypothesize {
        #[arg(long)]
        day: usize,
        /// indicator=value, repeatable (cpi, ppi, pmi, trend, noise).
        #[arg(long = "set", required = true)]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let profile = match &cli.config {
        Some(p) => Profile::load(p)?,
        None => Profile::named(&cli.profile)?,
    };
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(harness::OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("calisim-out"));
    let layout = Layout::new(root);
    match cli.cmd {
        Cmd::GenBenchmark { seed } => gen_bench(profile, &layout, seed),
        Cmd::Simulate {
            behavior,
            day,
            seed,
            stem,
        } => simulate(&profile, &layout, &behavior, day, seed, &stem),
        Cmd::ExtractFeatures { stream } => extract_features(&stream),
        Cmd::TrainSurrogate => train_surrogate(&profile, &layout),
        Cmd::TrainMetamarket => train_metamarket(&profile, &layout),
        Cmd::Calibrate { method, days } => calibrate(&profile, &layout, &method, &days),
        Cmd::Evaluate => evaluate(&layout),
        Cmd::Hypothesize { day, set } => hypothesize(&layout, day, &set),
    }
}

#[derive(Serialize)]
struct StageManifest {
    stage: String,
    profile: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    stats: BTreeMap<String, f64>,
}

fn write_manifest(dir: &Path, m: &StageManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.toml"), toml::to_string(m)?)?;
    Ok(())
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn load_bench(layout: &Layout) -> Result<Benchmark> {
    Benchmark::load(&layout.bench()).context("loading benchmark (run gen-benchmark first)")
}

fn surrogate_path(layout: &Layout) -> PathBuf {
    layout.surrogate().join("surrogate.ckpt")
}

fn load_surrogate(layout: &Layout) -> Result<SurrogateNet> {
    SurrogateNet::load(&surrogate_path(layout)).context("loading surrogate (run train-surrogate first)")
}

fn load_meta(layout: &Layout, m: Method) -> Result<MetaMarket> {
    MetaMarket::load(&layout.meta_checkpoint(m)).context("loading calibrator (run train-metamarket first)")
}

fn gen_bench(mut profile: Profile, layout: &Layout, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        profile.seed = s;
    }
    let bench = gen_benchmark(&profile.benchmark, &profile.simulator, profile.seed)?;
    bench.save(&layout.bench())?;
    std::fs::write(layout.root.join("profile.toml"), profile.to_toml()?)?;
    write_manifest(
        &layout.bench(),
        &StageManifest {
            stage: "gen-benchmark".into(),
            profile: profile.name.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::from([("bench".into(), show(&layout.bench()))]),
            stats: BTreeMap::from([
                ("seed".into(), profile.seed as f64),
                ("days".into(), bench.days.len() as f64),
                ("state_r2".into(), bench.state_r2()),
            ]),
        },
    )?;
    println!(
        "benchmark: {} days (seed {}), state r2 {:.3}, written to {}",
        bench.days.len(),
        profile.seed,
        bench.state_r2(),
        layout.bench().display()
    );
    Ok(())
}

fn parse_behavior(s: &str) -> Result<BehaviorVector> {
    let vals = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("behavior value `{v}`")))
        .collect::<Result<Vec<_>>>()?;
    let arr: [f64; BEHAVIOR_DIM] = vals.try_into().map_err(|v: Vec<f64>| {
        anyhow!(
            "behavior needs {BEHAVIOR_DIM} values ({}), got {}",
            BEHAVIOR_NAMES.join(","),
            v.len()
        )
    })?;
    Ok(BehaviorVector::from_array(arr)?)
}

fn simulate(
    profile: &Profile,
    layout: &Layout,
    behavior: &str,
    day: Option<usize>,
    seed: u64,
    stem: &str,
) -> Result<()> {
    let b = parse_behavior(behavior)?;
    let (cfg, fund, open) = match day {
        Some(t) => {
            let bench = load_bench(layout)?;
            let d = bench
                .days
                .get(t)
                .ok_or_else(|| anyhow!("day {t} is not in the benchmark ({} days)", bench.days.len()))?;
            (bench.sim.clone(), d.fundamental.clone(), d.open_price)
        }
        None => {
            let cfg = profile.simulator.clone();
            let fund = FundamentalSeries::flat(cfg.open_price as f64 * cfg.tick_size, cfg.fundamental_len());
            let open = cfg.open_price;
            (cfg, fund, open)
        }
    };
    let sim = Simulator::new(cfg)?;
    let stream = sim.run(&b, &fund, open, seed)?;
    let dir = layout.root.join("streams");
    simulator::save_stream(&stream, &dir, stem)?;
    let q = features::extract(&stream)?;
    println!(
        "{} events, {} placements, {} wake-ups; saved {}",
        stream.events.len(),
        stream.count_places(),
        stream.meta.wakeups,
        dir.join(stem).display()
    );
    print_features(&q);
    Ok(())
}

fn print_features(q: &features::FeatureVector) {
    for (name, v) in FEATURE_NAMES.iter().zip(q.to_array()) {
        println!("{name} = {v}");
    }
}

fn extract_features(stream: &Path) -> Result<()> {
    let dir = stream
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stem = stream
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("--stream must be dir/stem"))?;
    let s = simulator::load_stream(dir, stem)?;
    print_features(&features::extract(&s)?);
    Ok(())
}

fn train_surrogate(profile: &Profile, layout: &Layout) -> Result<()> {
    let bench = load_bench(layout)?;
    let (net, curve, ds) = train_surrogate_stage(profile, &bench)?;
    let dir = layout.surrogate();
    std::fs::create_dir_all(&dir)?;
    net.save(&surrogate_path(layout))?;
    curve.write_csv(File::create(dir.join("curve.csv"))?)?;
    ds.write_csv(File::create(dir.join("dataset.csv"))?)?;
    write_manifest(
        &dir,
        &StageManifest {
            stage: "train-surrogate".into(),
            profile: profile.name.clone(),
            inputs: BTreeMap::from([("bench".into(), show(&layout.bench()))]),
            outputs: BTreeMap::from([
                ("checkpoint".into(), show(&surrogate_path(layout))),
                ("curve".into(), show(&dir.join("curve.csv"))),
                ("dataset".into(), show(&dir.join("dataset.csv"))),
            ]),
            stats: BTreeMap::from([
                ("initial_val".into(), curve.initial_val()),
                ("best_val".into(), curve.best_val()),
                ("best_epoch".into(), curve.best_epoch as f64),
                ("constant_baseline".into(), curve.constant_baseline),
            ]),
        },
    )?;
    println!(
        "surrogate: validation {:.4} -> {:.4} (epoch {}), constant predictor {:.4}",
        curve.initial_val(),
        curve.best_val(),
        curve.best_epoch,
        curve.constant_baseline
    );
    Ok(())
}

fn train_metamarket(profile: &Profile, layout: &Layout) -> Result<()> {
    let bench = load_bench(layout)?;
    let sur = load_surrogate(layout)?;
    let dir = layout.metamarket();
    std::fs::create_dir_all(&dir)?;
    let mut outputs = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for (m, w_s) in [(Method::Calisim, profile.training.w_s), (Method::CalisimWs0, 0.0)] {
        let (mm, curve) = train_metamarket_stage(profile, &bench, &sur, w_s)?;
        mm.save(&layout.meta_checkpoint(m))?;
        let curve_path = dir.join(format!("{}_curve.csv", m.name()));
        curve.write_csv(File::create(&curve_path)?)?;
        outputs.insert(m.name().to_string(), show(&layout.meta_checkpoint(m)));
        outputs.insert(format!("{}_curve", m.name()), show(&curve_path));
        stats.insert(format!("{}_selected_epoch", m.name()), curve.selected_epoch as f64);
        if let (Some(a), Some(z)) = (curve.first(), curve.last()) {
            println!(
                "{}: recon {:.4} -> {:.4}, variation {:.5} -> {:.5}, kept epoch {}",
                m.name(),
                a.recon,
                z.recon,
                a.variation,
                z.variation,
                curve.selected_epoch
            );
        }
    }
    write_manifest(
        &dir,
        &StageManifest {
            stage: "train-metamarket".into(),
            profile: profile.name.clone(),
            inputs: BTreeMap::from([
                ("bench".into(), show(&layout.bench())),
                ("surrogate".into(), show(&surrogate_path(layout))),
            ]),
            outputs,
            stats,
        },
    )
}

fn calibrate(profile: &Profile, layout: &Layout, method: &str, days: &str) -> Result<()> {
    let method = Method::parse(method)?;
    let sel = SplitSel::parse(days)?;
    let bench = load_bench(layout)?;
    let sets = match method {
        Method::Calisim | Method::CalisimWs0 => {
            let mut sets = vec![calibrate_calisim(
                &bench,
                &load_meta(layout, Method::Calisim)?,
                Method::Calisim,
                sel,
            )?];
            // The ablation arm rides along when its checkpoint exists.
            if layout.meta_checkpoint(Method::CalisimWs0).exists() {
                let mm0 = load_meta(layout, Method::CalisimWs0)?;
                sets.push(calibrate_calisim(&bench, &mm0, Method::CalisimWs0, sel)?);
            }
            if method == Method::CalisimWs0 {
                sets.retain(|s| s.method == Method::CalisimWs0);
                if sets.is_empty() {
                    bail!("missing input: {}", show(&layout.meta_checkpoint(Method::CalisimWs0)));
                }
            }
            sets
        }
        Method::Randsearch | Method::Bayesopt => {
            let sur = load_surrogate(layout)?;
            let sm = if method == Method::Randsearch {
                SearchMethod::RandSearch
            } else {
                SearchMethod::BayesOpt
            };
            vec![calibrate_search(
                sm,
                &bench,
                &sur.normalizer,
                &profile.search,
                search_seed(profile, &bench),
                sel,
            )?]
        }
        Method::GroundTruth => vec![calibrate_ground_truth(&bench, sel)],
    };
    for s in &sets {
        s.save(layout, sel)?;
        println!(
            "{}: {} days, {} simulator calls -> {}",
            s.method.name(),
            s.rows.len(),
            s.calls,
            layout.calibration_csv(s.method).display()
        );
    }
    Ok(())
}

fn evaluate(layout: &Layout) -> Result<()> {
    let mut sets = Vec::new();
    for m in Method::ALL {
        if layout.calibration_csv(m).exists() {
            sets.push(CalibrationSet::load(layout, m)?);
        }
    }
    if sets.is_empty() {
        bail!(
            "missing input: no calibrations under {} (run calibrate first)",
            layout.calibration().display()
        );
    }
    let bench = load_bench(layout)?;
    let sur = load_surrogate(layout)?;
    let report = harness::evaluate(&bench, &sur.normalizer, &sets, &Method::ALL)?;
    report.write(&layout.report())?;
    println!(
        "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10}",
        "method", "calls", "mean_rec", "med_var", "truth_err", "mean|rho|"
    );
    for s in &report.summaries {
        let rho: f64 = (0..STATE_NAMES.len())
            .map(|k| report.correlation.mean_abs(s.method, k))
            .sum::<f64>()
            / STATE_NAMES.len() as f64;
        println!(
            "{:<14} {:>6} {:>10.4} {:>10.5} {:>10.5} {:>10.4}",
            s.method.name(),
            s.calls,
            s.mean_recon,
            s.median_variation,
            s.mean_truth_error,
            rho
        );
    }
    for m in &report.missing {
        println!("{:<14} missing", m.name());
    }
    println!("report written to {}", layout.report().display());
    Ok(())
}

fn hypothesize(layout: &Layout, day: usize, set: &[String]) -> Result<()> {
    let bench = load_bench(layout)?;
    let mm = load_meta(layout, Method::Calisim)?;
    let d = bench
        .days
        .get(day)
        .ok_or_else(|| anyhow!("day {day} is not in the benchmark ({} days)", bench.days.len()))?;
    let factual = d
        .state
        .ok_or_else(|| anyhow!("day {day} has no assembled market state"))?;
    let mut modified = factual.to_array();
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects indicator=value, got `{kv}`"))?;
        let idx = STATE_NAMES
            .iter()
            .position(|n| *n == k.trim())
            .ok_or_else(|| anyhow!("unknown indicator `{k}` ({})", STATE_NAMES.join(", ")))?;
        modified[idx] = v.trim().parse().with_context(|| format!("value of `{k}`"))?;
    }
    let h = mm.hypothesize(
        &feature_window(&bench, day)?,
        &factual,
        &MarketState::from_array(modified),
    )?;
    println!(
        "{:<8} {:>12} {:>12} {:>12}",
        "param", "factual", "modified", "delta_norm"
    );
    for (i, name) in BEHAVIOR_NAMES.iter().enumerate() {
        println!(
            "{:<8} {:>12.6} {:>12.6} {:>12.6}",
            name,
            h.factual.to_array()[i],
            h.modified.to_array()[i],
            h.delta_norm[i]
        );
    }
    Ok(())
}
