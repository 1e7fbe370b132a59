//! Pipeline stages shared by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::benchmark::{gen_benchmark, Benchmark, Split};
use super::report::{evaluate, Report};
use super::Profile;
use crate::agents::BehaviorVector;
use crate::baselines::{calibrate_day, DayTarget, SearchConfig, SearchMethod};
use crate::error::{Error, Result};
use crate::features::{self, FeatureNormalizer, FeatureVector};
use crate::metamarket::{self, CalibrationRow, MetaCorpus, MetaCurve, MetaDay, MetaMarket, WINDOW};
use crate::seed::{self, tag};
use crate::simulator::Simulator;
use crate::state::{MarketState, StateNormalizer};
use crate::surrogate::{self, DatasetDay, SurrogateCurve, SurrogateDataset, SurrogateNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Calisim,
    /// Calibrator trained without the state-consistency term.
    CalisimWs0,
    Randsearch,
    Bayesopt,
    GroundTruth,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Calisim,
        Method::CalisimWs0,
        Method::Randsearch,
        Method::Bayesopt,
        Method::GroundTruth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Calisim => "calisim",
            Self::CalisimWs0 => "calisim_ws0",
            Self::Randsearch => "randsearch",
            Self::Bayesopt => "bayesopt",
            Self::GroundTruth => "ground_truth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidInput(format!(
                "unknown day selection `{other}` (train, test, all)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::All => "all",
        }
    }

    fn admits(self, split: Split) -> bool {
        match self {
            Self::Train => split == Split::Train,
            Self::Test => split == Split::Test,
            Self::All => split != Split::Warmup,
        }
    }
}

/// Output paths under one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn surrogate(&self) -> PathBuf {
        self.root.join("surrogate")
    }

    pub fn metamarket(&self) -> PathBuf {
        self.root.join("metamarket")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn calibration_csv(&self, m: Method) -> PathBuf {
        self.calibration().join(format!("{}.csv", m.name()))
    }

    pub fn calibration_manifest(&self, m: Method) -> PathBuf {
        self.calibration().join(format!("{}.toml", m.name()))
    }

    pub fn meta_checkpoint(&self, m: Method) -> PathBuf {
        self.metamarket().join(format!("{}.ckpt", m.name()))
    }
}

/// One method's calibrations with its simulator-call count.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub method: Method,
    pub rows: Vec<CalibrationRow>,
    pub calls: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationManifest {
    method: Method,
    days: String,
    rows: usize,
    simulator_calls: u64,
}

impl CalibrationSet {
    pub fn save(&self, layout: &Layout, sel: SplitSel) -> Result<()> {
        std::fs::create_dir_all(layout.calibration())?;
        metamarket::write_calibration_csv(&self.rows, File::create(layout.calibration_csv(self.method))?)?;
        let m = CalibrationManifest {
            method: self.method,
            days: sel.name().into(),
            rows: self.rows.len(),
            simulator_calls: self.calls,
        };
        std::fs::write(layout.calibration_manifest(self.method), toml::to_string(&m)?)?;
        Ok(())
    }

    pub fn load(layout: &Layout, method: Method) -> Result<Self> {
        let csv_path = layout.calibration_csv(method);
        let file = File::open(&csv_path).map_err(|e| Error::MissingInput(format!("{}: {e}", csv_path.display())))?;
        let rows = metamarket::read_calibration_csv(file)?;
        let man_path = layout.calibration_manifest(method);
        let text = std::fs::read_to_string(&man_path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", man_path.display())))?;
        let m: CalibrationManifest = toml::from_str(&text)?;
        Ok(Self {
            method,
            rows,
            calls: m.simulator_calls,
        })
    }
}

/// Training days as surrogate dataset days.
pub fn surrogate_days(bench: &Benchmark) -> Vec<DatasetDay> {
    bench
        .split(Split::Train)
        .map(|d| DatasetDay {
            day: d.day,
            open_price: d.open_price,
            fundamental: d.fundamental.clone(),
        })
        .collect()
}

fn stage_seed(profile: &Profile, bench: &Benchmark, stage: u64) -> u64 {
    seed::derive(bench.seed, &[stage, profile.seed])
}

/// Base seed of the search calibrators for this run.
pub fn search_seed(profile: &Profile, bench: &Benchmark) -> u64 {
    stage_seed(profile, bench, tag::RANDSEARCH)
}

pub fn train_surrogate_stage(
    profile: &Profile,
    bench: &Benchmark,
) -> Result<(SurrogateNet, SurrogateCurve, SurrogateDataset)> {
    let sim = Simulator::new(bench.sim.clone())?;
    let s = stage_seed(profile, bench, tag::SURROGATE_DATA);
    let ds = surrogate::build_dataset(&surrogate_days(bench), profile.surrogate.draws_per_day, &sim, s)?
        .split(profile.surrogate.val_fraction, s)?;
    let (net, curve) = surrogate::train_surrogate(&ds, &profile.surrogate.train_config(s))?;
    Ok((net, curve, ds))
}

pub fn fund_input(bench: &Benchmark, day: usize) -> Vec<f64> {
    let d = &bench.days[day];
    d.fundamental.log_relative(d.open_price as f64 * bench.sim.tick_size)
}

/// Warm-up and training days, with the training days as targets.
pub fn meta_corpus(bench: &Benchmark) -> MetaCorpus {
    let days = bench
        .days
        .iter()
        .filter(|d| d.split != Split::Test)
        .map(|d| MetaDay {
            day: d.day,
            features: d.features,
            fund: fund_input(bench, d.day),
            state: d.state,
            truth: Some(d.truth),
        })
        .collect();
    MetaCorpus {
        days,
        first_target: bench.config.warmup_days,
    }
}

fn train_states(bench: &Benchmark) -> Vec<MarketState> {
    bench.split(Split::Train).filter_map(|d| d.state).collect()
}

/// Trains one calibrator arm; `w_s` overrides the profile's weight.
pub fn train_metamarket_stage(
    profile: &Profile,
    bench: &Benchmark,
    sur: &SurrogateNet,
    w_s: f64,
) -> Result<(MetaMarket, MetaCurve)> {
    let state_norm = StateNormalizer::fit(&train_states(bench))?;
    let s = stage_seed(profile, bench, tag::TRAIN);
    let mut mm = MetaMarket::new(sur.normalizer.clone(), state_norm, s)?;
    let cfg = metamarket::MetaTrainConfig {
        w_s,
        seed: s,
        ..profile.training.clone()
    };
    let curve = metamarket::train(&mut mm, &meta_corpus(bench), sur, &cfg)?;
    Ok((mm, curve))
}

fn selected(bench: &Benchmark, sel: SplitSel) -> impl Iterator<Item = usize> + '_ {
    bench.days.iter().filter(move |d| sel.admits(d.split)).map(|d| d.day)
}

/// The WINDOW days of features ending at `day`.
pub fn feature_window(bench: &Benchmark, day: usize) -> Result<Vec<FeatureVector>> {
    if day + 1 < WINDOW {
        return Err(Error::InsufficientHistory {
            need: WINDOW,
            have: day + 1,
        });
    }
    Ok(bench.days[day + 1 - WINDOW..=day].iter().map(|d| d.features).collect())
}

/// One-shot calibration; never touches a simulator.
pub fn calibrate_calisim(bench: &Benchmark, mm: &MetaMarket, method: Method, sel: SplitSel) -> Result<CalibrationSet> {
    let rows = selected(bench, sel)
        .map(|t| {
            let state = bench.days[t]
                .state
                .ok_or_else(|| Error::MissingInput(format!("market state of day {t}")))?;
            Ok(CalibrationRow {
                day: t,
                behavior: mm.infer(&feature_window(bench, t)?, &state)?,
                source: method.name().into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSet { method, rows, calls: 0 })
}

pub fn calibrate_ground_truth(bench: &Benchmark, sel: SplitSel) -> CalibrationSet {
    let rows = selected(bench, sel)
        .map(|t| CalibrationRow {
            day: t,
            behavior: bench.days[t].truth_behavior(),
            source: Method::GroundTruth.name().into(),
        })
        .collect();
    CalibrationSet {
        method: Method::GroundTruth,
        rows,
        calls: 0,
    }
}

/// Per-day search; days run in parallel on one counting simulator.
pub fn calibrate_search(
    method: SearchMethod,
    bench: &Benchmark,
    norm: &FeatureNormalizer,
    cfg: &SearchConfig,
    base_seed: u64,
    sel: SplitSel,
) -> Result<CalibrationSet> {
    let sim = Simulator::new(bench.sim.clone())?;
    let days: Vec<usize> = selected(bench, sel).collect();
    let rows = days
        .par_iter()
        .map(|&t| {
            let d = &bench.days[t];
            let target = DayTarget {
                day: t,
                features: d.features,
                fundamental: d.fundamental.clone(),
                open_price: d.open_price,
            };
            let (b, _) = calibrate_day(method, &target, &sim, norm, cfg, base_seed)?;
            Ok(CalibrationRow {
                day: t,
                behavior: b,
                source: method.name().into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = match method {
        SearchMethod::RandSearch => Method::Randsearch,
        SearchMethod::BayesOpt => Method::Bayesopt,
    };
    Ok(CalibrationSet {
        method: m,
        rows,
        calls: sim.calls(),
    })
}

/// Simulates each row's behavior on its day with a seed derived from
/// `(bench seed, stage tag, day)` and returns the reconstruction errors
/// against the target features.
pub fn replay(
    bench: &Benchmark,
    behaviors: &[(usize, BehaviorVector)],
    norm: &FeatureNormalizer,
    stage: u64,
) -> Result<Vec<f64>> {
    let sim = Simulator::new(bench.sim.clone())?;
    behaviors
        .par_iter()
        .map(|&(t, ref b)| {
            let d = bench
                .days
                .get(t)
                .ok_or_else(|| Error::InvalidInput(format!("day {t} is not in the benchmark")))?;
            let s = seed::derive(bench.seed, &[stage, t as u64]);
            let wrap = |e: Error| Error::Simulation {
                day: t,
                draw: 0,
                source: Box::new(e),
            };
            let stream = sim.run(b, &d.fundamental, d.open_price, s).map_err(wrap)?;
            let q = features::extract(&stream).map_err(wrap)?;
            Ok(features::reconstruction_error(&q, &d.features, norm))
        })
        .collect()
}

/// Everything one pipeline run produced.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub bench: Benchmark,
    pub surrogate_curve: SurrogateCurve,
    pub meta_curve: MetaCurve,
    pub ablation_curve: MetaCurve,
    pub report: Report,
    /// Seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    profile: &'a Profile,
    bench_seed: u64,
    checkpoints: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    simulator_calls: BTreeMap<String, u64>,
    timings_seconds: BTreeMap<String, f64>,
}

/// gen-benchmark, train-surrogate, both calibrator arms, all calibrations
/// on the test split, and evaluation. Writes everything under `out` when
/// given.
pub fn run_pipeline(profile: &Profile, out: Option<&Path>) -> Result<PipelineOutcome> {
    profile.validate()?;
    let layout = out.map(Layout::new);
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        log::info!("{name} done in {:.1}s", clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let bench = gen_benchmark(&profile.benchmark, &profile.simulator, profile.seed)?;
    if let Some(l) = &layout {
        bench.save(&l.bench())?;
    }
    lap("gen-benchmark", &mut timings);

    let (sur, sur_curve, ds) = train_surrogate_stage(profile, &bench)?;
    if let Some(l) = &layout {
        std::fs::create_dir_all(l.surrogate())?;
        sur.save(&l.surrogate().join("surrogate.ckpt"))?;
        sur_curve.write_csv(File::create(l.surrogate().join("curve.csv"))?)?;
        ds.write_csv(File::create(l.surrogate().join("dataset.csv"))?)?;
    }
    lap("train-surrogate", &mut timings);

    let (mm, meta_curve) = train_metamarket_stage(profile, &bench, &sur, profile.training.w_s)?;
    let (mm0, ablation_curve) = train_metamarket_stage(profile, &bench, &sur, 0.0)?;
    if let Some(l) = &layout {
        std::fs::create_dir_all(l.metamarket())?;
        mm.save(&l.meta_checkpoint(Method::Calisim))?;
        mm0.save(&l.meta_checkpoint(Method::CalisimWs0))?;
        meta_curve.write_csv(File::create(l.metamarket().join("calisim_curve.csv"))?)?;
        ablation_curve.write_csv(File::create(l.metamarket().join("calisim_ws0_curve.csv"))?)?;
    }
    lap("train-metamarket", &mut timings);

    let sel = SplitSel::Test;
    let search_seed = search_seed(profile, &bench);
    let sets = vec![
        calibrate_calisim(&bench, &mm, Method::Calisim, sel)?,
        calibrate_calisim(&bench, &mm0, Method::CalisimWs0, sel)?,
        calibrate_search(
            SearchMethod::RandSearch,
            &bench,
            &sur.normalizer,
            &profile.search,
            search_seed,
            sel,
        )?,
        calibrate_search(
            SearchMethod::BayesOpt,
            &bench,
            &sur.normalizer,
            &profile.search,
            search_seed,
            sel,
        )?,
        calibrate_ground_truth(&bench, sel),
    ];
    if let Some(l) = &layout {
        for s in &sets {
            s.save(l, sel)?;
        }
    }
    lap("calibrate", &mut timings);

    let report = evaluate(&bench, &sur.normalizer, &sets, &Method::ALL)?;
    if let Some(l) = &layout {
        report.write(&l.report())?;
    }
    lap("evaluate", &mut timings);

    if let Some(l) = &layout {
        let s = |p: PathBuf| p.display().to_string();
        let manifest = RunManifest {
            profile,
            bench_seed: bench.seed,
            checkpoints: BTreeMap::from([
                ("surrogate".to_string(), s(l.surrogate().join("surrogate.ckpt"))),
                ("calisim".to_string(), s(l.meta_checkpoint(Method::Calisim))),
                ("calisim_ws0".to_string(), s(l.meta_checkpoint(Method::CalisimWs0))),
            ]),
            outputs: BTreeMap::from([
                ("bench".to_string(), s(l.bench())),
                ("calibration".to_string(), s(l.calibration())),
                ("report".to_string(), s(l.report())),
            ]),
            simulator_calls: sets.iter().map(|c| (c.method.name().to_string(), c.calls)).collect(),
            timings_seconds: timings.iter().cloned().collect(),
        };
        std::fs::write(l.root.join("manifest.toml"), toml::to_string(&manifest)?)?;
    }

    Ok(PipelineOutcome {
        bench,
        surrogate_curve: sur_curve,
        meta_curve,
        ablation_curve,
        report,
        timings,
    })
}
