//! Synthetic ground truth: a latent fundamental and macro process, a
//! planted state-to-behavior map with temporal smoothing, and target
//! streams simulated under the planted behaviors.

use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{BehaviorVector, BEHAVIOR_DIM};
use crate::error::{Error, Result};
use crate::features::{self, FeatureVector};
use crate::lob::Ticks;
use crate::metamarket::WINDOW;
use crate::seed::{self, tag};
use crate::simulator::{FundamentalSeries, SimConfig, Simulator};
use crate::state::{self, DailyBar, MacroTable, MarketState, TradingCalendar, BAR_WINDOW, STATE_DIM};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Leading days that only provide history for states and windows.
    pub warmup_days: usize,
    pub train_days: usize,
    pub test_days: usize,
    pub days_per_month: usize,
    pub start_year: i32,
    pub start_month: u32,
    /// Row norm of the planted state map; 0 gives a state-free benchmark.
    pub state_scale: f64,
    /// Weight of yesterday's behavior in the planted recursion.
    pub persistence: f64,
    pub step_noise: f64,
    pub clip: [f64; 2],
    pub macro_persistence: f64,
    /// Mean per-interval log volatility of the fundamental.
    pub fund_vol: f64,
    pub vol_persistence: f64,
    pub vol_of_vol: f64,
    pub drift_persistence: f64,
    /// Stationary standard deviation of the per-interval drift.
    pub drift_sd: f64,
    /// Daily pull of the log price level back to the initial level.
    pub level_reversion: f64,
    pub overnight_sd: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            warmup_days: 20,
            train_days: 60,
            test_days: 20,
            days_per_month: 5,
            start_year: 2020,
            start_month: 1,
            state_scale: 0.15,
            persistence: 0.9,
            step_noise: 0.02,
            clip: [0.05, 0.95],
            macro_persistence: 0.5,
            fund_vol: 0.003,
            vol_persistence: 0.7,
            vol_of_vol: 0.3,
            drift_persistence: 0.9,
            drift_sd: 0.0006,
            level_reversion: 0.1,
            overnight_sd: 0.004,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, reason: &str| Err(Error::config(format!("benchmark.{name}"), reason));
        if self.warmup_days < BAR_WINDOW.max(WINDOW - 1) {
            return f("warmup_days", "must cover the 20-day state and feature windows");
        }
        if self.train_days < 2 {
            return f("train_days", "must be at least 2");
        }
        if self.test_days < 2 {
            return f("test_days", "must be at least 2");
        }
        if self.days_per_month == 0 {
            return f("days_per_month", "must be at least 1");
        }
        if !(1..=12).contains(&self.start_month) {
            return f("start_month", "must lie in 1..=12");
        }
        if !(self.state_scale >= 0.0 && self.state_scale.is_finite()) {
            return f("state_scale", "must be non-negative");
        }
        for (name, v) in [
            ("persistence", self.persistence),
            ("macro_persistence", self.macro_persistence),
            ("vol_persistence", self.vol_persistence),
            ("drift_persistence", self.drift_persistence),
            ("level_reversion", self.level_reversion),
        ] {
            if !(0.0..1.0).contains(&v) {
                return f(name, "must lie in [0, 1)");
            }
        }
        for (name, v) in [
            ("step_noise", self.step_noise),
            ("fund_vol", self.fund_vol),
            ("vol_of_vol", self.vol_of_vol),
            ("drift_sd", self.drift_sd),
            ("overnight_sd", self.overnight_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return f(name, "must be non-negative");
            }
        }
        if self.fund_vol <= 0.0 {
            return f("fund_vol", "must be positive");
        }
        if !(0.0 <= self.clip[0] && self.clip[0] < self.clip[1] && self.clip[1] <= 1.0) {
            return f("clip", "must satisfy 0 <= lo < hi <= 1");
        }
        Ok(())
    }

    pub fn total_days(&self) -> usize {
        self.warmup_days + self.train_days + self.test_days
    }

    pub fn split_of(&self, day: usize) -> Split {
        if day < self.warmup_days {
            Split::Warmup
        } else if day < self.warmup_days + self.train_days {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Warmup,
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchDay {
    pub day: usize,
    pub split: Split,
    pub open_price: Ticks,
    pub fundamental: FundamentalSeries,
    /// Planted behavior, normalized.
    pub truth: [f64; BEHAVIOR_DIM],
    /// State computed from the generator's own fundamental bars.
    pub generator_state: MarketState,
    pub target_seed: u64,
    pub features: FeatureVector,
    pub bar: DailyBar,
    /// State assembled from simulated bars; absent during warm-up.
    pub state: Option<MarketState>,
}

impl BenchDay {
    pub fn truth_behavior(&self) -> BehaviorVector {
        BehaviorVector::from_normalized(self.truth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub sim: SimConfig,
    /// Planted map, row-major `BEHAVIOR_DIM x STATE_DIM`.
    pub map: [[f64; STATE_DIM]; BEHAVIOR_DIM],
    pub macros: MacroTable,
    pub calendar: TradingCalendar,
    pub days: Vec<BenchDay>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchMeta {
    seed: u64,
    config: BenchmarkConfig,
    simulator: SimConfig,
    map: Vec<Vec<f64>>,
    calendar: TradingCalendar,
    /// Share of planted-behavior variance due to the state map.
    state_r2: f64,
    /// Pearson correlation between assembled and generator states per
    /// field over non-warm-up days.
    state_agreement: Vec<f64>,
}

struct Latent {
    opens: Vec<Ticks>,
    funds: Vec<FundamentalSeries>,
}

/// Log-price level, volatility and drift evolve day by day; each day's
/// path starts at the open.
fn latent_prices<R: Rng + ?Sized>(cfg: &BenchmarkConfig, sim: &SimConfig, n: usize, rng: &mut R) -> Result<Latent> {
    let base = sim.open_price as f64 * sim.tick_size;
    let len = sim.fundamental_len();
    let mut log_vol_dev = 0.0;
    let mut drift = 0.0;
    let mut level = base;
    let mut opens = Vec::with_capacity(n);
    let mut funds = Vec::with_capacity(n);
    let z = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let vol_innov = cfg.vol_of_vol * (1.0 - cfg.vol_persistence.powi(2)).sqrt();
    let drift_innov = cfg.drift_sd * (1.0 - cfg.drift_persistence.powi(2)).sqrt();
    for _ in 0..n {
        log_vol_dev = cfg.vol_persistence * log_vol_dev + vol_innov * z(rng);
        drift = cfg.drift_persistence * drift + drift_innov * z(rng);
        let vol = cfg.fund_vol * log_vol_dev.exp();
        let open = ((level / sim.tick_size).round() as Ticks).max(1);
        let mut p = open as f64 * sim.tick_size;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(p);
            p *= (drift + vol * z(rng)).exp();
        }
        let last = *values.last().expect("non-empty");
        level = last * (-cfg.level_reversion * (last / base).ln() + cfg.overnight_sd * z(rng)).exp();
        opens.push(open);
        funds.push(FundamentalSeries::new(values)?);
    }
    Ok(Latent { opens, funds })
}

fn macro_table<R: Rng + ?Sized>(
    cfg: &BenchmarkConfig,
    calendar: &TradingCalendar,
    days: usize,
    rng: &mut R,
) -> MacroTable {
    let months = (days - 1) / cfg.days_per_month + 1;
    let phi = cfg.macro_persistence;
    let innov = (1.0 - phi * phi).sqrt();
    let mut m: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let mut table = MacroTable::default();
    for k in 0..months {
        if k > 0 {
            for v in &mut m {
                let e: f64 = StandardNormal.sample(rng);
                *v = phi * *v + innov * e;
            }
        }
        let (y, mo) = calendar.month_of(k * cfg.days_per_month);
        table.insert(y, mo, 2.0 + 0.8 * m[0], 0.5 + 2.0 * m[1], 50.0 + 1.5 * m[2]);
    }
    table
}

/// Random orthogonal matrix scaled so every row has norm `scale`.
fn planted_map<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> [[f64; STATE_DIM]; BEHAVIOR_DIM] {
    let g = DMatrix::<f64>::from_fn(BEHAVIOR_DIM, STATE_DIM, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    std::array::from_fn(|i| std::array::from_fn(|j| scale * q[(i, j)]))
}

fn zscore_columns(rows: &[[f64; STATE_DIM]]) -> Vec<[f64; STATE_DIM]> {
    let cols: Vec<(f64, f64)> = (0..STATE_DIM)
        .map(|d| {
            let c: Vec<f64> = rows.iter().map(|r| r[d]).collect();
            (stats::mean(&c), stats::std_dev(&c).max(features::STD_FLOOR))
        })
        .collect();
    rows.iter()
        .map(|r| std::array::from_fn(|d| (r[d] - cols[d].0) / cols[d].1))
        .collect()
}

/// Runs the planted recursion; with `noise` false the innovations are
/// dropped (same draws consumed), giving the state-driven part.
fn planted_path<R: Rng + ?Sized>(
    cfg: &BenchmarkConfig,
    map: &[[f64; STATE_DIM]; BEHAVIOR_DIM],
    z: &[[f64; STATE_DIM]],
    rng: &mut R,
) -> (Vec<[f64; BEHAVIOR_DIM]>, Vec<[f64; BEHAVIOR_DIM]>) {
    let target = |zt: &[f64; STATE_DIM]| -> [f64; BEHAVIOR_DIM] {
        std::array::from_fn(|i| 0.5 + map[i].iter().zip(zt).map(|(a, x)| a * x).sum::<f64>())
    };
    let clip = |v: f64| v.clamp(cfg.clip[0], cfg.clip[1]);
    let mut b = target(&z[0]).map(clip);
    let mut clean = b;
    let mut noisy_path = Vec::with_capacity(z.len());
    let mut clean_path = Vec::with_capacity(z.len());
    let p = cfg.persistence;
    for zt in z {
        let t = target(zt);
        for i in 0..BEHAVIOR_DIM {
            let e: f64 = StandardNormal.sample(rng);
            b[i] = clip(p * b[i] + (1.0 - p) * t[i] + cfg.step_noise * e);
            clean[i] = clip(p * clean[i] + (1.0 - p) * t[i]);
        }
        noisy_path.push(b);
        clean_path.push(clean);
    }
    (noisy_path, clean_path)
}

fn variance_share(noisy: &[[f64; BEHAVIOR_DIM]], clean: &[[f64; BEHAVIOR_DIM]]) -> f64 {
    let mut total = 0.0;
    let mut resid = 0.0;
    for d in 0..BEHAVIOR_DIM {
        let a: Vec<f64> = noisy.iter().map(|r| r[d]).collect();
        let e: Vec<f64> = noisy.iter().zip(clean).map(|(x, y)| x[d] - y[d]).collect();
        total += stats::variance(&a);
        resid += stats::variance(&e);
    }
    if total > 0.0 {
        1.0 - resid / total
    } else {
        0.0
    }
}

/// Generates the benchmark. Latent paths and planted behaviors are drawn
/// first; target days are then simulated in parallel with per-day seeds.
pub fn gen_benchmark(cfg: &BenchmarkConfig, sim_cfg: &SimConfig, base_seed: u64) -> Result<Benchmark> {
    cfg.validate()?;
    let sim = Simulator::new(sim_cfg.clone())?;
    let n = cfg.total_days();
    let calendar = TradingCalendar {
        start_year: cfg.start_year,
        start_month: cfg.start_month,
        days_per_month: cfg.days_per_month,
    };

    let mut price_rng = seed::derived_rng(base_seed, &[tag::BENCH, 1]);
    let latent = latent_prices(cfg, sim_cfg, BAR_WINDOW + n, &mut price_rng)?;
    let macros = macro_table(cfg, &calendar, n, &mut seed::derived_rng(base_seed, &[tag::BENCH, 2]));
    let map = if cfg.state_scale > 0.0 {
        planted_map(cfg.state_scale, &mut seed::derived_rng(base_seed, &[tag::BENCH, 3]))
    } else {
        [[0.0; STATE_DIM]; BEHAVIOR_DIM]
    };

    let fund_bars = latent
        .funds
        .iter()
        .map(|f| DailyBar::from_mids(&f.values))
        .collect::<Result<Vec<_>>>()?;
    let generator_states = (0..n)
        .map(|t| {
            let window = &fund_bars[t..t + BAR_WINDOW];
            let closes: Vec<f64> = window.iter().map(|b| b.close).collect();
            let (y, m) = calendar.month_of(t);
            let [cpi, ppi, pmi] = macros.get(y, m)?;
            Ok(MarketState {
                cpi,
                ppi,
                pmi,
                trend: state::trend(window)?,
                noise: state::noise(&closes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let z = zscore_columns(&generator_states.iter().map(|s| s.to_array()).collect::<Vec<_>>());
    let (truth, _) = planted_path(cfg, &map, &z, &mut seed::derived_rng(base_seed, &[tag::BENCH, 4]));

    let simulated = (0..n)
        .into_par_iter()
        .map(|t| {
            let s = seed::derive(base_seed, &[tag::TARGET, t as u64]);
            let b = BehaviorVector::from_normalized(truth[t]);
            let wrap = |e: Error| Error::Simulation {
                day: t,
                draw: 0,
                source: Box::new(e),
            };
            let stream = sim
                .run(&b, &latent.funds[BAR_WINDOW + t], latent.opens[BAR_WINDOW + t], s)
                .map_err(wrap)?;
            let q = features::extract(&stream).map_err(wrap)?;
            let bar = DailyBar::from_stream(&stream)?;
            Ok((s, q, bar))
        })
        .collect::<Result<Vec<_>>>()?;
    let bars: Vec<DailyBar> = simulated.iter().map(|s| s.2).collect();

    let days = (0..n)
        .map(|t| {
            let split = cfg.split_of(t);
            let state = if split == Split::Warmup {
                None
            } else {
                Some(state::assemble(t, &macros, &calendar, &bars)?)
            };
            Ok(BenchDay {
                day: t,
                split,
                open_price: latent.opens[BAR_WINDOW + t],
                fundamental: latent.funds[BAR_WINDOW + t].clone(),
                truth: truth[t],
                generator_state: generator_states[t],
                target_seed: simulated[t].0,
                features: simulated[t].1,
                bar: bars[t],
                state,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        seed: base_seed,
        config: cfg.clone(),
        sim: sim_cfg.clone(),
        map,
        macros,
        calendar,
        days,
    })
}

const DAY_HEADER: [&str; 4] = ["day", "split", "open_ticks", "target_seed"];

impl Benchmark {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &BenchDay> {
        self.days.iter().filter(move |d| d.split == split)
    }

    /// Share of planted-behavior variance explained by the state-driven
    /// part of the recursion.
    pub fn state_r2(&self) -> f64 {
        let gens: Vec<[f64; STATE_DIM]> = self.days.iter().map(|d| d.generator_state.to_array()).collect();
        let z = zscore_columns(&gens);
        let mut rng = seed::derived_rng(self.seed, &[tag::BENCH, 4]);
        let (noisy, clean) = planted_path(&self.config, &self.map, &z, &mut rng);
        variance_share(&noisy, &clean)
    }

    /// Per-field Pearson correlation between assembled and generator states.
    pub fn state_agreement(&self) -> [f64; STATE_DIM] {
        let pairs: Vec<([f64; STATE_DIM], [f64; STATE_DIM])> = self
            .days
            .iter()
            .filter_map(|d| d.state.map(|s| (s.to_array(), d.generator_state.to_array())))
            .collect();
        std::array::from_fn(|k| {
            let a: Vec<f64> = pairs.iter().map(|p| p.0[k]).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1[k]).collect();
            stats::pearson(&a, &b).unwrap_or(f64::NAN)
        })
    }

    /// Largest squared normalized step of the planted behaviors.
    pub fn max_truth_step(&self) -> f64 {
        self.days
            .windows(2)
            .map(|w| {
                w[0].truth
                    .iter()
                    .zip(&w[1].truth)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = BenchMeta {
            seed: self.seed,
            config: self.config.clone(),
            simulator: self.sim.clone(),
            map: self.map.iter().map(|r| r.to_vec()).collect(),
            calendar: self.calendar,
            state_r2: self.state_r2(),
            state_agreement: self.state_agreement().to_vec(),
        };
        std::fs::write(dir.join("benchmark.toml"), toml::to_string(&meta)?)?;
        self.macros.write_csv(File::create(dir.join("macro.csv"))?)?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("days.csv"))?);
        let mut header: Vec<String> = DAY_HEADER.iter().map(|s| s.to_string()).collect();
        header.extend((1..=BEHAVIOR_DIM).map(|i| format!("truth{i}")));
        header.extend(state::STATE_NAMES.iter().map(|s| format!("gen_{s}")));
        header.extend(["bar_open", "bar_high", "bar_low", "bar_close"].map(String::from));
        out.write_record(&header)?;
        for d in &self.days {
            let mut rec = vec![
                d.day.to_string(),
                d.split.name().to_string(),
                d.open_price.to_string(),
                d.target_seed.to_string(),
            ];
            rec.extend(d.truth.iter().map(|v| v.to_string()));
            rec.extend(d.generator_state.to_array().iter().map(|v| v.to_string()));
            rec.extend([d.bar.open, d.bar.high, d.bar.low, d.bar.close].map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("fundamentals.csv"))?);
        let len = self.days.first().map_or(0, |d| d.fundamental.values.len());
        let mut header = vec!["day".to_string()];
        header.extend((1..=len).map(|i| format!("f{i}")));
        out.write_record(&header)?;
        for d in &self.days {
            let mut rec = vec![d.day.to_string()];
            rec.extend(d.fundamental.values.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;

        let feats: Vec<(usize, FeatureVector)> = self.days.iter().map(|d| (d.day, d.features)).collect();
        features::write_feature_csv(&feats, File::create(dir.join("features.csv"))?)?;
        let states: Vec<(usize, [f64; STATE_DIM])> = self
            .days
            .iter()
            .filter_map(|d| d.state.map(|s| (d.day, s.to_array())))
            .collect();
        state::write_state_csv(&states, File::create(dir.join("states.csv"))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            File::open(&p).map_err(|e| Error::MissingInput(format!("{}: {e}", p.display())))
        };
        let meta_path = dir.join("benchmark.toml");
        let meta: BenchMeta = toml::from_str(
            &std::fs::read_to_string(&meta_path)
                .map_err(|e| Error::MissingInput(format!("{}: {e}", meta_path.display())))?,
        )?;
        if meta.map.len() != BEHAVIOR_DIM || meta.map.iter().any(|r| r.len() != STATE_DIM) {
            return Err(Error::Shape("benchmark map must be 5 x 5".into()));
        }
        let map = std::array::from_fn(|i| std::array::from_fn(|j| meta.map[i][j]));
        let macros = MacroTable::read_csv(open("macro.csv")?)?;
        let feats = features::read_feature_csv(open("features.csv")?)?;
        let states = state::read_state_csv(open("states.csv")?)?;

        let mut rdr = csv::Reader::from_reader(open("fundamentals.csv")?);
        let mut funds = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidInput(format!("fundamentals.csv: {e}")))?;
            funds.push(FundamentalSeries::new(vals)?);
        }

        let mut rdr = csv::Reader::from_reader(open("days.csv")?);
        let mut days = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::InvalidInput(format!("days.csv row {}: {what}", i + 2));
            if rec.len() != 4 + BEHAVIOR_DIM + STATE_DIM + 4 {
                return Err(bad("wrong field count"));
            }
            let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|_| bad("bad number"));
            let day: usize = rec[0].trim().parse().map_err(|_| bad("bad day"))?;
            if day != i {
                return Err(bad("days must be numbered from 0 in order"));
            }
            let truth: [f64; BEHAVIOR_DIM] = [num(4)?, num(5)?, num(6)?, num(7)?, num(8)?];
            let g = MarketState::from_array([num(9)?, num(10)?, num(11)?, num(12)?, num(13)?]);
            let bar = DailyBar {
                open: num(14)?,
                high: num(15)?,
                low: num(16)?,
                close: num(17)?,
            };
            let fundamental = funds.get(i).cloned().ok_or_else(|| bad("no fundamental row"))?;
            let features = feats
                .get(i)
                .filter(|f| f.0 == day)
                .map(|f| f.1)
                .ok_or_else(|| bad("no feature row"))?;
            let state = states.iter().find(|s| s.0 == day).map(|s| MarketState::from_array(s.1));
            days.push(BenchDay {
                day,
                split: Split::parse(rec[1].trim())?,
                open_price: rec[2].trim().parse().map_err(|_| bad("bad open"))?,
                target_seed: rec[3].trim().parse().map_err(|_| bad("bad seed"))?,
                fundamental,
                truth,
                generator_state: g,
                features,
                bar,
                state,
            });
        }
        if days.len() != meta.config.total_days() {
            return Err(Error::InvalidInput(format!(
                "benchmark has {} days, config implies {}",
                days.len(),
                meta.config.total_days()
            )));
        }
        Ok(Self {
            seed: meta.seed,
            config: meta.config,
            sim: meta.simulator,
            map,
            macros,
            calendar: meta.calendar,
            days,
        })
    }
}
