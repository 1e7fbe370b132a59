//! Evaluation: market replay of every calibration, per-method summaries,
//! indicator correlations, histograms, CDFs and plot scripts.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::benchmark::Benchmark;
use super::pipeline::{replay, CalibrationSet, Method};
use crate::agents::{BEHAVIOR_DIM, BEHAVIOR_NAMES};
use crate::error::{Error, Result};
use crate::features::{self, FeatureNormalizer};
use crate::seed::tag;
use crate::state::{STATE_DIM, STATE_NAMES};
use crate::stats;

/// Published mean |rho| per indicator, kept as annotations only:
/// `(method, indicator, value)`.
pub const PUBLISHED_CORRELATIONS: [(&str, &str, f64); 4] = [
    ("calisim", "cpi", 0.2555),
    ("calisim", "trend", 0.3266),
    ("bayesopt", "cpi", 0.0447),
    ("bayesopt", "trend", 0.0921),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DayRecord {
    pub method: Method,
    pub day: usize,
    pub recon: f64,
    /// Step from the previous calibrated day; absent on the first day or
    /// after a gap.
    pub variation: Option<f64>,
    pub truth_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub days: usize,
    pub calls: u64,
    pub mean_recon: f64,
    pub median_recon: f64,
    pub mean_variation: f64,
    pub median_variation: f64,
    pub mean_truth_error: f64,
}

impl MethodSummary {
    pub fn calls_per_day(&self) -> f64 {
        self.calls as f64 / self.days.max(1) as f64
    }
}

/// Pearson correlation of each indicator with each calibrated behavior
/// coordinate over the evaluated days.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrelationTable {
    /// `(method, indicator, behavior, rho)`; rho is NaN when either series
    /// is constant.
    pub cells: Vec<(Method, usize, usize, f64)>,
}

impl CorrelationTable {
    pub fn build(bench: &Benchmark, set: &CalibrationSet) -> Self {
        let mut cells = Vec::new();
        let rows: Vec<_> = set
            .rows
            .iter()
            .filter_map(|r| {
                bench
                    .days
                    .get(r.day)
                    .and_then(|d| d.state)
                    .map(|s| (s.to_array(), r.behavior.to_normalized()))
            })
            .collect();
        for k in 0..STATE_DIM {
            let x: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
            for j in 0..BEHAVIOR_DIM {
                let y: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
                cells.push((set.method, k, j, stats::pearson(&x, &y).unwrap_or(f64::NAN)));
            }
        }
        Self { cells }
    }

    /// Mean |rho| over behavior coordinates for one indicator, skipping
    /// undefined cells; NaN when none is defined.
    pub fn mean_abs(&self, method: Method, indicator: usize) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.0 == method && c.1 == indicator && c.3.is_finite())
            .map(|c| c.3.abs())
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            stats::mean(&v)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub records: Vec<DayRecord>,
    pub summaries: Vec<MethodSummary>,
    pub correlation: CorrelationTable,
    /// Expected methods without calibrations.
    pub missing: Vec<Method>,
    /// Reconstruction error of the planted behaviors rerun with fresh
    /// seeds, per evaluated day.
    pub floor: Vec<(usize, f64)>,
}

impl Report {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == m)
    }

    pub fn mean_floor(&self) -> f64 {
        let v: Vec<f64> = self.floor.iter().map(|f| f.1).collect();
        stats::mean(&v)
    }

    pub fn records_of(&self, m: Method) -> impl Iterator<Item = &DayRecord> {
        self.records.iter().filter(move |r| r.method == m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = csv::Writer::from_writer(File::create(dir.join("per_day.csv"))?);
        out.write_record(["method", "day", "recon", "variation", "truth_error"])?;
        for r in &self.records {
            out.write_record([
                r.method.name().to_string(),
                r.day.to_string(),
                r.recon.to_string(),
                r.variation.map_or(String::new(), |v| v.to_string()),
                r.truth_error.to_string(),
            ])?;
        }
        out.flush()?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("summary.csv"))?);
        out.write_record([
            "method",
            "status",
            "days",
            "simulator_calls",
            "calls_per_day",
            "mean_recon",
            "median_recon",
            "mean_variation",
            "median_variation",
            "mean_truth_error",
        ])?;
        for s in &self.summaries {
            out.write_record([
                s.method.name().to_string(),
                "ok".into(),
                s.days.to_string(),
                s.calls.to_string(),
                s.calls_per_day().to_string(),
                s.mean_recon.to_string(),
                s.median_recon.to_string(),
                s.mean_variation.to_string(),
                s.median_variation.to_string(),
                s.mean_truth_error.to_string(),
            ])?;
        }
        for m in &self.missing {
            let mut rec = vec![m.name().to_string(), "absent".into()];
            rec.extend(std::iter::repeat_n(String::new(), 8));
            out.write_record(&rec)?;
        }
        out.flush()?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("correlation.csv"))?);
        out.write_record(["method", "indicator", "behavior", "rho"])?;
        for &(m, k, j, rho) in &self.correlation.cells {
            out.write_record([m.name(), STATE_NAMES[k], BEHAVIOR_NAMES[j], &rho.to_string()])?;
        }
        out.flush()?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("correlation_summary.csv"))?);
        out.write_record(["method", "indicator", "mean_abs_rho", "published_reference"])?;
        for s in &self.summaries {
            for (k, name) in STATE_NAMES.iter().enumerate() {
                let reference = PUBLISHED_CORRELATIONS
                    .iter()
                    .find(|p| p.0 == s.method.name() && p.1 == *name)
                    .map_or(String::new(), |p| p.2.to_string());
                out.write_record([
                    s.method.name(),
                    name,
                    &self.correlation.mean_abs(s.method, k).to_string(),
                    &reference,
                ])?;
            }
        }
        out.flush()?;

        let mut out = csv::Writer::from_writer(File::create(dir.join("noise_floor.csv"))?);
        out.write_record(["day", "recon"])?;
        for (d, v) in &self.floor {
            out.write_record([d.to_string(), v.to_string()])?;
        }
        out.flush()?;

        self.write_histogram(dir)?;
        self.write_cdf(dir)?;
        write_plot_scripts(dir)?;
        Ok(())
    }

    fn write_histogram(&self, dir: &Path) -> Result<()> {
        const BINS: usize = 20;
        let all: Vec<f64> = self.records.iter().filter_map(|r| r.variation).collect();
        let hi = all.iter().copied().fold(0.0, f64::max).max(1e-12);
        let width = hi / BINS as f64;
        let mut out = csv::Writer::from_writer(File::create(dir.join("variation_hist.csv"))?);
        out.write_record(["method", "bin_lo", "bin_hi", "count"])?;
        for s in &self.summaries {
            let mut counts = [0usize; BINS];
            for v in self.records_of(s.method).filter_map(|r| r.variation) {
                counts[((v / width) as usize).min(BINS - 1)] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                out.write_record([
                    s.method.name().to_string(),
                    (b as f64 * width).to_string(),
                    ((b + 1) as f64 * width).to_string(),
                    c.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    fn write_cdf(&self, dir: &Path) -> Result<()> {
        let mut out = csv::Writer::from_writer(File::create(dir.join("recon_cdf.csv"))?);
        out.write_record(["method", "recon", "cdf"])?;
        for s in &self.summaries {
            let mut v: Vec<f64> = self.records_of(s.method).map(|r| r.recon).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            for (i, x) in v.iter().enumerate() {
                out.write_record([
                    s.method.name().to_string(),
                    x.to_string(),
                    ((i + 1) as f64 / n).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn write_plot_scripts(dir: &Path) -> Result<()> {
    let scripts: [(&str, &str); 3] = [
        (
            "plot_variation.py",
            r#"import pandas as pd
import matplotlib.pyplot as plt

h = pd.read_csv("variation_hist.csv")
fig, ax = plt.subplots()
for method, g in h.groupby("method"):
    ax.step(g["bin_lo"], g["count"], where="post", label=method)
ax.set_xlabel("behavior variation between consecutive days")
ax.set_ylabel("days")
ax.legend()
fig.savefig("variation_hist.png", dpi=150)
"#,
        ),
        (
            "plot_recon_cdf.py",
            r#"import pandas as pd
import matplotlib.pyplot as plt

c = pd.read_csv("recon_cdf.csv")
fig, ax = plt.subplots()
for method, g in c.groupby("method"):
    ax.step(g["recon"], g["cdf"], where="post", label=method)
ax.set_xlabel("reconstruction error")
ax.set_ylabel("CDF")
ax.legend()
fig.savefig("recon_cdf.png", dpi=150)
"#,
        ),
        (
            "plot_curves.py",
            r#"import pandas as pd
import matplotlib.pyplot as plt

s = pd.read_csv("../surrogate/curve.csv")
fig, ax = plt.subplots()
ax.plot(s["epoch"], s["train"], label="train")
ax.plot(s["epoch"], s["val"], label="validation")
ax.set_xlabel("epoch")
ax.set_ylabel("surrogate loss")
ax.legend()
fig.savefig("surrogate_curve.png", dpi=150)

fig, ax = plt.subplots()
for arm in ["calisim", "calisim_ws0"]:
    m = pd.read_csv(f"../metamarket/{arm}_curve.csv")
    ax.plot(m["epoch"], m["recon"], label=f"{arm} reconstruction")
ax.set_xlabel("epoch")
ax.set_ylabel("mean reconstruction error")
ax.legend()
fig.savefig("metamarket_curve.png", dpi=150)
"#,
        ),
    ];
    for (name, body) in scripts {
        File::create(dir.join(name))?.write_all(body.as_bytes())?;
    }
    Ok(())
}

/// Replays every calibration on its day and summarizes. Methods listed in
/// `expected` without a set are reported as absent.
pub fn evaluate(
    bench: &Benchmark,
    norm: &FeatureNormalizer,
    sets: &[CalibrationSet],
    expected: &[Method],
) -> Result<Report> {
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut correlation = CorrelationTable::default();
    let mut eval_days: Vec<usize> = Vec::new();
    for set in sets {
        let behaviors: Vec<_> = set.rows.iter().map(|r| (r.day, r.behavior)).collect();
        let recon = replay(bench, &behaviors, norm, tag::REPLAY)?;
        let mut recs = Vec::with_capacity(set.rows.len());
        for (i, (r, e)) in set.rows.iter().zip(&recon).enumerate() {
            let day = bench.days.get(r.day).ok_or_else(|| {
                Error::InvalidInput(format!("{} calibrates unknown day {}", set.method.name(), r.day))
            })?;
            let variation = (i > 0 && set.rows[i - 1].day + 1 == r.day)
                .then(|| features::behavior_variation(&set.rows[i - 1].behavior, &r.behavior));
            recs.push(DayRecord {
                method: set.method,
                day: r.day,
                recon: *e,
                variation,
                truth_error: features::behavior_variation(&r.behavior, &day.truth_behavior()),
            });
            eval_days.push(r.day);
        }
        let rec: Vec<f64> = recs.iter().map(|r| r.recon).collect();
        let var: Vec<f64> = recs.iter().filter_map(|r| r.variation).collect();
        let truth: Vec<f64> = recs.iter().map(|r| r.truth_error).collect();
        let med = |v: &[f64]| if v.is_empty() { f64::NAN } else { stats::median(v) };
        summaries.push(MethodSummary {
            method: set.method,
            days: recs.len(),
            calls: set.calls,
            mean_recon: stats::mean(&rec),
            median_recon: med(&rec),
            mean_variation: stats::mean(&var),
            median_variation: med(&var),
            mean_truth_error: stats::mean(&truth),
        });
        correlation.cells.extend(CorrelationTable::build(bench, set).cells);
        records.extend(recs);
    }
    eval_days.sort_unstable();
    eval_days.dedup();
    let truths: Vec<_> = eval_days.iter().map(|&t| (t, bench.days[t].truth_behavior())).collect();
    let floor_vals = replay(bench, &truths, norm, tag::FLOOR)?;
    let floor = eval_days.into_iter().zip(floor_vals).collect();
    let missing = expected
        .iter()
        .copied()
        .filter(|m| !sets.iter().any(|s| s.method == *m))
        .collect();
    Ok(Report {
        records,
        summaries,
        correlation,
        missing,
        floor,
    })
}
