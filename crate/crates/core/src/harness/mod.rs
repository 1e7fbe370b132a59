//! Configuration profiles, the synthetic ground-truth benchmark, the
//! calibration pipeline and evaluation reports.

mod benchmark;
mod pipeline;
mod report;

pub use benchmark::{gen_benchmark, BenchDay, Benchmark, BenchmarkConfig, Split};
pub use pipeline::{
    calibrate_calisim, calibrate_ground_truth, calibrate_search, feature_window, fund_input, meta_corpus, replay,
    run_pipeline, search_seed, surrogate_days, train_metamarket_stage, train_surrogate_stage, CalibrationSet, Layout,
    Method, PipelineOutcome, SplitSel,
};
pub use report::{evaluate, CorrelationTable, DayRecord, MethodSummary, Report, PUBLISHED_CORRELATIONS};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{BEHAVIOR_BOUNDS, BEHAVIOR_DIM};
use crate::baselines::SearchConfig;
use crate::error::{Error, Result};
use crate::metamarket::{self, MetaTrainConfig};
use crate::simulator::SimConfig;
use crate::surrogate::SurrogateTrainConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "CALISIM_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub draws_per_day: usize,
    pub val_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            draws_per_day: 5,
            val_fraction: 0.2,
            epochs: 300,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

impl SurrogateSection {
    pub fn train_config(&self, seed: u64) -> SurrogateTrainConfig {
        SurrogateTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.draws_per_day == 0 {
            return Err(Error::config("surrogate.draws_per_day", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("surrogate.val_fraction", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("surrogate.epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("surrogate.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("surrogate.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Network sizes. Fixed in this build; the section exists so a config
/// documents what it was run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub window: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            window: metamarket::WINDOW,
            hidden: metamarket::HIDDEN,
            lstm_layers: metamarket::LSTM_LAYERS,
        }
    }
}

impl NetworkSection {
    fn validate(&self) -> Result<()> {
        let d = Self::default();
        for (name, got, want) in [
            ("network.window", self.window, d.window),
            ("network.hidden", self.hidden, d.hidden),
            ("network.lstm_layers", self.lstm_layers, d.lstm_layers),
        ] {
            if got != want {
                return Err(Error::config(name, format!("this build supports only {want}")));
            }
        }
        Ok(())
    }
}

/// Behavior bounds, `[delta_f, delta_c, delta_n, tau, p_inst]`. Fixed in
/// this build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub lower: [f64; BEHAVIOR_DIM],
    pub upper: [f64; BEHAVIOR_DIM],
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            lower: BEHAVIOR_BOUNDS.map(|b| b.0),
            upper: BEHAVIOR_BOUNDS.map(|b| b.1),
        }
    }
}

impl BoundsSection {
    fn validate(&self) -> Result<()> {
        if *self != Self::default() {
            return Err(Error::config(
                "bounds",
                format!("this build supports only {:?}", BEHAVIOR_BOUNDS),
            ));
        }
        Ok(())
    }
}

/// Everything a pipeline run reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub seed: u64,
    pub simulator: SimConfig,
    pub benchmark: BenchmarkConfig,
    pub surrogate: SurrogateSection,
    pub training: MetaTrainConfig,
    pub search: SearchConfig,
    pub network: NetworkSection,
    pub bounds: BoundsSection,
}

impl Default for Profile {
    fn default() -> Self {
        Self::ci()
    }
}

impl Profile {
    /// Small profile for single-core test runs.
    pub fn ci() -> Self {
        Self {
            name: "ci".into(),
            seed: 0,
            simulator: SimConfig {
                n_agents: 500,
                slots_per_day: 14_400,
                alpha_ref: 1e-5,
                ..SimConfig::default()
            },
            benchmark: BenchmarkConfig::default(),
            surrogate: SurrogateSection::default(),
            training: MetaTrainConfig::default(),
            search: SearchConfig::default(),
            network: NetworkSection::default(),
            bounds: BoundsSection::default(),
        }
    }

    /// Full-size profile: a 250-day training year analog and 60 test days.
    pub fn full() -> Self {
        let mut p = Self::ci();
        p.name = "full".into();
        p.benchmark.train_days = 250;
        p.benchmark.test_days = 60;
        p.benchmark.days_per_month = 21;
        p
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "ci" => Ok(Self::ci()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (ci, full)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate().map_err(|e| prefix_field(e, "simulator"))?;
        self.benchmark.validate()?;
        self.surrogate.validate()?;
        self.training.validate().map_err(|e| prefix_field(e, "training"))?;
        self.search.validate().map_err(|e| prefix_field(e, "search"))?;
        self.network.validate()?;
        self.bounds.validate()?;
        if self.simulator.fundamental_len() < 2 {
            return Err(Error::config(
                "simulator.slots_per_day",
                "must cover at least two fundamental samples",
            ));
        }
        Ok(())
    }

    /// Parses a profile file. Fields it leaves out, including fields of a
    /// section it only partly sets, keep their `ci` values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::ci())?;
        merge(&mut base, overrides);
        let p: Self = base.try_into()?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn prefix_field(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}
