//! Search calibrators: per-day random search and Gaussian-process Bayesian
//! optimization over the normalized behavior cube, scored by simulated
//! reconstruction error.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::agents::{BehaviorVector, BEHAVIOR_DIM};
use crate::error::{Error, Result};
use crate::features::{self, FeatureNormalizer, FeatureVector};
use crate::lob::Ticks;
use crate::seed;
use crate::simulator::{FundamentalSeries, Simulator};

pub type Point = [f64; BEHAVIOR_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Objective evaluations per day.
    pub trials: usize,
    /// Uniform evaluations before the GP takes over.
    pub warm_start: usize,
    /// Uniform candidates scored by expected improvement each round.
    pub candidates: usize,
    pub noise: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            warm_start: 3,
            candidates: 1024,
            noise: 1e-6,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.warm_start == 0 {
            return Err(Error::config("warm_start", "must be at least 1"));
        }
        if self.candidates == 0 {
            return Err(Error::config("candidates", "must be at least 1"));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Point,
    pub best_score: f64,
    /// Every evaluation in order.
    pub history: Vec<(Point, f64)>,
}

impl SearchResult {
    fn from_history(history: Vec<(Point, f64)>) -> Result<Self> {
        let &(best, best_score) = history
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::InvalidInput("search made no evaluations".into()))?;
        Ok(Self {
            best,
            best_score,
            history,
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R) -> Point {
    std::array::from_fn(|_| rng.random::<f64>())
}

fn check_score(x: &Point, y: f64) -> Result<f64> {
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::NonFinite(format!("objective at {x:?}")))
    }
}

/// Evaluates `trials` uniform points and keeps the best.
pub fn random_search<F, R>(mut objective: F, trials: usize, rng: &mut R) -> Result<SearchResult>
where
    F: FnMut(usize, &Point) -> Result<f64>,
    R: Rng + ?Sized,
{
    let mut history = Vec::with_capacity(trials);
    for i in 0..trials {
        let x = uniform(rng);
        let y = check_score(&x, objective(i, &x)?)?;
        history.push((x, y));
    }
    SearchResult::from_history(history)
}

/// Squared-exponential GP on standardized targets with unit signal
/// variance.
#[derive(Debug, Clone)]
pub struct GpModel {
    xs: Vec<Point>,
    pub length_scale: f64,
    pub signal_var: f64,
    /// Noise variance actually used, including any jitter.
    pub noise: f64,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub log_marginal: f64,
}

const JITTER_STEPS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

fn length_grid() -> Vec<f64> {
    let (lo, hi, n) = (0.05f64, 3.0f64, 24);
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn se_kernel(a: &Point, b: &Point, length: f64, signal_var: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    signal_var * (-0.5 * d2 / (length * length)).exp()
}

impl GpModel {
    /// Fits with the length scale maximizing the marginal likelihood over a
    /// log grid. Ill-conditioned kernels get escalating diagonal jitter.
    pub fn fit(xs: &[Point], ys: &[f64], noise: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "gp given {} points and {} values",
                xs.len(),
                ys.len()
            )));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| (v - y_mean) / y_scale));
        let mut best: Option<GpModel> = None;
        for length in length_grid() {
            let Some(m) = Self::fit_fixed(xs, &y, length, noise, y_mean, y_scale) else {
                continue;
            };
            if best.as_ref().is_none_or(|b| m.log_marginal > b.log_marginal) {
                best = Some(m);
            }
        }
        best.ok_or_else(|| Error::Numerical("gp kernel not positive definite at any jitter level".into()))
    }

    fn fit_fixed(xs: &[Point], y: &DVector<f64>, length: f64, noise: f64, y_mean: f64, y_scale: f64) -> Option<Self> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&xs[i], &xs[j], length, 1.0));
        for jitter in JITTER_STEPS {
            let total = noise + jitter;
            let mut kn = k.clone();
            for i in 0..n {
                kn[(i, i)] += total;
            }
            let Some(chol) = kn.cholesky() else {
                continue;
            };
            let alpha = chol.solve(y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let log_marginal =
                -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if !log_marginal.is_finite() {
                continue;
            }
            return Some(Self {
                xs: xs.to_vec(),
                length_scale: length,
                signal_var: 1.0,
                noise: total,
                y_mean,
                y_scale,
                chol,
                alpha,
                log_marginal,
            });
        }
        None
    }

    /// Posterior mean and variance of the latent function, in the units of
    /// the observations.
    pub fn predict(&self, x: &Point) -> (f64, f64) {
        let kx = DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .map(|p| se_kernel(p, x, self.length_scale, self.signal_var)),
        );
        let mean = kx.dot(&self.alpha);
        let v = self.chol.solve(&kx);
        let var = (self.signal_var - kx.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mean, self.y_scale * self.y_scale * var)
    }
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let improvement = best - mean;
    let sd = var.max(0.0).sqrt();
    if sd <= 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / sd;
    let n = Normal::standard();
    improvement * n.cdf(z) + sd * n.pdf(z)
}

/// Uniform warm start followed by GP rounds maximizing expected improvement
/// over uniform candidates. Returns the best observed point.
pub fn bayes_opt<F, R>(mut objective: F, cfg: &SearchConfig, rng: &mut R) -> Result<SearchResult>
where
    F: FnMut(usize, &Point) -> Result<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut history: Vec<(Point, f64)> = Vec::with_capacity(cfg.trials);
    for i in 0..cfg.trials.min(cfg.warm_start) {
        let x = uniform(rng);
        let y = check_score(&x, objective(i, &x)?)?;
        history.push((x, y));
    }
    for i in history.len()..cfg.trials {
        let xs: Vec<Point> = history.iter().map(|h| h.0).collect();
        let ys: Vec<f64> = history.iter().map(|h| h.1).collect();
        let gp = GpModel::fit(&xs, &ys, cfg.noise)?;
        let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let mut pick = (f64::NEG_INFINITY, uniform(rng));
        for _ in 0..cfg.candidates {
            let c = uniform(rng);
            let (m, v) = gp.predict(&c);
            let ei = expected_improvement(m, v, best);
            if ei > pick.0 {
                pick = (ei, c);
            }
        }
        let x = pick.1;
        let y = check_score(&x, objective(i, &x)?)?;
        history.push((x, y));
    }
    SearchResult::from_history(history)
}

/// What a search calibrator needs to score candidates on one day.
#[derive(Debug, Clone)]
pub struct DayTarget {
    pub day: usize,
    pub features: FeatureVector,
    pub fundamental: FundamentalSeries,
    pub open_price: Ticks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    RandSearch,
    BayesOpt,
}

impl SearchMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::RandSearch => "randsearch",
            Self::BayesOpt => "bayesopt",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::RandSearch => seed::tag::RANDSEARCH,
            Self::BayesOpt => seed::tag::BAYESOPT,
        }
    }
}

/// Calibrates one day by searching with simulated reconstruction error as
/// the score. Deterministic in `(base_seed, method, day)`; each trial uses
/// its own derived simulator seed.
pub fn calibrate_day(
    method: SearchMethod,
    target: &DayTarget,
    sim: &Simulator,
    norm: &FeatureNormalizer,
    cfg: &SearchConfig,
    base_seed: u64,
) -> Result<(BehaviorVector, SearchResult)> {
    cfg.validate()?;
    let day_tag = [method.tag(), target.day as u64];
    let mut rng = seed::derived_rng(base_seed, &day_tag);
    let objective = |i: usize, x: &Point| -> Result<f64> {
        let b = BehaviorVector::from_normalized(*x);
        let s = seed::derive(base_seed, &[method.tag(), target.day as u64, i as u64]);
        let wrap = |e: Error| Error::Simulation {
            day: target.day,
            draw: i,
            source: Box::new(e),
        };
        let stream = sim.run(&b, &target.fundamental, target.open_price, s).map_err(wrap)?;
        let q = features::extract(&stream).map_err(wrap)?;
        Ok(features::reconstruction_error(&q, &target.features, norm))
    };
    let result = match method {
        SearchMethod::RandSearch => random_search(objective, cfg.trials, &mut rng)?,
        SearchMethod::BayesOpt => bayes_opt(objective, cfg, &mut rng)?,
    };
    Ok((BehaviorVector::from_normalized(result.best), result))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(x: &Point) -> f64 {
        x.iter().map(|v| (v - 0.5).powi(2)).sum()
    }

    #[test]
    fn single_trial_returns_its_candidate() {
        let mut calls = 0;
        let r = random_search(
            |_, x| {
                calls += 1;
                Ok(bowl(x))
            },
            1,
            &mut seed::rng(1),
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.best, r.history[0].0);
    }

    #[test]
    fn gp_interpolates_observations() {
        let mut rng = seed::rng(2);
        let xs: Vec<Point> = (0..8).map(|_| uniform(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(bowl).collect();
        let gp = GpModel::fit(&xs, &ys, 1e-6).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, v) = gp.predict(x);
            assert!((m - y).abs() < 1e-3, "{m} vs {y}");
            assert!(v < 1e-3);
        }
    }

    #[test]
    fn gp_survives_duplicate_points() {
        let x = [0.3; BEHAVIOR_DIM];
        let gp = GpModel::fit(&[x, x, x], &[1.0, 1.0, 1.0], 1e-12).unwrap();
        assert!(gp.predict(&x).0.is_finite());
    }

    #[test]
    fn ei_zero_at_incumbent_without_variance() {
        assert_eq!(expected_improvement(1.5, 0.0, 1.5), 0.0);
        assert!(expected_improvement(1.5, 0.01, 1.5) > 0.0);
        assert_eq!(expected_improvement(1.0, 0.0, 1.5), 0.5);
    }

    #[test]
    fn bayes_opt_uses_exact_budget() {
        let mut calls = 0;
        let r = bayes_opt(
            |_, x| {
                calls += 1;
                Ok(bowl(x))
            },
            &SearchConfig::default(),
            &mut seed::rng(3),
        )
        .unwrap();
        assert_eq!(calls, 10);
        assert_eq!(r.history.len(), 10);
    }
}
