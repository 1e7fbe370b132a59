//! The calibrator: an LSTM encodes the last `WINDOW` days of features into
//! an implicit code `u`, and a state analyzer maps the explicit market state
//! to the weights of a one-layer estimator `b = sigmoid(W u + c)`.
//!
//! Training runs through a frozen [`SurrogateNet`] so the reproduction loss
//! is differentiable; temporal and state-consistency terms regularize the
//! estimates across consecutive days and across fabricated states.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{BehaviorVector, BEHAVIOR_BOUNDS, BEHAVIOR_DIM};
use crate::diff::{self, Adam, Checkpoint, Linear, Lstm, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureNormalizer, FeatureVector, FEATURE_DIM};
use crate::seed::{self, tag};
use crate::state::{MarketState, StateNormalizer, STATE_DIM};
use crate::surrogate::SurrogateNet;

/// Days of features the encoder reads; the last one is the day calibrated.
pub const WINDOW: usize = 20;
pub const HIDDEN: usize = 64;
pub const LSTM_LAYERS: usize = 2;
const ANALYZER: [usize; 2] = [200, 100];
/// Parameter count of the estimator: a `BEHAVIOR_DIM x HIDDEN` weight and a
/// bias.
pub const THETA2_DIM: usize = BEHAVIOR_DIM * HIDDEN + BEHAVIOR_DIM;

#[derive(Debug, Clone)]
pub struct MetaMarket {
    pub store: ParamStore,
    lstm: Lstm,
    analyzer: [Linear; 3],
    pub feature_norm: FeatureNormalizer,
    pub state_norm: StateNormalizer,
    theta2_init: Vec<f64>,
}

/// A fabricated pair of states around a real one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub similar: [f64; STATE_DIM],
    pub dissimilar: [f64; STATE_DIM],
}

/// Factual and counterfactual estimates for one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub factual: BehaviorVector,
    pub modified: BehaviorVector,
    /// `modified - factual` in normalized coordinates.
    pub delta_norm: [f64; BEHAVIOR_DIM],
}

impl MetaMarket {
    /// Fresh calibrator. The analyzer's last projection starts at zero with
    /// its bias set to a Glorot-initialized estimator, so the initial
    /// estimate ignores the state.
    pub fn new(feature_norm: FeatureNormalizer, state_norm: StateNormalizer, init_seed: u64) -> Result<Self> {
        let mut rng = seed::derived_rng(init_seed, &[tag::INIT]);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "mm.lstm", FEATURE_DIM, HIDDEN, LSTM_LAYERS, &mut rng)?;
        let a0 = Linear::new(&mut store, "mm.ana0", STATE_DIM, ANALYZER[0], &mut rng)?;
        let a1 = Linear::new(&mut store, "mm.ana1", ANALYZER[0], ANALYZER[1], &mut rng)?;
        let a2 = Linear::new(&mut store, "mm.ana2", ANALYZER[1], THETA2_DIM, &mut rng)?;
        let mut theta2_init = diff::xavier(HIDDEN, BEHAVIOR_DIM, &mut rng);
        theta2_init.extend([0.0; BEHAVIOR_DIM]);
        store.get_mut(a2.w).values.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(a2.b).values.copy_from_slice(&theta2_init);
        Ok(Self {
            store,
            lstm,
            analyzer: [a0, a1, a2],
            feature_norm,
            state_norm,
            theta2_init,
        })
    }

    pub fn theta2_init(&self) -> &[f64] {
        &self.theta2_init
    }

    /// Implicit code of a window of z-scored features.
    pub fn implicit(&self, tape: &mut Tape, store: &ParamStore, window_z: &[[f64; FEATURE_DIM]]) -> Result<Var> {
        if window_z.len() != WINDOW {
            return Err(Error::InsufficientHistory {
                need: WINDOW,
                have: window_z.len(),
            });
        }
        let xs: Vec<Var> = window_z.iter().map(|z| tape.constant(z.to_vec())).collect();
        self.lstm.forward(tape, store, &xs)
    }

    /// Estimator parameters generated from a z-scored state.
    pub fn theta2(&self, tape: &mut Tape, store: &ParamStore, state_z: &[f64; STATE_DIM]) -> Result<Var> {
        let mut h = tape.constant(state_z.to_vec());
        for (l, layer) in self.analyzer.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if l < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Normalized behavior estimate `sigmoid(W u + c)` with `theta2 = [W; c]`.
    pub fn estimate(&self, tape: &mut Tape, u: Var, theta2: Var) -> Result<Var> {
        let w = tape.slice(theta2, 0, BEHAVIOR_DIM * HIDDEN)?;
        let c = tape.slice(theta2, BEHAVIOR_DIM * HIDDEN, BEHAVIOR_DIM)?;
        let wu = tape.matvec(w, u, BEHAVIOR_DIM, HIDDEN)?;
        let z = tape.add(wu, c)?;
        Ok(tape.sigmoid(z))
    }

    /// Triplet term on estimates under fabricated states. The code `u` is
    /// detached, so only the analyzer receives gradient.
    pub fn stat_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        anchor_theta2: Var,
        triplet: &Triplet,
        margin: f64,
    ) -> Result<Var> {
        let u = tape.detach(u);
        let anchor = self.estimate(tape, u, anchor_theta2)?;
        let t_pos = self.theta2(tape, store, &triplet.similar)?;
        let pos = self.estimate(tape, u, t_pos)?;
        let t_neg = self.theta2(tape, store, &triplet.dissimilar)?;
        let neg = self.estimate(tape, u, t_neg)?;
        tape.triplet(anchor, pos, neg, margin)
    }

    fn window_z(&self, window: &[FeatureVector]) -> Result<Vec<[f64; FEATURE_DIM]>> {
        if window.len() < WINDOW {
            return Err(Error::InsufficientHistory {
                need: WINDOW,
                have: window.len(),
            });
        }
        Ok(window[window.len() - WINDOW..]
            .iter()
            .map(|f| self.feature_norm.normalize(f))
            .collect())
    }

    fn infer_z(&self, window_z: &[[f64; FEATURE_DIM]], state_z: &[f64; STATE_DIM]) -> Result<[f64; BEHAVIOR_DIM]> {
        let mut tape = Tape::inference();
        let u = self.implicit(&mut tape, &self.store, window_z)?;
        let t2 = self.theta2(&mut tape, &self.store, state_z)?;
        let b = self.estimate(&mut tape, u, t2)?;
        let mut out = [0.0; BEHAVIOR_DIM];
        out.copy_from_slice(tape.value(b));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("behavior estimate".into()));
        }
        Ok(out)
    }

    /// Normalized estimate for the last day of `window` (raw features, at
    /// least `WINDOW` days; only the last `WINDOW` are read).
    pub fn infer_norm(&self, window: &[FeatureVector], state: &MarketState) -> Result<[f64; BEHAVIOR_DIM]> {
        let wz = self.window_z(window)?;
        self.infer_z(&wz, &self.state_norm.normalize(state))
    }

    pub fn infer(&self, window: &[FeatureVector], state: &MarketState) -> Result<BehaviorVector> {
        Ok(BehaviorVector::from_normalized(self.infer_norm(window, state)?))
    }

    /// Estimates under the factual and a user-supplied state with the same
    /// feature window.
    pub fn hypothesize(
        &self,
        window: &[FeatureVector],
        factual: &MarketState,
        modified: &MarketState,
    ) -> Result<Hypothesis> {
        let wz = self.window_z(window)?;
        let a = self.infer_z(&wz, &self.state_norm.normalize(factual))?;
        let b = self.infer_z(&wz, &self.state_norm.normalize(modified))?;
        Ok(Hypothesis {
            factual: BehaviorVector::from_normalized(a),
            modified: BehaviorVector::from_normalized(b),
            delta_norm: std::array::from_fn(|d| b[d] - a[d]),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.store.to_checkpoint();
        ck.push("mm.theta2_init", &[THETA2_DIM], self.theta2_init.clone());
        ck.push("mm.norm.mean", &[FEATURE_DIM], self.feature_norm.mean.to_vec());
        ck.push("mm.norm.std", &[FEATURE_DIM], self.feature_norm.std.to_vec());
        ck.push("mm.state.mean", &[STATE_DIM], self.state_norm.mean.to_vec());
        ck.push("mm.state.std", &[STATE_DIM], self.state_norm.std.to_vec());
        let bounds: Vec<f64> = BEHAVIOR_BOUNDS.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
        ck.push("mm.bounds", &[BEHAVIOR_DIM, 2], bounds);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bounds = ck.values("mm.bounds", 2 * BEHAVIOR_DIM)?;
        for (d, &(lo, hi)) in BEHAVIOR_BOUNDS.iter().enumerate() {
            if bounds[2 * d] != lo || bounds[2 * d + 1] != hi {
                return Err(Error::Checkpoint(format!(
                    "checkpoint bounds for coordinate {d} are [{}, {}], this build uses [{lo}, {hi}]",
                    bounds[2 * d],
                    bounds[2 * d + 1]
                )));
            }
        }
        let mut fmean = [0.0; FEATURE_DIM];
        fmean.copy_from_slice(ck.values("mm.norm.mean", FEATURE_DIM)?);
        let mut fstd = [0.0; FEATURE_DIM];
        fstd.copy_from_slice(ck.values("mm.norm.std", FEATURE_DIM)?);
        let mut smean = [0.0; STATE_DIM];
        smean.copy_from_slice(ck.values("mm.state.mean", STATE_DIM)?);
        let mut sstd = [0.0; STATE_DIM];
        sstd.copy_from_slice(ck.values("mm.state.std", STATE_DIM)?);
        let mut mm = Self::new(
            FeatureNormalizer { mean: fmean, std: fstd },
            StateNormalizer { mean: smean, std: sstd },
            0,
        )?;
        mm.store.load_checkpoint(ck)?;
        mm.theta2_init = ck.values("mm.theta2_init", THETA2_DIM)?.to_vec();
        Ok(mm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `||surrogate(b, fund) - target||^2` in z-space.
pub fn repr_loss(
    tape: &mut Tape,
    sur: &SurrogateNet,
    sur_store: &ParamStore,
    b_hat: Var,
    fund: &[f64],
    target_z: &[f64; FEATURE_DIM],
) -> Result<Var> {
    let f = tape.constant(fund.to_vec());
    let y = sur.forward_with(tape, sur_store, b_hat, f)?;
    let t = tape.constant(target_z.to_vec());
    tape.sq_dist(y, t)
}

/// Sum of squared steps between consecutive estimates.
pub fn temp_loss(tape: &mut Tape, estimates: &[Var]) -> Result<Var> {
    let steps = estimates
        .windows(2)
        .map(|p| tape.sq_dist(p[0], p[1]))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&steps)
}

/// Draws a similar and a dissimilar state around `state_z`, redrawing until
/// the similar one is strictly closer.
pub fn fabricate<R: Rng + ?Sized>(
    state_z: &[f64; STATE_DIM],
    similar_sd: f64,
    dissimilar_sd: f64,
    rng: &mut R,
) -> Result<Triplet> {
    let near = Normal::new(0.0, similar_sd).map_err(|e| Error::config("similar_noise", e.to_string()))?;
    let far = Normal::new(0.0, dissimilar_sd).map_err(|e| Error::config("dissimilar_noise", e.to_string()))?;
    let dist = |a: &[f64; STATE_DIM]| -> f64 { a.iter().zip(state_z).map(|(x, y)| (x - y).powi(2)).sum() };
    loop {
        let similar: [f64; STATE_DIM] = std::array::from_fn(|d| state_z[d] + near.sample(rng));
        let dissimilar: [f64; STATE_DIM] = std::array::from_fn(|d| state_z[d] + far.sample(rng));
        if dist(&similar) < dist(&dissimilar) {
            return Ok(Triplet { similar, dissimilar });
        }
    }
}

/// One day of training material.
#[derive(Debug, Clone)]
pub struct MetaDay {
    pub day: usize,
    pub features: FeatureVector,
    /// Log-relative fundamental path, as fed to the surrogate.
    pub fund: Vec<f64>,
    /// Required on target days.
    pub state: Option<MarketState>,
    /// Normalized ground truth when known; only used for logging.
    pub truth: Option<[f64; BEHAVIOR_DIM]>,
}

/// Consecutive days; the first `first_target` only supply window history.
#[derive(Debug, Clone)]
pub struct MetaCorpus {
    pub days: Vec<MetaDay>,
    pub first_target: usize,
}

impl MetaCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.first_target + 1 < WINDOW {
            return Err(Error::InsufficientHistory {
                need: WINDOW - 1,
                have: self.first_target,
            });
        }
        let targets = self.days.len().saturating_sub(self.first_target);
        if targets < 2 {
            return Err(Error::InvalidInput(format!(
                "corpus has {targets} target days, need at least 2"
            )));
        }
        if let Some(w) = self.days.windows(2).find(|w| w[1].day != w[0].day + 1) {
            return Err(Error::InvalidInput(format!(
                "corpus days are not consecutive: {} follows {}",
                w[1].day, w[0].day
            )));
        }
        Ok(())
    }

    pub fn targets(&self) -> &[MetaDay] {
        &self.days[self.first_target..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub w_t: f64,
    pub w_s: f64,
    pub margin: f64,
    /// Consecutive days per temporal chunk.
    pub chunk_len: usize,
    /// Chunks averaged per optimizer step.
    pub chunks_per_step: usize,
    pub similar_noise: f64,
    pub dissimilar_noise: f64,
    /// Trailing target days held out of the gradient and used to pick the
    /// returned checkpoint. 0 returns the final epoch.
    pub val_days: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            w_t: 0.1,
            w_s: 1.0,
            margin: 0.1,
            chunk_len: 5,
            chunks_per_step: 4,
            similar_noise: 0.05,
            dissimilar_noise: 0.5,
            val_days: 12,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len < 2 {
            return Err(Error::config("chunk_len", "must be at least 2"));
        }
        if self.chunks_per_step == 0 {
            return Err(Error::config("chunks_per_step", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        for (name, v) in [("w_t", self.w_t), ("w_s", self.w_s), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative and finite"));
            }
        }
        if !(self.similar_noise > 0.0 && self.similar_noise < self.dissimilar_noise) {
            return Err(Error::config(
                "similar_noise",
                "must be positive and below dissimilar_noise",
            ));
        }
        Ok(())
    }
}

/// Precomputed inputs of one target day.
#[derive(Debug, Clone)]
pub struct Sample {
    pub window_z: Vec<[f64; FEATURE_DIM]>,
    pub state_z: [f64; STATE_DIM],
    pub fund: Vec<f64>,
    pub target_z: [f64; FEATURE_DIM],
    pub truth: Option<[f64; BEHAVIOR_DIM]>,
}

/// Values of the three loss terms, each averaged over its chunk.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub repr: f64,
    pub temp: f64,
    pub stat: f64,
}

/// Composite loss of one chunk of consecutive days: the mean reproduction
/// error, plus `w_t` times the mean squared step between neighbours, plus
/// `w_s` times the mean triplet term.
#[allow(clippy::too_many_arguments)]
pub fn chunk_loss(
    tape: &mut Tape,
    mm: &MetaMarket,
    store: &ParamStore,
    sur: &SurrogateNet,
    sur_store: &ParamStore,
    samples: &[&Sample],
    triplets: &[Triplet],
    cfg: &MetaTrainConfig,
) -> Result<(Var, LossTerms)> {
    if samples.is_empty() || triplets.len() != samples.len() {
        return Err(Error::Shape("chunk needs one triplet per sample".into()));
    }
    let n = samples.len() as f64;
    let mut estimates = Vec::with_capacity(samples.len());
    let mut repr = Vec::with_capacity(samples.len());
    let mut stat = Vec::with_capacity(samples.len());
    for (s, tri) in samples.iter().zip(triplets) {
        let u = mm.implicit(tape, store, &s.window_z)?;
        let t2 = mm.theta2(tape, store, &s.state_z)?;
        let b = mm.estimate(tape, u, t2)?;
        repr.push(repr_loss(tape, sur, sur_store, b, &s.fund, &s.target_z)?);
        if cfg.w_s > 0.0 {
            stat.push(mm.stat_loss(tape, store, u, t2, tri, cfg.margin)?);
        }
        estimates.push(b);
    }
    let r = tape.add_all(&repr)?;
    let r = tape.scale(r, 1.0 / n);
    let mut terms = LossTerms {
        repr: tape.scalar(r),
        ..LossTerms::default()
    };
    let mut parts = vec![r];
    if samples.len() > 1 {
        let t = temp_loss(tape, &estimates)?;
        let t = tape.scale(t, 1.0 / (n - 1.0));
        terms.temp = tape.scalar(t);
        if cfg.w_t > 0.0 {
            parts.push(tape.scale(t, cfg.w_t));
        }
    }
    if !stat.is_empty() {
        let s = tape.add_all(&stat)?;
        let s = tape.scale(s, 1.0 / n);
        terms.stat = tape.scalar(s);
        parts.push(tape.scale(s, cfg.w_s));
    }
    let total = tape.add_all(&parts)?;
    terms.total = tape.scalar(total);
    Ok((total, terms))
}

/// Per-epoch diagnostics. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's chunks (NaN at epoch 0).
    pub loss: f64,
    /// Mean surrogate reconstruction error of the estimates over target
    /// days, z-space sum of squares.
    pub recon: f64,
    /// Mean squared normalized step between consecutive days' estimates.
    pub variation: f64,
    /// Mean squared normalized distance to the ground truth (NaN without
    /// truth).
    pub truth_error: f64,
    pub stat: f64,
    /// Mean surrogate reconstruction error over the held-out days (NaN
    /// without a hold-out).
    pub val_recon: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetaCurve {
    pub epochs: Vec<MetaEpoch>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl MetaCurve {
    pub fn first(&self) -> Option<&MetaEpoch> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&MetaEpoch> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "epoch",
            "loss",
            "recon",
            "variation",
            "truth_error",
            "stat",
            "val_recon",
            "selected",
        ])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                e.recon.to_string(),
                e.variation.to_string(),
                e.truth_error.to_string(),
                e.stat.to_string(),
                e.val_recon.to_string(),
                u8::from(e.epoch == self.selected_epoch).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Turns a corpus into per-target samples with the calibrator's
/// normalizers.
pub fn prepare(mm: &MetaMarket, corpus: &MetaCorpus) -> Result<Vec<Sample>> {
    corpus.validate()?;
    let z: Vec<[f64; FEATURE_DIM]> = corpus
        .days
        .iter()
        .map(|d| mm.feature_norm.normalize(&d.features))
        .collect();
    (corpus.first_target..corpus.days.len())
        .map(|i| {
            let d = &corpus.days[i];
            let state = d
                .state
                .ok_or_else(|| Error::MissingInput(format!("market state of day {}", d.day)))?;
            Ok(Sample {
                window_z: z[i + 1 - WINDOW..=i].to_vec(),
                state_z: mm.state_norm.normalize(&state),
                fund: d.fund.clone(),
                target_z: z[i],
                truth: d.truth,
            })
        })
        .collect()
}

pub fn evaluate(mm: &MetaMarket, sur: &SurrogateNet, samples: &[Sample], epoch: usize, loss: f64) -> Result<MetaEpoch> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let b = mm.infer_z(&s.window_z, &s.state_z)?;
            let y = sur.predict_z(&b, &s.fund)?;
            let recon: f64 = y.iter().zip(&s.target_z).map(|(a, t)| (a - t).powi(2)).sum();
            let var = s
                .truth
                .map(|t| t.iter().zip(&b).map(|(a, x)| (a - x).powi(2)).sum::<f64>());
            Ok((b, recon, var))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let recon = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let truth_error = if rows.iter().all(|r| r.2.is_some()) {
        rows.iter().map(|r| r.2.unwrap_or(0.0)).sum::<f64>() / n
    } else {
        f64::NAN
    };
    let variation = rows
        .windows(2)
        .map(|w| w[0].0.iter().zip(&w[1].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    if !recon.is_finite() {
        return Err(Error::NonFinite(format!(
            "meta-market reconstruction error at epoch {epoch}"
        )));
    }
    Ok(MetaEpoch {
        epoch,
        loss,
        recon,
        variation,
        truth_error,
        stat: f64::NAN,
        val_recon: f64::NAN,
    })
}

/// Trains `mm` against the frozen surrogate. Chunks of consecutive target
/// days are drawn with a random phase each epoch, and triplets are
/// refabricated each epoch. With `val_days > 0` the parameters of the epoch
/// with the lowest held-out reconstruction error are kept.
pub fn train(mm: &mut MetaMarket, corpus: &MetaCorpus, sur: &SurrogateNet, cfg: &MetaTrainConfig) -> Result<MetaCurve> {
    cfg.validate()?;
    let mut sur = sur.clone();
    sur.freeze();
    let all = prepare(mm, corpus)?;
    if all.len() < cfg.val_days + 2 {
        return Err(Error::config(
            "val_days",
            format!("leaves fewer than 2 of {} target days for training", all.len()),
        ));
    }
    let (samples, held) = all.split_at(all.len() - cfg.val_days);
    let n = samples.len();
    let mut opt = Adam::new(&mm.store, cfg.lr);
    let mut rng = seed::derived_rng(cfg.seed, &[tag::TRAIN]);

    let score = |mm: &MetaMarket, sur: &SurrogateNet, epoch: usize, loss: f64| -> Result<MetaEpoch> {
        let mut e = evaluate(mm, sur, samples, epoch, loss)?;
        if !held.is_empty() {
            e.val_recon = evaluate(mm, sur, held, epoch, loss)?.recon;
        }
        Ok(e)
    };
    let mut curve = MetaCurve {
        epochs: vec![score(mm, &sur, 0, f64::NAN)?],
        selected_epoch: 0,
    };
    let mut best = (curve.epochs[0].val_recon, mm.store.clone());
    for epoch in 1..=cfg.epochs {
        let triplets = (0..n)
            .map(|i| {
                let mut r = seed::derived_rng(cfg.seed, &[tag::TRIPLET, epoch as u64, i as u64]);
                fabricate(&samples[i].state_z, cfg.similar_noise, cfg.dissimilar_noise, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let phase = rng.random_range(0..cfg.chunk_len);
        let mut chunks: Vec<(usize, usize)> = Vec::new();
        let mut start = 0;
        let mut end = phase.max(1).min(n);
        while start < n {
            chunks.push((start, end));
            start = end;
            end = (end + cfg.chunk_len).min(n);
        }
        // A trailing single day cannot carry a temporal term; merge it.
        if chunks.len() > 1 && chunks[chunks.len() - 1].1 - chunks[chunks.len() - 1].0 == 1 {
            let last = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").1 = last.1;
        }
        if chunks.len() > 1 && chunks[0].1 - chunks[0].0 == 1 {
            let first = chunks.remove(0);
            chunks[0].0 = first.0;
        }
        chunks.shuffle(&mut rng);

        let mut epoch_terms = LossTerms::default();
        for group in chunks.chunks(cfg.chunks_per_step) {
            let weight = 1.0 / group.len() as f64;
            let results = group
                .par_iter()
                .map(|&(a, b)| {
                    let refs: Vec<&Sample> = samples[a..b].iter().collect();
                    let mut tape = Tape::new();
                    let (loss, terms) =
                        chunk_loss(&mut tape, mm, &mm.store, &sur, &sur.store, &refs, &triplets[a..b], cfg)?;
                    if !terms.total.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "meta-market loss at epoch {epoch}, days {}..{}: repr {} temp {} stat {}",
                            corpus.days[corpus.first_target + a].day,
                            corpus.days[corpus.first_target + b - 1].day,
                            terms.repr,
                            terms.temp,
                            terms.stat
                        )));
                    }
                    tape.backward(loss)?;
                    Ok((mm.store.tape_grads(&tape, weight), terms))
                })
                .collect::<Result<Vec<_>>>()?;
            mm.store.zero_grads();
            for (g, terms) in &results {
                mm.store.add_grads(g);
                epoch_terms.total += terms.total;
                epoch_terms.repr += terms.repr;
                epoch_terms.temp += terms.temp;
                epoch_terms.stat += terms.stat;
            }
            opt.step(&mut mm.store).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}")),
                other => other,
            })?;
        }
        let k = chunks.len() as f64;
        let mut e = score(mm, &sur, epoch, epoch_terms.total / k)?;
        e.stat = epoch_terms.stat / k;
        if held.is_empty() || e.val_recon < best.0 {
            best = (e.val_recon, mm.store.clone());
            curve.selected_epoch = epoch;
        }
        log::debug!(
            "meta-market epoch {epoch}: loss {:.4} recon {:.4} variation {:.5} truth {:.5} stat {:.4}",
            e.loss,
            e.recon,
            e.variation,
            e.truth_error,
            e.stat
        );
        curve.epochs.push(e);
    }
    mm.store = best.1;
    Ok(curve)
}

/// Calibration output row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub day: usize,
    pub behavior: BehaviorVector,
    pub source: String,
}

pub fn write_calibration_csv<W: Write>(rows: &[CalibrationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["day".to_string()];
    header.extend((1..=BEHAVIOR_DIM).map(|i| format!("b{i}")));
    header.extend((1..=BEHAVIOR_DIM).map(|i| format!("b{i}_norm")));
    header.push("source".into());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.day.to_string()];
        rec.extend(r.behavior.to_array().iter().map(|v| v.to_string()));
        rec.extend(r.behavior.to_normalized().iter().map(|v| v.to_string()));
        rec.push(r.source.clone());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_calibration_csv<R: std::io::Read>(r: R) -> Result<Vec<CalibrationRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 + 2 * BEHAVIOR_DIM {
            return Err(Error::InvalidInput(format!(
                "calibration row has {} fields, expected {}",
                rec.len(),
                2 + 2 * BEHAVIOR_DIM
            )));
        }
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("calibration field {i}: {e}")))
        };
        let day = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::InvalidInput(format!("calibration day: {e}")))?;
        let raw: [f64; BEHAVIOR_DIM] = [parse(1)?, parse(2)?, parse(3)?, parse(4)?, parse(5)?];
        rows.push(CalibrationRow {
            day,
            behavior: BehaviorVector::from_array(raw)?,
            source: rec[1 + 2 * BEHAVIOR_DIM].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm() -> MetaMarket {
        MetaMarket::new(FeatureNormalizer::identity(), StateNormalizer::identity(), 5).unwrap()
    }

    fn window(seed_value: u64) -> Vec<FeatureVector> {
        let mut rng = seed::rng(seed_value);
        (0..WINDOW)
            .map(|_| FeatureVector::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect()
    }

    fn state(v: f64) -> MarketState {
        MarketState::from_array([v, -v, 0.5 * v, 0.2, v * v])
    }

    #[test]
    fn init_ignores_state() {
        let m = mm();
        let w = window(1);
        let h = m.hypothesize(&w, &state(0.0), &state(2.5)).unwrap();
        assert_eq!(h.factual, h.modified);
        assert_eq!(h.delta_norm, [0.0; BEHAVIOR_DIM]);
    }

    #[test]
    fn short_window_rejected() {
        let m = mm();
        let w = window(1);
        let err = m.infer(&w[1..], &state(0.0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientHistory { need: WINDOW, have } if have == WINDOW - 1));
    }

    #[test]
    fn temporal_loss_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 5]);
        let b = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let l = temp_loss(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let h = tape.constant(vec![0.5, 0.0, 0.0, 0.0, 0.0]);
        let l = temp_loss(&mut tape, &[a, h, a]).unwrap();
        assert_eq!(tape.scalar(l), 0.5);
        let l = temp_loss(&mut tape, &[b, b, b]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn fabricated_triplets_are_ordered() {
        let mut rng = seed::rng(3);
        let x = [0.1, -0.3, 1.2, 0.0, 0.5];
        for _ in 0..200 {
            let t = fabricate(&x, 0.05, 0.5, &mut rng).unwrap();
            let d = |a: &[f64; 5]| a.iter().zip(&x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            assert!(d(&t.similar) < d(&t.dissimilar));
        }
    }

    #[test]
    fn stat_loss_is_margin_when_state_blind() {
        let m = mm();
        let wz: Vec<[f64; FEATURE_DIM]> = window(2).iter().map(|f| f.to_array()).collect();
        let mut tape = Tape::new();
        let u = m.implicit(&mut tape, &m.store, &wz).unwrap();
        let x = [0.3; STATE_DIM];
        let t2 = m.theta2(&mut tape, &m.store, &x).unwrap();
        let tri = fabricate(&x, 0.05, 0.5, &mut seed::rng(1)).unwrap();
        let l = m.stat_loss(&mut tape, &m.store, u, t2, &tri, 0.1).unwrap();
        assert!((tape.scalar(l) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = mm();
        let mut buf = Vec::new();
        m.to_checkpoint().write(&mut buf).unwrap();
        let back = MetaMarket::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
        let w = window(4);
        assert_eq!(m.infer(&w, &state(0.4)).unwrap(), back.infer(&w, &state(0.4)).unwrap());
        assert_eq!(back.theta2_init(), m.theta2_init());
    }

    #[test]
    fn calibration_csv_round_trip() {
        let rows = vec![CalibrationRow {
            day: 7,
            behavior: BehaviorVector::center(),
            source: "calisim".into(),
        }];
        let mut buf = Vec::new();
        write_calibration_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("day,b1,b2,b3,b4,b5,b1_norm,b2_norm,b3_norm,b4_norm,b5_norm,source"));
        let back = read_calibration_csv(&buf[..]).unwrap();
        assert_eq!(back[0].day, 7);
        assert_eq!(back[0].source, "calisim");
        for (a, b) in back[0].behavior.to_array().iter().zip(rows[0].behavior.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
