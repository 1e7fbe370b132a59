//! Learned stand-in for the simulator: maps a normalized behavior vector and
//! a log-relative fundamental series to the z-scored feature vector the
//! simulator would produce.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::agents::{BehaviorVector, BEHAVIOR_DIM};
use crate::diff::{Adam, Checkpoint, Linear, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{self, FeatureNormalizer, FeatureVector, FEATURE_DIM};
use crate::lob::Ticks;
use crate::seed::{self, tag};
use crate::simulator::{FundamentalSeries, Simulator};

/// Width of the compressed fundamental code.
pub const FUND_CODE_DIM: usize = 4;
const FUND_HIDDEN: usize = 50;
const TRUNK: [usize; 3] = [50, 100, 50];

/// One day the dataset builder simulates on.
#[derive(Debug, Clone)]
pub struct DatasetDay {
    pub day: usize,
    pub open_price: Ticks,
    pub fundamental: FundamentalSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateRow {
    pub day: usize,
    pub draw: usize,
    pub b_norm: [f64; BEHAVIOR_DIM],
    /// `ln(P_k / P_open)`.
    pub fund: Vec<f64>,
    /// Raw simulator features.
    pub q: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDataset {
    pub rows: Vec<SurrogateRow>,
    /// `true` for validation rows.
    pub is_val: Vec<bool>,
}

impl SurrogateDataset {
    /// All rows in the training split.
    pub fn new(rows: Vec<SurrogateRow>) -> Self {
        let n = rows.len();
        Self {
            rows,
            is_val: vec![false; n],
        }
    }

    /// Random row-level split; at least one row lands on each side when
    /// there are two or more rows.
    pub fn split(mut self, val_fraction: f64, seed_value: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        let n = self.rows.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed_value));
        let mut n_val = (val_fraction * n as f64).round() as usize;
        if val_fraction > 0.0 && n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        self.is_val = vec![false; n];
        for &i in &idx[..n_val] {
            self.is_val[i] = true;
        }
        Ok(self)
    }

    pub fn train_rows(&self) -> impl Iterator<Item = &SurrogateRow> {
        self.rows.iter().zip(&self.is_val).filter(|(_, v)| !**v).map(|(r, _)| r)
    }

    pub fn val_rows(&self) -> impl Iterator<Item = &SurrogateRow> {
        self.rows.iter().zip(&self.is_val).filter(|(_, v)| **v).map(|(r, _)| r)
    }

    pub fn fund_dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.fund.len())
    }

    /// Writes `day,draw,b1..b5,f1..fK,q1..q13` with raw feature values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let k = self.fund_dim().unwrap_or(0);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["day".to_string(), "draw".to_string()];
        header.extend((1..=BEHAVIOR_DIM).map(|i| format!("b{i}")));
        header.extend((1..=k).map(|i| format!("f{i}")));
        header.extend((1..=FEATURE_DIM).map(|i| format!("q{i}")));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.day.to_string(), r.draw.to_string()];
            rec.extend(r.b_norm.iter().map(|v| v.to_string()));
            rec.extend(r.fund.iter().map(|v| v.to_string()));
            rec.extend(r.q.to_array().iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let k = header.iter().filter(|h| h.starts_with('f')).count();
        let expected = 2 + BEHAVIOR_DIM + k + FEATURE_DIM;
        if header.len() != expected {
            return Err(Error::InvalidInput(format!(
                "dataset csv: {} columns, expected {expected}",
                header.len()
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("dataset csv row {}: bad column {i}", line + 2)))
            };
            let b_norm: [f64; BEHAVIOR_DIM] = {
                let mut b = [0.0; BEHAVIOR_DIM];
                for (j, v) in b.iter_mut().enumerate() {
                    *v = num(2 + j)?;
                }
                b
            };
            let fund = (0..k).map(|j| num(2 + BEHAVIOR_DIM + j)).collect::<Result<Vec<_>>>()?;
            let mut q = [0.0; FEATURE_DIM];
            for (j, v) in q.iter_mut().enumerate() {
                *v = num(2 + BEHAVIOR_DIM + k + j)?;
            }
            rows.push(SurrogateRow {
                day: num(0)? as usize,
                draw: num(1)? as usize,
                b_norm,
                fund,
                q: FeatureVector::from_array(q),
            });
        }
        Ok(Self::new(rows))
    }
}

/// Simulates `per_day` uniform behavior draws on each day and records the
/// resulting features. Runs in parallel; the result does not depend on the
/// thread count.
pub fn build_dataset(days: &[DatasetDay], per_day: usize, sim: &Simulator, base_seed: u64) -> Result<SurrogateDataset> {
    let jobs: Vec<(usize, usize)> = (0..days.len())
        .flat_map(|d| (0..per_day).map(move |k| (d, k)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(d, k)| {
            let day = &days[d];
            let s = seed::derive(base_seed, &[tag::SURROGATE_DATA, day.day as u64, k as u64]);
            let mut rng = seed::rng(s);
            let b_norm: [f64; BEHAVIOR_DIM] = std::array::from_fn(|_| rng.random::<f64>());
            let b = BehaviorVector::from_normalized(b_norm);
            let wrap = |e: Error| Error::Simulation {
                day: day.day,
                draw: k,
                source: Box::new(e),
            };
            let stream = sim
                .run(&b, &day.fundamental, day.open_price, rng.random())
                .map_err(wrap)?;
            let q = features::extract(&stream).map_err(wrap)?;
            let open = day.open_price as f64 * sim.config().tick_size;
            Ok(SurrogateRow {
                day: day.day,
                draw: k,
                b_norm: b.to_normalized(),
                fund: day.fundamental.log_relative(open),
                q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurrogateDataset::new(rows))
}

/// The surrogate network with its attached feature normalizer.
#[derive(Debug, Clone)]
pub struct SurrogateNet {
    pub store: ParamStore,
    fund1: Linear,
    fund2: Linear,
    trunk: [Linear; 4],
    pub normalizer: FeatureNormalizer,
}

impl SurrogateNet {
    pub fn new<R: Rng + ?Sized>(fund_dim: usize, normalizer: FeatureNormalizer, rng: &mut R) -> Result<Self> {
        if fund_dim == 0 {
            return Err(Error::Shape("fundamental input must be non-empty".into()));
        }
        let mut store = ParamStore::new();
        let fund1 = Linear::new(&mut store, "sur.fund1", fund_dim, FUND_HIDDEN, rng)?;
        let fund2 = Linear::new(&mut store, "sur.fund2", FUND_HIDDEN, FUND_CODE_DIM, rng)?;
        let dims = [BEHAVIOR_DIM + FUND_CODE_DIM, TRUNK[0], TRUNK[1], TRUNK[2], FEATURE_DIM];
        let mut layers = Vec::with_capacity(4);
        for l in 0..4 {
            layers.push(Linear::new(
                &mut store,
                &format!("sur.trunk{l}"),
                dims[l],
                dims[l + 1],
                rng,
            )?);
        }
        Ok(Self {
            store,
            fund1,
            fund2,
            trunk: [layers[0], layers[1], layers[2], layers[3]],
            normalizer,
        })
    }

    pub fn fund_dim(&self) -> usize {
        self.fund1.fan_in
    }

    /// Output in z-space. `b` holds normalized behavior coordinates.
    pub fn forward(&self, tape: &mut Tape, b: Var, fund: Var) -> Result<Var> {
        self.forward_with(tape, &self.store, b, fund)
    }

    /// [`forward`](Self::forward) with the weights taken from `store`, which
    /// must share this network's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, b: Var, fund: Var) -> Result<Var> {
        if tape.value(b).len() != BEHAVIOR_DIM || tape.value(fund).len() != self.fund_dim() {
            return Err(Error::Shape(format!(
                "surrogate inputs of length {} and {}, expected {BEHAVIOR_DIM} and {}",
                tape.value(b).len(),
                tape.value(fund).len(),
                self.fund_dim()
            )));
        }
        let s = store;
        let f = self.fund1.forward(tape, s, fund)?;
        let f = tape.relu(f);
        let code = self.fund2.forward(tape, s, f)?;
        let mut h = tape.concat(&[b, code]);
        for (l, layer) in self.trunk.iter().enumerate() {
            h = layer.forward(tape, s, h)?;
            if l < 3 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Predicted z-scored features; behavior coordinates outside [0, 1]
    /// are clamped with a warning.
    pub fn predict_z(&self, b_norm: &[f64; BEHAVIOR_DIM], fund: &[f64]) -> Result<[f64; FEATURE_DIM]> {
        let clamped = b_norm.map(|v| v.clamp(0.0, 1.0));
        if clamped != *b_norm {
            log::warn!("surrogate input {b_norm:?} outside [0, 1]; clamped");
        }
        let mut tape = Tape::inference();
        let b = tape.constant(clamped.to_vec());
        let f = tape.constant(fund.to_vec());
        let out = self.forward(&mut tape, b, f)?;
        let mut z = [0.0; FEATURE_DIM];
        z.copy_from_slice(tape.value(out));
        Ok(z)
    }

    /// Predicted raw features.
    pub fn predict(&self, b: &BehaviorVector, fund: &[f64]) -> Result<FeatureVector> {
        let z = self.predict_z(&b.to_normalized(), fund)?;
        Ok(self.normalizer.denormalize(&z))
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.store.to_checkpoint();
        ck.push("sur.norm.mean", &[FEATURE_DIM], self.normalizer.mean.to_vec());
        ck.push("sur.norm.std", &[FEATURE_DIM], self.normalizer.std.to_vec());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let fund_dim = ck
            .get("sur.fund1.w")
            .and_then(|t| t.shape.get(1).copied())
            .ok_or_else(|| Error::Checkpoint("missing tensor sur.fund1.w".into()))?;
        let mut mean = [0.0; FEATURE_DIM];
        mean.copy_from_slice(ck.values("sur.norm.mean", FEATURE_DIM)?);
        let mut std = [0.0; FEATURE_DIM];
        std.copy_from_slice(ck.values("sur.norm.std", FEATURE_DIM)?);
        let mut net = Self::new(fund_dim, FeatureNormalizer { mean, std }, &mut seed::rng(0))?;
        net.store.load_checkpoint(ck)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

/// Per-epoch losses; epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateCurve {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    /// Validation loss of predicting the training mean.
    pub constant_baseline: f64,
}

impl SurrogateCurve {
    pub fn initial_val(&self) -> f64 {
        self.epochs[0].val
    }

    pub fn best_val(&self) -> f64 {
        self.epochs[self.best_epoch].val
    }

    /// Writes `epoch,train_loss,val_loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            out.write_record([e.epoch.to_string(), e.train.to_string(), e.val.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Prepared {
    b: Vec<f64>,
    fund: Vec<f64>,
    z: Vec<f64>,
}

fn prepare(rows: &[&SurrogateRow], norm: &FeatureNormalizer) -> Vec<Prepared> {
    rows.iter()
        .map(|r| Prepared {
            b: r.b_norm.to_vec(),
            fund: r.fund.clone(),
            z: norm.normalize(&r.q).to_vec(),
        })
        .collect()
}

fn row_loss(net: &SurrogateNet, tape: &mut Tape, p: &Prepared) -> Result<Var> {
    let b = tape.constant(p.b.clone());
    let f = tape.constant(p.fund.clone());
    let y = net.forward(tape, b, f)?;
    let t = tape.constant(p.z.clone());
    tape.mse(y, t)
}

fn mean_loss(net: &SurrogateNet, rows: &[Prepared]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for p in rows {
        let mut tape = Tape::inference();
        let l = row_loss(net, &mut tape, p)?;
        total += tape.scalar(l);
    }
    Ok(total / rows.len() as f64)
}

/// Mean-squared z-space error of the training rows' mean as a constant
/// prediction, evaluated on `rows`.
fn constant_loss(train: &[Prepared], rows: &[Prepared]) -> f64 {
    let mut mean = [0.0; FEATURE_DIM];
    for p in train {
        for (m, v) in mean.iter_mut().zip(&p.z) {
            *m += v / train.len() as f64;
        }
    }
    rows.iter()
        .map(|p| p.z.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / FEATURE_DIM as f64)
        .sum::<f64>()
        / rows.len().max(1) as f64
}

/// Fits the normalizer on the training split, then minimizes the z-space
/// mean squared error with Adam. Returns the network at the epoch with the
/// lowest validation loss (training loss when there is no validation
/// split).
pub fn train_surrogate(ds: &SurrogateDataset, cfg: &SurrogateTrainConfig) -> Result<(SurrogateNet, SurrogateCurve)> {
    let train_rows: Vec<&SurrogateRow> = ds.train_rows().collect();
    let val_rows: Vec<&SurrogateRow> = ds.val_rows().collect();
    if train_rows.is_empty() {
        return Err(Error::InvalidInput("surrogate dataset has no training rows".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs", "epochs and batch size must be positive"));
    }
    let fund_dim = train_rows[0].fund.len();
    if ds.rows.iter().any(|r| r.fund.len() != fund_dim) {
        return Err(Error::Shape("rows disagree on fundamental length".into()));
    }
    let q: Vec<FeatureVector> = train_rows.iter().map(|r| r.q).collect();
    let norm = FeatureNormalizer::fit(&q)?;
    let train = prepare(&train_rows, &norm);
    let val = prepare(&val_rows, &norm);
    let select_on_val = !val.is_empty();

    let mut rng = seed::derived_rng(cfg.seed, &[tag::INIT]);
    let mut net = SurrogateNet::new(fund_dim, norm, &mut rng)?;
    let mut opt = Adam::new(&net.store, cfg.lr);
    let mut order_rng = seed::derived_rng(cfg.seed, &[tag::TRAIN]);

    let eval = |net: &SurrogateNet, epoch: usize| -> Result<EpochLoss> {
        let e = EpochLoss {
            epoch,
            train: mean_loss(net, &train)?,
            val: if select_on_val { mean_loss(net, &val)? } else { f64::NAN },
        };
        if !e.train.is_finite() || (select_on_val && !e.val.is_finite()) {
            return Err(Error::NonFinite(format!("surrogate loss at epoch {epoch}")));
        }
        Ok(e)
    };
    let score = |e: &EpochLoss| if select_on_val { e.val } else { e.train };

    let mut curve = vec![eval(&net, 0)?];
    let mut best = (score(&curve[0]), 0usize, net.store.values_snapshot());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let l = row_loss(&net, &mut tape, &train[i])?;
                tape.backward(l)?;
                net.store.accumulate(&tape, 1.0 / batch.len() as f64);
            }
            opt.step(&mut net.store)?;
        }
        let e = eval(&net, epoch)?;
        log::debug!("surrogate epoch {epoch}: train {:.5} val {:.5}", e.train, e.val);
        if score(&e) < best.0 {
            best = (score(&e), epoch, net.store.values_snapshot());
        }
        curve.push(e);
    }
    net.store.restore_values(&best.2)?;
    let constant_baseline = if select_on_val {
        constant_loss(&train, &val)
    } else {
        constant_loss(&train, &train)
    };
    Ok((
        net,
        SurrogateCurve {
            epochs: curve,
            best_epoch: best.1,
            constant_baseline,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_rows(n: usize) -> Vec<SurrogateRow> {
        (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                let mut q = [0.0; FEATURE_DIM];
                for (d, v) in q.iter_mut().enumerate() {
                    *v = (d as f64 + 1.0) * x + 0.1 * d as f64;
                }
                SurrogateRow {
                    day: i,
                    draw: 0,
                    b_norm: [x, 1.0 - x, 0.5, x * x, 0.2],
                    fund: vec![0.01 * x; 6],
                    q: FeatureVector::from_array(q),
                }
            })
            .collect()
    }

    #[test]
    fn split_keeps_both_sides() {
        let ds = SurrogateDataset::new(toy_rows(10)).split(0.2, 3).unwrap();
        assert_eq!(ds.val_rows().count(), 2);
        assert_eq!(ds.train_rows().count(), 8);
        let ds = SurrogateDataset::new(toy_rows(2)).split(0.2, 3).unwrap();
        assert_eq!(ds.val_rows().count(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let ds = SurrogateDataset::new(toy_rows(4));
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("day,draw,b1,b2,b3,b4,b5,f1,"));
        let back = SurrogateDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn memorizes_a_single_row() {
        let rows = toy_rows(2);
        let ds = SurrogateDataset {
            rows,
            is_val: vec![false, true],
        };
        let cfg = SurrogateTrainConfig {
            epochs: 600,
            lr: 1e-3,
            batch_size: 1,
            seed: 1,
        };
        let (_, curve) = train_surrogate(&ds, &cfg).unwrap();
        let last = curve.epochs.last().unwrap();
        assert!(last.train < 1e-4, "train loss {}", last.train);
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let norm = FeatureNormalizer::identity();
        let net = SurrogateNet::new(24, norm, &mut seed::rng(9)).unwrap();
        let b = [0.1, 0.9, 0.4, 0.5, 0.0];
        let f = vec![0.002; 24];
        let back = SurrogateNet::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(net.predict_z(&b, &f).unwrap(), back.predict_z(&b, &f).unwrap());
        assert_eq!(back.fund_dim(), 24);
    }

    #[test]
    fn out_of_range_behavior_is_clamped() {
        let net = SurrogateNet::new(6, FeatureNormalizer::identity(), &mut seed::rng(2)).unwrap();
        let f = vec![0.0; 6];
        let hi = net.predict_z(&[1.5, 0.0, 0.0, 0.0, 0.0], &f).unwrap();
        let edge = net.predict_z(&[1.0, 0.0, 0.0, 0.0, 0.0], &f).unwrap();
        assert_eq!(hi, edge);
        assert!(hi.iter().all(|v| v.is_finite()));
        assert!(net.predict_z(&[0.5; 5], &[0.0; 5]).is_err());
    }
}
