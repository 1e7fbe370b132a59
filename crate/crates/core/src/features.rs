//! Stylized-fact features of one day's order stream.
//!
//! Thirteen statistics in four groups: minutely mid-return distribution,
//! volatility clustering, limit-order sizes and limit-order price offsets
//! from the prevailing mid.

use std::io::Write;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::agents::BehaviorVector;
use crate::error::{Error, Result};
use crate::simulator::{OrderStream, StreamEvent};
use crate::stats;

pub const FEATURE_DIM: usize = 13;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "gain_loss_ratio",
    "kurtosis",
    "zero_return_ratio",
    "vc_1",
    "vc_2",
    "vc_3",
    "vc_mean10",
    "size_le_1",
    "size_le_5",
    "size_le_10",
    "size_le_50",
    "px_within_1_tick",
    "px_within_5_ticks",
];

/// Orders above this size are ignored by the size ratios.
pub const MAX_COUNTED_SIZE: i64 = 100;
/// Orders further than this from the mid are ignored by the price ratios.
pub const MAX_COUNTED_OFFSET_TICKS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub gain_loss_ratio: f64,
    pub kurtosis: f64,
    pub zero_return_ratio: f64,
    pub vc_1: f64,
    pub vc_2: f64,
    pub vc_3: f64,
    pub vc_mean10: f64,
    pub size_le_1: f64,
    pub size_le_5: f64,
    pub size_le_10: f64,
    pub size_le_50: f64,
    pub px_within_1_tick: f64,
    pub px_within_5_ticks: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.gain_loss_ratio,
            self.kurtosis,
            self.zero_return_ratio,
            self.vc_1,
            self.vc_2,
            self.vc_3,
            self.vc_mean10,
            self.size_le_1,
            self.size_le_5,
            self.size_le_10,
            self.size_le_50,
            self.px_within_1_tick,
            self.px_within_5_ticks,
        ]
    }

    pub fn from_array(a: [f64; FEATURE_DIM]) -> Self {
        Self {
            gain_loss_ratio: a[0],
            kurtosis: a[1],
            zero_return_ratio: a[2],
            vc_1: a[3],
            vc_2: a[4],
            vc_3: a[5],
            vc_mean10: a[6],
            size_le_1: a[7],
            size_le_5: a[8],
            size_le_10: a[9],
            size_le_50: a[10],
            px_within_1_tick: a[11],
            px_within_5_ticks: a[12],
        }
    }
}

/// Minutely log returns `ln(P_t / P_{t-1})`.
pub fn returns(mids: &[f64]) -> Result<Vec<f64>> {
    if mids.len() < 2 {
        return Err(Error::InsufficientHistory {
            need: 2,
            have: mids.len(),
        });
    }
    if let Some(p) = mids.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::InvalidInput(format!("non-positive price {p}")));
    }
    Ok(mids.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

/// Excess (Fisher) kurtosis; zero for a constant series.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = stats::mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if !(m2 > 0.0) {
        return 0.0;
    }
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Lag-`lag` Pearson correlation of a series with itself; degenerate cases
/// map to zero.
pub fn autocorr(xs: &[f64], lag: usize) -> f64 {
    if xs.len() <= lag + 1 {
        return 0.0;
    }
    match stats::pearson(&xs[..xs.len() - lag], &xs[lag..]) {
        Some(r) => r,
        None => {
            debug!("zero-variance series at lag {lag}; correlation set to 0");
            0.0
        }
    }
}

fn return_features(r: &[f64]) -> [f64; 7] {
    let up = r.iter().filter(|x| **x > 0.0).count();
    let down = r.iter().filter(|x| **x < 0.0).count();
    let zero = r.iter().filter(|x| **x == 0.0).count();
    let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
    let vc: Vec<f64> = (1..=10).map(|n| autocorr(&sq, n)).collect();
    [
        up as f64 / down.max(1) as f64,
        excess_kurtosis(r),
        zero as f64 / r.len() as f64,
        vc[0],
        vc[1],
        vc[2],
        stats::mean(&vc),
    ]
}

/// Size and price ratios over the day's placements. `offsets` are
/// distances from the prevailing mid in ticks.
fn order_features(sizes: &[i64], offsets: &[f64]) -> [f64; 6] {
    let counted: Vec<i64> = sizes.iter().copied().filter(|s| *s <= MAX_COUNTED_SIZE).collect();
    let size_ratio = |t: i64| {
        if counted.is_empty() {
            0.0
        } else {
            counted.iter().filter(|s| **s <= t).count() as f64 / counted.len() as f64
        }
    };
    let near: Vec<f64> = offsets
        .iter()
        .copied()
        .filter(|d| (1.0..=MAX_COUNTED_OFFSET_TICKS).contains(d))
        .collect();
    let px_ratio = |t: f64| {
        if near.is_empty() {
            0.0
        } else {
            near.iter().filter(|d| **d <= t).count() as f64 / near.len() as f64
        }
    };
    [
        size_ratio(1),
        size_ratio(5),
        size_ratio(10),
        size_ratio(50),
        px_ratio(1.0),
        px_ratio(5.0),
    ]
}

/// The feature extractor Q.
pub fn extract(s: &OrderStream) -> Result<FeatureVector> {
    let r = returns(&s.minute_mids)?;
    let rf = return_features(&r);
    let mut sizes = Vec::new();
    let mut offsets = Vec::new();
    for e in &s.events {
        if let StreamEvent::Place { slot, order, .. } = e {
            sizes.push(order.size);
            offsets.push((order.price as f64 - s.mid_before_slot(*slot)).abs());
        }
    }
    let of = order_features(&sizes, &offsets);
    let mut a = [0.0; FEATURE_DIM];
    a[..7].copy_from_slice(&rf);
    a[7..].copy_from_slice(&of);
    Ok(FeatureVector::from_array(a))
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

/// Smallest standard deviation a normalizer will divide by.
pub const STD_FLOOR: f64 = 1e-6;

impl FeatureNormalizer {
    pub fn fit(corpus: &[FeatureVector]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot fit a normalizer on an empty corpus".into()));
        }
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            let col: Vec<f64> = corpus.iter().map(|f| f.to_array()[d]).collect();
            mean[d] = stats::mean(&col);
            std[d] = stats::std_dev(&col).max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }

    pub fn normalize(&self, f: &FeatureVector) -> [f64; FEATURE_DIM] {
        let a = f.to_array();
        std::array::from_fn(|d| (a[d] - self.mean[d]) / self.std[d])
    }

    pub fn denormalize(&self, z: &[f64; FEATURE_DIM]) -> FeatureVector {
        FeatureVector::from_array(std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d]))
    }
}

/// Squared L2 distance between two feature vectors in z-space.
pub fn reconstruction_error(f_hat: &FeatureVector, f_target: &FeatureVector, norm: &FeatureNormalizer) -> f64 {
    let a = norm.normalize(f_hat);
    let b = norm.normalize(f_target);
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared L2 distance between two behavior vectors in normalized [0, 1]
/// coordinates.
pub fn behavior_variation(a: &BehaviorVector, b: &BehaviorVector) -> f64 {
    let x = a.to_normalized();
    let y = b.to_normalized();
    x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum()
}

/// Writes `day,f1..f13`.
pub fn write_feature_csv<W: Write>(rows: &[(usize, FeatureVector)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["day".to_string()];
    header.extend((1..=FEATURE_DIM).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for (day, f) in rows {
        let mut rec = vec![day.to_string()];
        rec.extend(f.to_array().iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_csv<R: std::io::Read>(r: R) -> Result<Vec<(usize, FeatureVector)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("feature csv: bad column {i}")))
        };
        let day = parse(0)? as usize;
        let mut a = [0.0; FEATURE_DIM];
        for (d, v) in a.iter_mut().enumerate() {
            *v = parse(d + 1)?;
        }
        rows.push((day, FeatureVector::from_array(a)));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn returns_examples() {
        assert_eq!(returns(&[100.0; 5]).unwrap(), vec![0.0; 4]);
        assert_relative_eq!(returns(&[100.0, 110.0]).unwrap()[0], 0.0953102, epsilon = 1e-7);
        assert!(returns(&[100.0]).is_err());
        assert!(returns(&[100.0, 0.0]).is_err());
    }

    #[test]
    fn constant_mid_degenerate_rules() {
        let rf = return_features(&[0.0; 59]);
        assert_eq!(rf[0], 0.0); // gain/loss
        assert_eq!(rf[1], 0.0); // kurtosis
        assert_eq!(rf[2], 1.0); // zero ratio
        assert_eq!(&rf[3..], &[0.0; 4]);
    }

    #[test]
    fn symmetric_returns_have_unit_gain_loss() {
        let r: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        assert_eq!(return_features(&r)[0], 1.0);
    }

    #[test]
    fn autocorr_of_self_at_lag_zero() {
        let xs = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert_relative_eq!(autocorr(&xs, 0), 1.0);
        assert_eq!(autocorr(&[2.0; 10], 1), 0.0);
    }

    #[test]
    fn reconstruction_error_examples() {
        let norm = FeatureNormalizer {
            mean: [0.0; FEATURE_DIM],
            std: [2.0; FEATURE_DIM],
        };
        let f = FeatureVector::from_array([1.0; FEATURE_DIM]);
        assert_eq!(reconstruction_error(&f, &f, &norm), 0.0);
        let mut g = f.to_array();
        g[3] += 2.0;
        assert_relative_eq!(reconstruction_error(&FeatureVector::from_array(g), &f, &norm), 1.0);
        g[5] += 4.0;
        assert_relative_eq!(reconstruction_error(&FeatureVector::from_array(g), &f, &norm), 5.0);
    }

    #[test]
    fn behavior_variation_examples() {
        let a = BehaviorVector::from_normalized([0.2; 5]);
        assert_eq!(behavior_variation(&a, &a), 0.0);
        let lo = BehaviorVector::from_normalized([0.0, 0.3, 0.3, 0.3, 0.3]);
        let hi = BehaviorVector::from_normalized([1.0, 0.3, 0.3, 0.3, 0.3]);
        assert_relative_eq!(behavior_variation(&lo, &hi), 1.0, epsilon = 1e-12);
        let half = BehaviorVector::from_normalized([0.5; 5]);
        let zero = BehaviorVector::from_normalized([0.0; 5]);
        assert_relative_eq!(behavior_variation(&zero, &half), 1.25, epsilon = 1e-12);
    }

    #[test]
    fn feature_csv_round_trip() {
        let rows = vec![(3, FeatureVector::from_array(std::array::from_fn(|i| i as f64 * 0.5)))];
        let mut buf = Vec::new();
        write_feature_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), rows);
    }
}
