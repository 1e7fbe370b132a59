//! Explicit market state: monthly macro indicators plus trend (average true
//! range over close) and noise (one minus the efficiency ratio) over the
//! trailing twenty daily bars.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::STD_FLOOR;
use crate::simulator::OrderStream;
use crate::stats;

pub const STATE_DIM: usize = 5;
pub const STATE_NAMES: [&str; STATE_DIM] = ["cpi", "ppi", "pmi", "trend", "noise"];
/// Trading days in the trend and noise windows.
pub const BAR_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub cpi: f64,
    pub ppi: f64,
    pub pmi: f64,
    pub trend: f64,
    pub noise: f64,
}

impl MarketState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.cpi, self.ppi, self.pmi, self.trend, self.noise]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            cpi: a[0],
            ppi: a[1],
            pmi: a[2],
            trend: a[3],
            noise: a[4],
        }
    }
}

/// Daily OHLC of the mid price, in currency units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyBar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl DailyBar {
    pub fn from_mids(mids: &[f64]) -> Result<Self> {
        let (&open, &close) = match (mids.first(), mids.last()) {
            (Some(o), Some(c)) => (o, c),
            _ => return Err(Error::InvalidInput("empty mid series".into())),
        };
        let high = mids.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let low = mids.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { open, high, low, close })
    }

    /// Bar of a day's per-slot mids.
    pub fn from_stream(s: &OrderStream) -> Result<Self> {
        let tick = s.meta.tick_size;
        let mut mids = Vec::with_capacity(s.slot_mids.len() + 1);
        mids.push(s.meta.open_price as f64 * tick);
        mids.extend(s.slot_mids.iter().map(|m| m * tick));
        Self::from_mids(&mids)
    }
}

fn last_window<'a, T>(xs: &'a [T], what: &str) -> Result<&'a [T]> {
    if xs.len() < BAR_WINDOW {
        log::debug!("{what} needs {BAR_WINDOW} points, got {}", xs.len());
        return Err(Error::InsufficientHistory {
            need: BAR_WINDOW,
            have: xs.len(),
        });
    }
    Ok(&xs[xs.len() - BAR_WINDOW..])
}

/// Mean of `TR_d / close_d` over the last twenty bars; the first bar of
/// the window has no previous close and uses `high - low`.
pub fn trend(bars: &[DailyBar]) -> Result<f64> {
    let w = last_window(bars, "trend")?;
    let mut total = 0.0;
    for (d, bar) in w.iter().enumerate() {
        let range = bar.high - bar.low;
        let tr = if d == 0 {
            range
        } else {
            let prev = w[d - 1].close;
            range.max((bar.high - prev).abs()).max((bar.low - prev).abs())
        };
        total += tr / bar.close;
    }
    Ok(total / BAR_WINDOW as f64)
}

/// `1 - |P_T - P_0| / sum |P_d - P_{d-1}|` over the last twenty closes;
/// zero when the path never moves.
pub fn noise(closes: &[f64]) -> Result<f64> {
    let w = last_window(closes, "noise")?;
    let path: f64 = w.windows(2).map(|p| (p[1] - p[0]).abs()).sum();
    if path <= 0.0 {
        return Ok(0.0);
    }
    let er = (w[BAR_WINDOW - 1] - w[0]).abs() / path;
    Ok(1.0 - er)
}

/// Maps trading-day indices onto calendar months.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradingCalendar {
    pub start_year: i32,
    /// 1-based.
    pub start_month: u32,
    pub days_per_month: usize,
}

impl TradingCalendar {
    pub fn month_of(&self, day: usize) -> (i32, u32) {
        let k = day / self.days_per_month.max(1);
        let m0 = (self.start_month as usize - 1) + k;
        (self.start_year + (m0 / 12) as i32, (m0 % 12) as u32 + 1)
    }
}

/// Monthly macro indicators keyed by `(year, month)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MacroTable {
    rows: BTreeMap<(i32, u32), [f64; 3]>,
}

impl MacroTable {
    pub fn insert(&mut self, year: i32, month: u32, cpi: f64, ppi: f64, pmi: f64) {
        self.rows.insert((year, month), [cpi, ppi, pmi]);
    }

    pub fn get(&self, year: i32, month: u32) -> Result<[f64; 3]> {
        self.rows
            .get(&(year, month))
            .copied()
            .ok_or(Error::MissingMonth { year, month })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads `year,month,cpi,ppi,pmi`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut t = Self::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = || Error::InvalidInput(format!("macro csv row {}: malformed", line + 2));
            if rec.len() != 5 {
                return Err(bad());
            }
            let year: i32 = rec[0].trim().parse().map_err(|_| bad())?;
            let month: u32 = rec[1].trim().parse().map_err(|_| bad())?;
            if !(1..=12).contains(&month) {
                return Err(bad());
            }
            let v: Vec<f64> = (2..5)
                .map(|i| rec[i].trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            t.insert(year, month, v[0], v[1], v[2]);
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["year", "month", "cpi", "ppi", "pmi"])?;
        for ((y, m), v) in &self.rows {
            out.write_record([
                y.to_string(),
                m.to_string(),
                v[0].to_string(),
                v[1].to_string(),
                v[2].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Raw state of `day`: that month's macro row, with trend and noise over
/// the twenty bars strictly before `day` (`bars` is indexed by day).
pub fn assemble(day: usize, macros: &MacroTable, calendar: &TradingCalendar, bars: &[DailyBar]) -> Result<MarketState> {
    if day < BAR_WINDOW || bars.len() < day {
        return Err(Error::InsufficientHistory {
            need: BAR_WINDOW,
            have: day.min(bars.len()),
        });
    }
    let (year, month) = calendar.month_of(day);
    let [cpi, ppi, pmi] = macros.get(year, month)?;
    let window = &bars[day - BAR_WINDOW..day];
    let closes: Vec<f64> = window.iter().map(|b| b.close).collect();
    Ok(MarketState {
        cpi,
        ppi,
        pmi,
        trend: trend(window)?,
        noise: noise(&closes)?,
    })
}

/// Per-field z-score statistics of a training period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub mean: [f64; STATE_DIM],
    pub std: [f64; STATE_DIM],
}

impl StateNormalizer {
    pub fn fit(states: &[MarketState]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidInput("cannot fit state statistics on no days".into()));
        }
        let mut mean = [0.0; STATE_DIM];
        let mut std = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            let col: Vec<f64> = states.iter().map(|s| s.to_array()[d]).collect();
            mean[d] = stats::mean(&col);
            std[d] = stats::std_dev(&col).max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; STATE_DIM],
            std: [1.0; STATE_DIM],
        }
    }

    pub fn normalize(&self, s: &MarketState) -> [f64; STATE_DIM] {
        let a = s.to_array();
        std::array::from_fn(|d| (a[d] - self.mean[d]) / self.std[d])
    }

    pub fn denormalize(&self, z: &[f64; STATE_DIM]) -> MarketState {
        MarketState::from_array(std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d]))
    }
}

/// Writes `day,cpi,ppi,pmi,trend,noise`.
pub fn write_state_csv<W: Write>(rows: &[(usize, [f64; STATE_DIM])], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["day"];
    header.extend(STATE_NAMES);
    out.write_record(&header)?;
    for (day, v) in rows {
        let mut rec = vec![day.to_string()];
        rec.extend(v.iter().map(|x| x.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_state_csv<R: Read>(r: R) -> Result<Vec<(usize, [f64; STATE_DIM])>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::InvalidInput(format!("state csv row {}: malformed", line + 2));
        if rec.len() != STATE_DIM + 1 {
            return Err(bad());
        }
        let day: usize = rec[0].parse().map_err(|_| bad())?;
        let mut v = [0.0; STATE_DIM];
        for (d, x) in v.iter_mut().enumerate() {
            *x = rec[d + 1].parse().map_err(|_| bad())?;
        }
        rows.push((day, v));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bar(high: f64, low: f64, close: f64) -> DailyBar {
        DailyBar {
            open: close,
            high,
            low,
            close,
        }
    }

    #[test]
    fn trend_examples() {
        let flat = vec![bar(10.0, 10.0, 10.0); 20];
        assert_eq!(trend(&flat).unwrap(), 0.0);

        let ranged = vec![bar(10.5, 9.5, 10.0); 20];
        assert_relative_eq!(trend(&ranged).unwrap(), 0.1, epsilon = 1e-15);

        // Gap day: range 1 but the high sits 2 above the previous close.
        let mut gap = vec![bar(10.5, 9.5, 10.0); 20];
        gap[19] = bar(12.0, 11.0, 11.5);
        let tr_gap = 2.0 / 11.5;
        let want = (19.0 * 0.1 + tr_gap) / 20.0;
        assert_relative_eq!(trend(&gap).unwrap(), want, epsilon = 1e-15);
        assert!(trend(&gap[..19]).is_err());
    }

    #[test]
    fn noise_examples() {
        let up: Vec<f64> = (0..20).map(|i| 10.0 + i as f64).collect();
        assert_eq!(noise(&up).unwrap(), 0.0);
        let mut zig: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 10.0 } else { 11.0 }).collect();
        zig[19] = 10.0;
        zig[18] = 11.0;
        assert_relative_eq!(noise(&zig).unwrap(), 1.0);
        assert_eq!(noise(&[5.0; 20]).unwrap(), 0.0);
        assert!(noise(&[1.0; 3]).is_err());
    }

    #[test]
    fn calendar_and_missing_month() {
        let cal = TradingCalendar {
            start_year: 2020,
            start_month: 11,
            days_per_month: 5,
        };
        assert_eq!(cal.month_of(0), (2020, 11));
        assert_eq!(cal.month_of(4), (2020, 11));
        assert_eq!(cal.month_of(5), (2020, 12));
        assert_eq!(cal.month_of(10), (2021, 1));

        let mut t = MacroTable::default();
        t.insert(2020, 11, 1.0, 2.0, 3.0);
        let bars = vec![bar(10.5, 9.5, 10.0); 30];
        let a = assemble(20, &t, &cal, &bars);
        assert!(matches!(a, Err(Error::MissingMonth { year: 2021, month: 3 })));
    }

    #[test]
    fn same_month_same_macro() {
        let cal = TradingCalendar {
            start_year: 2020,
            start_month: 1,
            days_per_month: 21,
        };
        let mut t = MacroTable::default();
        t.insert(2020, 1, 1.0, 2.0, 3.0);
        t.insert(2020, 2, 4.0, 5.0, 6.0);
        let bars: Vec<DailyBar> = (0..30).map(|i| bar(10.0 + 0.1 * i as f64, 9.0, 9.5)).collect();
        let a = assemble(21, &t, &cal, &bars).unwrap();
        let b = assemble(25, &t, &cal, &bars).unwrap();
        assert_eq!((a.cpi, a.ppi, a.pmi), (b.cpi, b.ppi, b.pmi));
        assert_eq!(a.cpi, 4.0);
        assert!(assemble(19, &t, &cal, &bars).is_err());
    }

    #[test]
    fn macro_csv_round_trip() {
        let mut t = MacroTable::default();
        t.insert(2021, 3, 0.5, -1.25, 50.1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(MacroTable::read_csv(&buf[..]).unwrap(), t);
        assert!(MacroTable::read_csv("year,month,cpi,ppi,pmi\n2021,13,1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn normalizer_standardizes() {
        let states: Vec<MarketState> = (0..10)
            .map(|i| MarketState::from_array([i as f64, 2.0 * i as f64, 1.0, 0.01 * i as f64, 0.5]))
            .collect();
        let n = StateNormalizer::fit(&states).unwrap();
        let z: Vec<[f64; 5]> = states.iter().map(|s| n.normalize(s)).collect();
        for d in [0, 1, 3] {
            let col: Vec<f64> = z.iter().map(|v| v[d]).collect();
            assert!(stats::mean(&col).abs() < 1e-12);
            assert_relative_eq!(stats::std_dev(&col), 1.0, epsilon = 1e-12);
        }
    }
}
