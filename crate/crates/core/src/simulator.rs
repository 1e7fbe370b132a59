//! Discrete-slot multi-agent market.
//!
//! One trading day is `slots_per_day` one-second slots. In each slot every
//! agent wakes independently with `wake_prob`; woken agents submit stale
//! cancels plus at most one limit order. At slot end the batch is shuffled
//! and applied to the book in that order, trades settle immediately, and the
//! mid is sampled once the batch completes.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::agents::{self, Agent, AgentAccount, BehaviorVector, MarketView, OrderRules, RestingOrder};
use crate::error::{Error, Result};
use crate::lob::{LimitOrder, OrderBook, OrderId, Side, Ticks, TradeEvent};
use crate::seed;

pub const SLOTS_PER_MINUTE: u32 = 60;
/// Fundamental sample interval: ten minutes.
pub const FUNDAMENTAL_INTERVAL_SLOTS: u32 = 600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub slots_per_day: u32,
    pub n_agents: usize,
    pub wake_prob: f64,
    /// Currency per tick.
    pub tick_size: f64,
    /// Asset units per lot.
    pub lot_size: u32,
    /// Day open in ticks.
    pub open_price: Ticks,
    /// Reference risk aversion per currency unit.
    pub alpha_ref: f64,
    /// Half-width of the candidate price band as a fraction of mid.
    pub lambda_band: f64,
    pub rng_seed: u64,
    /// Label of the agent-mix rules the run follows.
    pub model_tag: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            slots_per_day: 14_400,
            n_agents: 500,
            wake_prob: 0.01,
            tick_size: 0.01,
            lot_size: 1,
            open_price: 1000,
            alpha_ref: 0.1,
            lambda_band: 0.05,
            rng_seed: 0,
            model_tag: "composite-fcn-cara".into(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots_per_day < SLOTS_PER_MINUTE || !self.slots_per_day.is_multiple_of(SLOTS_PER_MINUTE) {
            return Err(Error::config(
                "slots_per_day",
                "must be a positive multiple of 60 (at least one minute)",
            ));
        }
        if self.n_agents == 0 {
            return Err(Error::config("n_agents", "must be at least 1"));
        }
        if !(self.wake_prob >= 0.0 && self.wake_prob <= 1.0) {
            return Err(Error::config("wake_prob", "must lie in [0, 1]"));
        }
        if !(self.tick_size > 0.0) {
            return Err(Error::config("tick_size", "must be positive"));
        }
        if self.lot_size == 0 {
            return Err(Error::config("lot_size", "must be at least 1"));
        }
        if self.open_price < 1 {
            return Err(Error::config("open_price", "must be at least one tick"));
        }
        if !(self.alpha_ref > 0.0) {
            return Err(Error::config("alpha_ref", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lambda_band) {
            return Err(Error::config("lambda_band", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }

    pub fn with_open(&self, open_price: Ticks) -> Self {
        Self {
            open_price,
            ..self.clone()
        }
    }

    pub fn minutes_per_day(&self) -> usize {
        (self.slots_per_day / SLOTS_PER_MINUTE) as usize
    }

    /// Number of fundamental samples per day.
    pub fn fundamental_len(&self) -> usize {
        (self.slots_per_day / FUNDAMENTAL_INTERVAL_SLOTS).max(1) as usize
    }
}

/// Fundamental value on a ten-minute grid, piecewise constant in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalSeries {
    /// Prices in currency units.
    pub values: Vec<f64>,
}

impl FundamentalSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("fundamental series is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("fundamental value {v} is not positive")));
        }
        Ok(Self { values })
    }

    pub fn flat(price: f64, len: usize) -> Self {
        Self {
            values: vec![price; len],
        }
    }

    pub fn at_slot(&self, slot: u32) -> f64 {
        let k = (slot / FUNDAMENTAL_INTERVAL_SLOTS) as usize;
        self.values[k.min(self.values.len() - 1)]
    }

    /// `ln(P_k / P_open)`, the surrogate input encoding.
    pub fn log_relative(&self, open_price: f64) -> Vec<f64> {
        self.values.iter().map(|p| (p / open_price).ln()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub open_price: Ticks,
    pub tick_size: f64,
    pub lot_size: u32,
    pub slots_per_day: u32,
    pub seed: u64,
    /// Agent wake-ups over the day, including those that produced nothing.
    #[serde(default)]
    pub wakeups: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Place {
        slot: u32,
        seq: u32,
        order: LimitOrder,
    },
    Cancel {
        slot: u32,
        seq: u32,
        id: OrderId,
        agent: usize,
    },
    Trade {
        slot: u32,
        seq: u32,
        trade: TradeEvent,
    },
}

impl StreamEvent {
    pub fn slot(&self) -> u32 {
        match self {
            StreamEvent::Place { slot, .. } | StreamEvent::Cancel { slot, .. } | StreamEvent::Trade { slot, .. } => {
                *slot
            }
        }
    }

    pub fn seq(&self) -> u32 {
        match self {
            StreamEvent::Place { seq, .. } | StreamEvent::Cancel { seq, .. } | StreamEvent::Trade { seq, .. } => *seq,
        }
    }
}

/// One day of activity: events plus mid series in ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStream {
    pub meta: StreamMeta,
    pub events: Vec<StreamEvent>,
    /// Mid at the start of each minute.
    pub minute_mids: Vec<f64>,
    /// Mid after each slot's batch.
    pub slot_mids: Vec<f64>,
}

impl OrderStream {
    /// Mid in ticks as seen by agents at the start of `slot`.
    pub fn mid_before_slot(&self, slot: u32) -> f64 {
        if slot == 0 {
            self.meta.open_price as f64
        } else {
            self.slot_mids[slot as usize - 1]
        }
    }

    pub fn minute_mids_currency(&self) -> Vec<f64> {
        self.minute_mids.iter().map(|m| m * self.meta.tick_size).collect()
    }

    pub fn count_places(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, StreamEvent::Place { .. }))
            .count()
    }

    /// Rebuilds the mid series by replaying placements and cancels through a
    /// fresh book. Trades are regenerated by the book and must agree with
    /// the recorded ones.
    pub fn replay(meta: StreamMeta, events: Vec<StreamEvent>) -> Result<Self> {
        let mut book = OrderBook::new(meta.open_price, meta.tick_size, meta.lot_size as f64);
        let mut slot_mids = Vec::with_capacity(meta.slots_per_day as usize);
        let mut pending: std::collections::VecDeque<TradeEvent> = Default::default();
        let mut idx = 0;
        for slot in 0..meta.slots_per_day {
            while idx < events.len() && events[idx].slot() == slot {
                match &events[idx] {
                    StreamEvent::Place { order, .. } => {
                        if let Some(t) = pending.front() {
                            return Err(Error::InvalidInput(format!(
                                "trade {}x{} missing from stream before order {}",
                                t.maker, t.taker, order.id
                            )));
                        }
                        pending.extend(book.place_limit(order.clone())?);
                    }
                    StreamEvent::Cancel { id, .. } => {
                        if !book.cancel(*id) {
                            return Err(Error::InvalidInput(format!("cancel of order {id} that is not resting")));
                        }
                    }
                    StreamEvent::Trade { trade, .. } => {
                        let expected = pending
                            .pop_front()
                            .ok_or_else(|| Error::InvalidInput(format!("unexpected trade at slot {slot}")))?;
                        if expected.maker != trade.maker
                            || expected.taker != trade.taker
                            || expected.price != trade.price
                            || expected.size != trade.size
                        {
                            return Err(Error::InvalidInput(format!(
                                "trade mismatch at slot {slot}: recorded {trade:?}, replayed {expected:?}"
                            )));
                        }
                    }
                }
                idx += 1;
            }
            slot_mids.push(book.mid_price());
        }
        if idx != events.len() {
            return Err(Error::InvalidInput(format!(
                "event at slot {} beyond the end of day",
                events[idx].slot()
            )));
        }
        let minute_mids = minute_series(meta.open_price, &slot_mids, meta.slots_per_day);
        Ok(Self {
            meta,
            events,
            minute_mids,
            slot_mids,
        })
    }
}

fn minute_series(open: Ticks, slot_mids: &[f64], slots_per_day: u32) -> Vec<f64> {
    (0..slots_per_day / SLOTS_PER_MINUTE)
        .map(|m| {
            if m == 0 {
                open as f64
            } else {
                slot_mids[(m * SLOTS_PER_MINUTE - 1) as usize]
            }
        })
        .collect()
}

/// Applies one fill to an account. `side` is the agent's role: `Bid` for
/// the buyer.
///
/// # Panics
///
/// If the account would go negative, which means an upstream clamp failed.
pub fn settle(account: &mut AgentAccount, trade: &TradeEvent, side: Side, lot_units: i64) {
    let notional = trade.price * trade.size * lot_units;
    match side {
        Side::Bid => {
            assert!(
                account.cash >= notional,
                "settlement would overdraw cash: {} < {notional}",
                account.cash
            );
            account.cash -= notional;
            account.holdings += trade.size;
        }
        Side::Ask => {
            assert!(
                account.holdings >= trade.size,
                "settlement would short: {} < {}",
                account.holdings,
                trade.size
            );
            account.holdings -= trade.size;
            account.cash += notional;
        }
    }
}

/// Runs one trading day.
pub fn run_day(cfg: &SimConfig, b: &BehaviorVector, fund: &FundamentalSeries) -> Result<OrderStream> {
    cfg.validate()?;
    b.validate()?;
    if fund.values.is_empty() {
        return Err(Error::InvalidInput("fundamental series is empty".into()));
    }
    let mut rng = seed::rng(cfg.rng_seed);
    let lot_units = cfg.lot_size as i64;
    let mut agents: Vec<Agent> =
        agents::build_population(b, cfg.n_agents, cfg.alpha_ref, cfg.open_price, lot_units, &mut rng)?;
    let open_currency = cfg.open_price as f64 * cfg.tick_size;
    let rules = OrderRules {
        tick_size: cfg.tick_size,
        lot_units,
        lambda_band: cfg.lambda_band,
        sigma_noise: 0.01 * open_currency,
        var_floor: 1e-8 * open_currency * open_currency,
    };

    let mut book = OrderBook::new(cfg.open_price, cfg.tick_size, cfg.lot_size as f64);
    let mut events = Vec::new();
    let mut slot_mids = Vec::with_capacity(cfg.slots_per_day as usize);
    let mut history: Vec<f64> = Vec::with_capacity(cfg.minutes_per_day());
    let mut next_id = 1u64;
    let mut wakeups = 0u64;
    // Bernoulli wake-ups per slot, drawn as geometric gaps so idle agents
    // cost nothing.
    let gap = if cfg.wake_prob > 0.0 {
        Some(Geometric::new(cfg.wake_prob).map_err(|e| Error::config("wake_prob", e.to_string()))?)
    } else {
        None
    };
    let mut wake_at: Vec<Vec<usize>> = vec![Vec::new(); cfg.slots_per_day as usize];
    if let Some(gap) = &gap {
        for i in 0..agents.len() {
            let first = gap.sample(&mut rng);
            if first < cfg.slots_per_day as u64 {
                wake_at[first as usize].push(i);
            }
        }
    }
    let mut batch: Vec<(usize, agents::OrderRequest)> = Vec::new();
    let mut resting_buf: Vec<RestingOrder> = Vec::new();

    for slot in 0..cfg.slots_per_day {
        if slot % SLOTS_PER_MINUTE == 0 {
            history.push(book.mid_price() * cfg.tick_size);
        }
        let view = MarketView {
            mid_ticks: book.mid_price(),
            mid_history: &history,
            fundamental_now: fund.at_slot(slot),
            slot,
        };
        batch.clear();
        let mut woken = std::mem::take(&mut wake_at[slot as usize]);
        woken.sort_unstable();
        for &i in &woken {
            let Some(gap) = &gap else { break };
            let next = slot as u64 + 1 + gap.sample(&mut rng);
            if next < cfg.slots_per_day as u64 {
                wake_at[next as usize].push(i);
            }
            let agent = &mut agents[i];
            wakeups += 1;
            agent.account.resting_orders.retain(|(id, _)| book.contains(*id));
            resting_buf.clear();
            resting_buf.extend(agent.account.resting_orders.iter().filter_map(|(id, birth)| {
                book.order(*id).map(|o| RestingOrder {
                    id: *id,
                    birth_slot: *birth,
                    side: o.side,
                    price: o.price,
                    remaining: o.size,
                })
            }));
            let req = agents::make_order(&agent.profile, &agent.account, &resting_buf, &view, &rules, &mut rng);
            if !req.cancels.is_empty() || req.order.is_some() {
                batch.push((i, req));
            }
        }
        batch.shuffle(&mut rng);

        let mut seq = 0u32;
        for (agent_idx, req) in batch.drain(..) {
            for id in req.cancels {
                if book.cancel(id) {
                    events.push(StreamEvent::Cancel {
                        slot,
                        seq,
                        id,
                        agent: agent_idx,
                    });
                    seq += 1;
                }
            }
            let Some((side, price, size)) = req.order else {
                continue;
            };
            let order = LimitOrder {
                id: OrderId(next_id),
                agent: agent_idx,
                side,
                price,
                size,
                birth_slot: slot,
            };
            next_id += 1;
            events.push(StreamEvent::Place {
                slot,
                seq,
                order: order.clone(),
            });
            seq += 1;
            let trades = book.place_limit(order.clone())?;
            for trade in trades {
                settle(&mut agents[trade.buyer_agent()].account, &trade, Side::Bid, lot_units);
                settle(&mut agents[trade.seller_agent()].account, &trade, Side::Ask, lot_units);
                events.push(StreamEvent::Trade { slot, seq, trade });
                seq += 1;
            }
            if book.contains(order.id) {
                agents[agent_idx].account.resting_orders.push((order.id, slot));
            }
        }
        slot_mids.push(book.mid_price());
    }

    let minute_mids = minute_series(cfg.open_price, &slot_mids, cfg.slots_per_day);
    Ok(OrderStream {
        meta: StreamMeta {
            open_price: cfg.open_price,
            tick_size: cfg.tick_size,
            lot_size: cfg.lot_size,
            slots_per_day: cfg.slots_per_day,
            seed: cfg.rng_seed,
            wakeups,
        },
        events,
        minute_mids,
        slot_mids,
    })
}

/// Runs days while counting calls, so calibrators can be audited.
#[derive(Debug)]
pub struct Simulator {
    cfg: SimConfig,
    calls: AtomicU64,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn run(
        &self,
        b: &BehaviorVector,
        fund: &FundamentalSeries,
        open_price: Ticks,
        seed: u64,
    ) -> Result<OrderStream> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        run_day(&self.cfg.with_seed(seed).with_open(open_price), b, fund)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Fundamental series sampled from a stream's mid at every ten-minute
/// boundary, in currency units.
pub fn fundamental_from_stream(s: &OrderStream) -> Result<FundamentalSeries> {
    let per_sample = (FUNDAMENTAL_INTERVAL_SLOTS / SLOTS_PER_MINUTE) as usize;
    if s.minute_mids.len() < per_sample {
        return Err(Error::InsufficientHistory {
            need: per_sample,
            have: s.minute_mids.len(),
        });
    }
    let values = s
        .minute_mids
        .iter()
        .step_by(per_sample)
        .take(s.minute_mids.len() / per_sample)
        .map(|m| m * s.meta.tick_size)
        .collect();
    FundamentalSeries::new(values)
}

pub const STREAM_HEADER: [&str; 9] = [
    "slot",
    "seq",
    "kind",
    "order_id",
    "agent",
    "side",
    "price_ticks",
    "size_lots",
    "match_id",
];

/// Writes the event CSV. TRADE rows carry the maker id in `order_id`, the
/// taker id in `match_id`, and the taker's agent and side.
pub fn write_stream_csv<W: Write>(s: &OrderStream, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(STREAM_HEADER)?;
    for e in &s.events {
        let row: [String; 9] = match e {
            StreamEvent::Place { slot, seq, order } => [
                slot.to_string(),
                seq.to_string(),
                "PLACE".into(),
                order.id.to_string(),
                order.agent.to_string(),
                order.side.as_str().into(),
                order.price.to_string(),
                order.size.to_string(),
                String::new(),
            ],
            StreamEvent::Cancel { slot, seq, id, agent } => [
                slot.to_string(),
                seq.to_string(),
                "CANCEL".into(),
                id.to_string(),
                agent.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
            StreamEvent::Trade { slot, seq, trade } => [
                slot.to_string(),
                seq.to_string(),
                "TRADE".into(),
                trade.maker.to_string(),
                trade.taker_agent.to_string(),
                trade.taker_side.as_str().into(),
                trade.price.to_string(),
                trade.size.to_string(),
                trade.taker.to_string(),
            ],
        };
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidInput(format!("row {line}: bad `{}`", STREAM_HEADER[i])))
}

fn parse_side(rec: &csv::StringRecord, line: usize) -> Result<Side> {
    match rec.get(5) {
        Some("BID") => Ok(Side::Bid),
        Some("ASK") => Ok(Side::Ask),
        _ => Err(Error::InvalidInput(format!("row {line}: bad `side`"))),
    }
}

/// Reads an event CSV and replays it to rebuild the mid series.
pub fn read_stream_csv<R: Read>(meta: StreamMeta, r: R) -> Result<OrderStream> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != STREAM_HEADER {
        return Err(Error::InvalidInput(format!("unexpected stream header {header:?}")));
    }
    let mut events = Vec::new();
    // the maker agent is not on the TRADE row; recover it from placements
    let mut owner = std::collections::HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let slot: u32 = parse_field(&rec, 0, line)?;
        let seq: u32 = parse_field(&rec, 1, line)?;
        let id = OrderId(parse_field(&rec, 3, line)?);
        let agent: usize = parse_field(&rec, 4, line)?;
        let event = match rec.get(2) {
            Some("PLACE") => {
                owner.insert(id, agent);
                StreamEvent::Place {
                    slot,
                    seq,
                    order: LimitOrder {
                        id,
                        agent,
                        side: parse_side(&rec, line)?,
                        price: parse_field(&rec, 6, line)?,
                        size: parse_field(&rec, 7, line)?,
                        birth_slot: slot,
                    },
                }
            }
            Some("CANCEL") => StreamEvent::Cancel { slot, seq, id, agent },
            Some("TRADE") => {
                let maker_agent = *owner
                    .get(&id)
                    .ok_or_else(|| Error::InvalidInput(format!("row {line}: trade against unknown order {id}")))?;
                StreamEvent::Trade {
                    slot,
                    seq,
                    trade: TradeEvent {
                        slot,
                        maker: id,
                        taker: OrderId(parse_field(&rec, 8, line)?),
                        maker_agent,
                        taker_agent: agent,
                        taker_side: parse_side(&rec, line)?,
                        price: parse_field(&rec, 6, line)?,
                        size: parse_field(&rec, 7, line)?,
                        self_trade: maker_agent == agent,
                    },
                }
            }
            other => {
                return Err(Error::InvalidInput(format!("row {line}: unknown kind {other:?}")));
            }
        };
        events.push(event);
    }
    OrderStream::replay(meta, events)
}

pub fn write_mid_csv<W: Write>(s: &OrderStream, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["minute", "mid_ticks"])?;
    for (m, mid) in s.minute_mids.iter().enumerate() {
        out.write_record([m.to_string(), mid.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `<stem>.csv`, `<stem>.meta.toml` and `<stem>.mid.csv`.
pub fn save_stream(s: &OrderStream, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_stream_csv(s, std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
    std::fs::write(dir.join(format!("{stem}.meta.toml")), toml::to_string(&s.meta)?)?;
    write_mid_csv(s, std::fs::File::create(dir.join(format!("{stem}.mid.csv")))?)?;
    Ok(())
}

pub fn load_stream(dir: &Path, stem: &str) -> Result<OrderStream> {
    let meta_path = dir.join(format!("{stem}.meta.toml"));
    let meta: StreamMeta = toml::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", meta_path.display())))?,
    )?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let file =
        std::fs::File::open(&csv_path).map_err(|e| Error::MissingInput(format!("{}: {e}", csv_path.display())))?;
    read_stream_csv(meta, file)
}
