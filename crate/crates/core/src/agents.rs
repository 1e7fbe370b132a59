//! Heterogeneous agent ecology.
//!
//! Every agent is a composite of a fundamentalist, a chartist and a noise
//! trader. Its composite weights `g_f, g_c, g_n` are folded-Laplacian draws
//! scaled by the population-level [`BehaviorVector`]; horizon and risk
//! aversion follow from the weights, and the order size comes from the CARA
//! demand `pi(P) = ln(P_hat / P) / (alpha * V * P)`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lob::{Lots, OrderId, Side, Ticks};
use crate::stats;

/// Number of calibrated behavior coordinates.
pub const BEHAVIOR_DIM: usize = 5;

/// Raw bounds of `(delta_f, delta_c, delta_n, tau, p_inst)`.
pub const BEHAVIOR_BOUNDS: [(f64, f64); BEHAVIOR_DIM] =
    [(0.05, 2.0), (0.05, 2.0), (0.05, 2.0), (60.0, 3600.0), (0.0, 0.5)];

pub const BEHAVIOR_NAMES: [&str; BEHAVIOR_DIM] = ["delta_f", "delta_c", "delta_n", "tau", "p_inst"];

/// Population-level behavior parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorVector {
    /// Laplacian scale of the fundamentalist weight.
    pub delta_f: f64,
    /// Laplacian scale of the chartist weight.
    pub delta_c: f64,
    /// Laplacian scale of the noise-trader weight.
    pub delta_n: f64,
    /// Reference investment horizon in slots.
    pub tau: f64,
    /// Probability that an agent is institutional.
    pub p_inst: f64,
}

impl BehaviorVector {
    pub fn new(delta_f: f64, delta_c: f64, delta_n: f64, tau: f64, p_inst: f64) -> Result<Self> {
        let b = Self {
            delta_f,
            delta_c,
            delta_n,
            tau,
            p_inst,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn to_array(&self) -> [f64; BEHAVIOR_DIM] {
        [self.delta_f, self.delta_c, self.delta_n, self.tau, self.p_inst]
    }

    pub fn from_array(raw: [f64; BEHAVIOR_DIM]) -> Result<Self> {
        Self::new(raw[0], raw[1], raw[2], raw[3], raw[4])
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, v), (lo, hi)) in BEHAVIOR_NAMES.iter().zip(self.to_array()).zip(BEHAVIOR_BOUNDS) {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::InvalidBehavior(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Affine map of each coordinate onto [0, 1].
    pub fn to_normalized(&self) -> [f64; BEHAVIOR_DIM] {
        let raw = self.to_array();
        std::array::from_fn(|i| {
            let (lo, hi) = BEHAVIOR_BOUNDS[i];
            (raw[i] - lo) / (hi - lo)
        })
    }

    /// Inverse of [`to_normalized`](Self::to_normalized); coordinates are
    /// clamped to [0, 1] first.
    pub fn from_normalized(norm: [f64; BEHAVIOR_DIM]) -> Self {
        let raw: [f64; BEHAVIOR_DIM] = std::array::from_fn(|i| {
            let (lo, hi) = BEHAVIOR_BOUNDS[i];
            lo + norm[i].clamp(0.0, 1.0) * (hi - lo)
        });
        Self {
            delta_f: raw[0],
            delta_c: raw[1],
            delta_n: raw[2],
            tau: raw[3],
            p_inst: raw[4],
        }
    }

    /// Center of the box in every coordinate.
    pub fn center() -> Self {
        Self::from_normalized([0.5; BEHAVIOR_DIM])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentProfile {
    pub g_f: f64,
    pub g_c: f64,
    pub g_n: f64,
    /// Horizon in slots.
    pub tau_i: u32,
    /// Risk aversion per currency unit.
    pub alpha_i: f64,
    pub institutional: bool,
}

impl AgentProfile {
    /// Builds a profile from composite weights using the horizon and
    /// risk-aversion scaling `(1 + g_f) / (1 + g_c)`.
    pub fn from_weights(g_f: f64, g_c: f64, g_n: f64, tau: f64, alpha_ref: f64, institutional: bool) -> Result<Self> {
        if g_f < 0.0 || g_c < 0.0 || g_n < 0.0 || g_f + g_c + g_n <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "composite weights must be non-negative with positive sum: ({g_f}, {g_c}, {g_n})"
            )));
        }
        let ratio = (1.0 + g_f) / (1.0 + g_c);
        let tau_i = (tau * ratio).round().clamp(1.0, u32::MAX as f64) as u32;
        Ok(Self {
            g_f,
            g_c,
            g_n,
            tau_i,
            alpha_i: alpha_ref * ratio,
            institutional,
        })
    }

    /// Horizon in minutes (60 slots per minute).
    pub fn horizon_minutes(&self) -> f64 {
        self.tau_i as f64 / 60.0
    }
}

/// Cash in currency ticks, holdings in lots. Never negative.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AgentAccount {
    pub cash: i64,
    pub holdings: Lots,
    /// Resting orders as `(id, birth_slot)`; pruned lazily when filled.
    pub resting_orders: Vec<(OrderId, u32)>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub profile: AgentProfile,
    pub account: AgentAccount,
}

/// Builds `n_agents` agents for one day.
///
/// Regular accounts start with cash in `[100, 1000] * P0` per lot and
/// `[100, 1000]` lots; institutional accounts get both ranges doubled.
pub fn build_population<R: Rng + ?Sized>(
    b: &BehaviorVector,
    n_agents: usize,
    alpha_ref: f64,
    price_open: Ticks,
    lot_units: i64,
    rng: &mut R,
) -> Result<Vec<Agent>> {
    b.validate()?;
    if n_agents == 0 {
        return Err(Error::InvalidInput("n_agents must be at least 1".into()));
    }
    if price_open < 1 {
        return Err(Error::InvalidInput("open price must be at least one tick".into()));
    }
    // |Laplace(0, d)| is exponential with mean d.
    let exp = |d: f64| Exp::new(1.0 / d).map_err(|e| Error::InvalidBehavior(e.to_string()));
    let (ef, ec, en) = (exp(b.delta_f)?, exp(b.delta_c)?, exp(b.delta_n)?);
    let lot_value = price_open * lot_units;

    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let (g_f, g_c, g_n) = loop {
            let w = (ef.sample(rng), ec.sample(rng), en.sample(rng));
            if w.0 + w.1 + w.2 > 0.0 {
                break w;
            }
        };
        let institutional = rng.random::<f64>() < b.p_inst;
        let scale = if institutional { 2 } else { 1 };
        let cash = rng.random_range(100 * scale..=1000 * scale) * lot_value;
        let holdings = rng.random_range(100 * scale..=1000 * scale);
        agents.push(Agent {
            profile: AgentProfile::from_weights(g_f, g_c, g_n, b.tau, alpha_ref, institutional)?,
            account: AgentAccount {
                cash,
                holdings,
                resting_orders: Vec::new(),
            },
        });
    }
    Ok(agents)
}

/// Chartist estimate: OLS line over the trailing `horizon` minutes of
/// per-minute mids, extrapolated `horizon` minutes past the last point.
/// Fewer than two points falls back to `current_mid`.
pub fn chartist_estimate(mid_history: &[f64], horizon_minutes: f64, current_mid: f64) -> f64 {
    if mid_history.len() < 2 {
        return current_mid;
    }
    let lookback = ((horizon_minutes.round() as usize) + 1).clamp(2, mid_history.len());
    let window = &mid_history[mid_history.len() - lookback..];
    let (intercept, slope) = stats::ols_line(window);
    intercept + slope * ((lookback - 1) as f64 + horizon_minutes)
}

/// Composite price estimate `(g_f P_f + g_c P_c + g_n P_n) / (g_f + g_c + g_n)`.
///
/// `mid_history` and every price are in currency units. The noise branch
/// draws from `N(current_mid, sigma_noise^2)` truncated to positive values
/// by resampling (at most 8 tries, then the current mid).
pub fn estimate_price<R: Rng + ?Sized>(
    profile: &AgentProfile,
    mid_history: &[f64],
    current_mid: f64,
    fundamental_now: f64,
    sigma_noise: f64,
    rng: &mut R,
) -> f64 {
    let p_f = fundamental_now;
    let p_c = chartist_estimate(mid_history, profile.horizon_minutes(), current_mid);
    let p_n = noise_estimate(current_mid, sigma_noise, rng);
    let w = profile.g_f + profile.g_c + profile.g_n;
    let est = (profile.g_f * p_f + profile.g_c * p_c + profile.g_n * p_n) / w;
    if est > 0.0 && est.is_finite() {
        est
    } else {
        // chartist extrapolation can overshoot below zero on a crash
        current_mid
    }
}

fn noise_estimate<R: Rng + ?Sized>(current_mid: f64, sigma: f64, rng: &mut R) -> f64 {
    let Ok(normal) = Normal::new(current_mid, sigma.max(0.0)) else {
        return current_mid;
    };
    for _ in 0..8 {
        let p = normal.sample(rng);
        if p > 0.0 {
            return p;
        }
    }
    current_mid
}

/// CARA demand: target holding in lots at candidate price `price`.
pub fn desired_holding(p_hat: f64, price: f64, alpha_i: f64, var_mid: f64) -> f64 {
    (p_hat / price).ln() / (alpha_i * var_mid * price)
}

/// Variance of the trailing per-minute mids over the agent horizon,
/// floored at `floor`.
pub fn horizon_variance(mid_history: &[f64], horizon_minutes: f64, floor: f64) -> f64 {
    if mid_history.len() < 2 {
        return floor;
    }
    let lookback = ((horizon_minutes.round() as usize) + 1).clamp(2, mid_history.len());
    stats::variance(&mid_history[mid_history.len() - lookback..]).max(floor)
}

/// A resting order of the deciding agent, as seen at decision time.
#[derive(Debug, Clone, Copy)]
pub struct RestingOrder {
    pub id: OrderId,
    pub birth_slot: u32,
    pub side: Side,
    pub price: Ticks,
    pub remaining: Lots,
}

/// Market snapshot an agent decides on.
#[derive(Debug, Clone, Copy)]
pub struct MarketView<'a> {
    /// Current mid in ticks.
    pub mid_ticks: f64,
    /// Per-minute mids so far, in currency.
    pub mid_history: &'a [f64],
    pub fundamental_now: f64,
    pub slot: u32,
}

/// Static order-making parameters shared by all agents of a day.
#[derive(Debug, Clone, Copy)]
pub struct OrderRules {
    pub tick_size: f64,
    pub lot_units: i64,
    pub lambda_band: f64,
    pub sigma_noise: f64,
    pub var_floor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrderRequest {
    pub cancels: Vec<OrderId>,
    /// `(side, price_ticks, size_lots)`.
    pub order: Option<(Side, Ticks, Lots)>,
}

/// One wake-up: stale cancels plus at most one limit order.
///
/// Cancels every resting order older than the agent horizon, draws a price
/// uniformly in `mid * (1 +/- lambda)`, and trades toward the CARA target
/// holding, clamped by free cash (bids) or free holdings (asks). Resources
/// locked by any resting order, stale or not, are not free.
pub fn make_order<R: Rng + ?Sized>(
    profile: &AgentProfile,
    account: &AgentAccount,
    resting: &[RestingOrder],
    view: &MarketView<'_>,
    rules: &OrderRules,
    rng: &mut R,
) -> OrderRequest {
    let mut request = OrderRequest::default();
    let mut locked_cash = 0i64;
    let mut locked_lots = 0i64;
    for o in resting {
        if view.slot.saturating_sub(o.birth_slot) > profile.tau_i {
            request.cancels.push(o.id);
        }
        // A stale order stays locked: another agent may fill it earlier in
        // the same batch, before the cancel is applied.
        match o.side {
            Side::Bid => locked_cash += o.price * o.remaining * rules.lot_units,
            Side::Ask => locked_lots += o.remaining,
        }
    }
    let free_cash = (account.cash - locked_cash).max(0);
    let free_lots = (account.holdings - locked_lots).max(0);

    let mid = view.mid_ticks * rules.tick_size;
    let p_hat = estimate_price(
        profile,
        view.mid_history,
        mid,
        view.fundamental_now,
        rules.sigma_noise,
        rng,
    );
    let lo = mid * (1.0 - rules.lambda_band);
    let hi = mid * (1.0 + rules.lambda_band);
    let drawn = if hi > lo { rng.random_range(lo..=hi) } else { mid };
    let price_ticks = ((drawn / rules.tick_size).round() as Ticks).max(1);
    let price = price_ticks as f64 * rules.tick_size;

    let var = horizon_variance(view.mid_history, profile.horizon_minutes(), rules.var_floor);
    let target = desired_holding(p_hat, price, profile.alpha_i, var);
    let target_lots = round_lots(target);
    let delta = target_lots.saturating_sub(account.holdings);

    let size = if delta > 0 {
        let affordable = free_cash / (price_ticks * rules.lot_units);
        delta.min(affordable)
    } else if delta < 0 {
        (-delta).min(free_lots)
    } else {
        0
    };
    if size > 0 {
        let side = if delta > 0 { Side::Bid } else { Side::Ask };
        request.order = Some((side, price_ticks, size));
    }
    request
}

/// Round-half-to-even to whole lots, saturating far outside the i64 range.
pub fn round_lots(x: f64) -> Lots {
    if x.is_nan() {
        return 0;
    }
    x.clamp(-1e15, 1e15).round_ties_even() as Lots
}
