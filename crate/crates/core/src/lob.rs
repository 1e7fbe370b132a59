//! Price-time-priority limit order book.
//!
//! Prices are integer tick counts and sizes are integer lot counts. An
//! incoming order matches against the opposite side while it crosses; every
//! fill executes at the resting (maker) price, best price first and FIFO
//! within a price level. Whatever is left of a limit order rests; whatever is
//! left of a market order is discarded.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::LobError;

/// Price in ticks.
pub type Ticks = i64;
/// Size in lots.
pub type Lots = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderId(pub u64);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Bid => Side::Ask,
            Side::Ask => Side::Bid,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Bid => "BID",
            Side::Ask => "ASK",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LimitOrder {
    pub id: OrderId,
    pub agent: usize,
    pub side: Side,
    pub price: Ticks,
    pub size: Lots,
    pub birth_slot: u32,
}

/// One fill between a resting maker and an incoming taker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradeEvent {
    pub slot: u32,
    pub maker: OrderId,
    pub taker: OrderId,
    pub maker_agent: usize,
    pub taker_agent: usize,
    /// Side of the incoming order.
    pub taker_side: Side,
    pub price: Ticks,
    pub size: Lots,
    /// Maker and taker belong to the same agent.
    pub self_trade: bool,
}

impl TradeEvent {
    pub fn buyer_agent(&self) -> usize {
        match self.taker_side {
            Side::Bid => self.taker_agent,
            Side::Ask => self.maker_agent,
        }
    }

    pub fn seller_agent(&self) -> usize {
        match self.taker_side {
            Side::Bid => self.maker_agent,
            Side::Ask => self.taker_agent,
        }
    }

    pub fn buy_order(&self) -> OrderId {
        match self.taker_side {
            Side::Bid => self.taker,
            Side::Ask => self.maker,
        }
    }

    pub fn sell_order(&self) -> OrderId {
        match self.taker_side {
            Side::Bid => self.maker,
            Side::Ask => self.taker,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrderBook {
    bids: BTreeMap<Ticks, VecDeque<LimitOrder>>,
    asks: BTreeMap<Ticks, VecDeque<LimitOrder>>,
    index: HashMap<OrderId, (Side, Ticks)>,
    last_trade_price: Option<Ticks>,
    open_price: Ticks,
    tick_size: f64,
    lot_size: f64,
    last_id: Option<OrderId>,
}

impl OrderBook {
    pub fn new(open_price: Ticks, tick_size: f64, lot_size: f64) -> Self {
        Self {
            bids: BTreeMap::new(),
            asks: BTreeMap::new(),
            index: HashMap::new(),
            last_trade_price: None,
            open_price,
            tick_size,
            lot_size,
            last_id: None,
        }
    }

    pub fn tick_size(&self) -> f64 {
        self.tick_size
    }

    pub fn lot_size(&self) -> f64 {
        self.lot_size
    }

    pub fn open_price(&self) -> Ticks {
        self.open_price
    }

    pub fn last_trade_price(&self) -> Option<Ticks> {
        self.last_trade_price
    }

    pub fn best_bid(&self) -> Option<Ticks> {
        self.bids.keys().next_back().copied()
    }

    pub fn best_ask(&self) -> Option<Ticks> {
        self.asks.keys().next().copied()
    }

    /// Next unused order id. Ids handed to `place_limit` must be strictly
    /// increasing, so callers either use this or keep their own counter.
    pub fn next_order_id(&self) -> OrderId {
        OrderId(self.last_id.map_or(1, |id| id.0 + 1))
    }

    pub fn contains(&self, id: OrderId) -> bool {
        self.index.contains_key(&id)
    }

    /// Resting order by id.
    pub fn order(&self, id: OrderId) -> Option<&LimitOrder> {
        let (side, price) = *self.index.get(&id)?;
        self.level(side, price)?.iter().find(|o| o.id == id)
    }

    pub fn resting_count(&self) -> usize {
        self.index.len()
    }

    /// Total resting lots on one side.
    pub fn depth(&self, side: Side) -> Lots {
        let levels = match side {
            Side::Bid => &self.bids,
            Side::Ask => &self.asks,
        };
        levels.values().flatten().map(|o| o.size).sum()
    }

    /// Resting orders of one side in priority order.
    pub fn orders(&self, side: Side) -> Vec<&LimitOrder> {
        match side {
            Side::Bid => self.bids.values().rev().flatten().collect(),
            Side::Ask => self.asks.values().flatten().collect(),
        }
    }

    /// Mid-price in ticks: quote midpoint, else last trade, else open.
    pub fn mid_price(&self) -> f64 {
        match (self.best_bid(), self.best_ask()) {
            (Some(b), Some(a)) => (b + a) as f64 / 2.0,
            _ => self.last_trade_price.unwrap_or(self.open_price) as f64,
        }
    }

    pub fn place_limit(&mut self, order: LimitOrder) -> Result<Vec<TradeEvent>, LobError> {
        if order.size < 1 {
            return Err(LobError::InvalidSize(order.size));
        }
        if order.price < 1 {
            return Err(LobError::InvalidPrice(order.price));
        }
        self.claim_id(order.id)?;
        let mut order = order;
        let limit = order.price;
        let trades = self.match_incoming(&mut order, Some(limit));
        if order.size > 0 {
            self.index.insert(order.id, (order.side, order.price));
            let levels = match order.side {
                Side::Bid => &mut self.bids,
                Side::Ask => &mut self.asks,
            };
            levels.entry(order.price).or_default().push_back(order);
        }
        Ok(trades)
    }

    /// Market order: sweeps the opposite side, residue discarded.
    pub fn place_market(
        &mut self,
        side: Side,
        size: Lots,
        agent: usize,
        slot: u32,
    ) -> Result<(OrderId, Vec<TradeEvent>), LobError> {
        if size < 1 {
            return Err(LobError::InvalidSize(size));
        }
        let has_liquidity = match side {
            Side::Bid => !self.asks.is_empty(),
            Side::Ask => !self.bids.is_empty(),
        };
        if !has_liquidity {
            return Err(LobError::NoLiquidity);
        }
        let id = self.next_order_id();
        self.claim_id(id)?;
        let mut order = LimitOrder {
            id,
            agent,
            side,
            price: 0,
            size,
            birth_slot: slot,
        };
        let trades = self.match_incoming(&mut order, None);
        Ok((id, trades))
    }

    /// Removes a resting order. Unknown, filled or already-cancelled ids
    /// return false.
    pub fn cancel(&mut self, id: OrderId) -> bool {
        let Some((side, price)) = self.index.remove(&id) else {
            return false;
        };
        let levels = match side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        };
        let Some(queue) = levels.get_mut(&price) else {
            return false;
        };
        if let Some(pos) = queue.iter().position(|o| o.id == id) {
            queue.remove(pos);
        }
        if queue.is_empty() {
            levels.remove(&price);
        }
        true
    }

    fn claim_id(&mut self, id: OrderId) -> Result<(), LobError> {
        if let Some(last) = self.last_id {
            if id <= last {
                return Err(LobError::DuplicateOrderId(id.0));
            }
        }
        self.last_id = Some(id);
        Ok(())
    }

    fn level(&self, side: Side, price: Ticks) -> Option<&VecDeque<LimitOrder>> {
        match side {
            Side::Bid => self.bids.get(&price),
            Side::Ask => self.asks.get(&price),
        }
    }

    /// Matches `taker` against the opposite side. `limit` of `None` means a
    /// market order (any price).
    fn match_incoming(&mut self, taker: &mut LimitOrder, limit: Option<Ticks>) -> Vec<TradeEvent> {
        let mut trades = Vec::new();
        while taker.size > 0 {
            let best = match taker.side {
                Side::Bid => self.asks.keys().next().copied(),
                Side::Ask => self.bids.keys().next_back().copied(),
            };
            let Some(level_price) = best else { break };
            let crosses = match (taker.side, limit) {
                (_, None) => true,
                (Side::Bid, Some(p)) => p >= level_price,
                (Side::Ask, Some(p)) => p <= level_price,
            };
            if !crosses {
                break;
            }
            let levels = match taker.side {
                Side::Bid => &mut self.asks,
                Side::Ask => &mut self.bids,
            };
            let queue = levels.get_mut(&level_price).expect("level exists");
            while taker.size > 0 {
                let Some(maker) = queue.front_mut() else { break };
                let fill = maker.size.min(taker.size);
                maker.size -= fill;
                taker.size -= fill;
                trades.push(TradeEvent {
                    slot: taker.birth_slot,
                    maker: maker.id,
                    taker: taker.id,
                    maker_agent: maker.agent,
                    taker_agent: taker.agent,
                    taker_side: taker.side,
                    price: level_price,
                    size: fill,
                    self_trade: maker.agent == taker.agent,
                });
                if maker.size == 0 {
                    let done = queue.pop_front().expect("front exists");
                    self.index.remove(&done.id);
                }
            }
            if queue.is_empty() {
                levels.remove(&level_price);
            }
            self.last_trade_price = Some(level_price);
        }
        trades
    }
}
