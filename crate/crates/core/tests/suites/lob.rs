//! Randomized order-book scripts checked against a brute-force reference
//! book: conservation, never crossed, price-time priority, replay.

use std::collections::HashMap;

use calisim::lob::{LimitOrder, Lots, OrderBook, OrderId, Side, Ticks, TradeEvent};
use proptest::prelude::*;
use proptest::test_runner::TestRunner;

const OPS: usize = 10_000;

#[derive(Debug, Clone)]
enum Op {
    Limit {
        side: Side,
        price: Ticks,
        size: Lots,
        agent: usize,
    },
    Market {
        side: Side,
        size: Lots,
        agent: usize,
    },
    /// Index into the ids issued so far (modulo).
    Cancel(usize),
}

fn op_strategy() -> impl Strategy<Value = Op> {
    let side = prop_oneof![Just(Side::Bid), Just(Side::Ask)];
    prop_oneof![
        6 => (side.clone(), 90i64..=110, 1i64..=20, 0usize..8)
            .prop_map(|(side, price, size, agent)| Op::Limit { side, price, size, agent }),
        1 => (side, 1i64..=30, 0usize..8).prop_map(|(side, size, agent)| Op::Market { side, size, agent }),
        3 => any::<usize>().prop_map(Op::Cancel),
    ]
}

/// Naive book: a flat arrival-ordered list scanned in full for each fill.
#[derive(Default)]
struct Reference {
    resting: Vec<LimitOrder>,
}

impl Reference {
    fn best_match(&self, side: Side, limit: Option<Ticks>) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, o) in self.resting.iter().enumerate() {
            if o.side == side {
                continue;
            }
            let crosses = match (side, limit) {
                (_, None) => true,
                (Side::Bid, Some(p)) => o.price <= p,
                (Side::Ask, Some(p)) => o.price >= p,
            };
            if !crosses {
                continue;
            }
            let better = match best {
                None => true,
                Some(j) => match side {
                    Side::Bid => o.price < self.resting[j].price,
                    Side::Ask => o.price > self.resting[j].price,
                },
            };
            if better {
                best = Some(i);
            }
        }
        best
    }

    fn submit(&mut self, mut taker: LimitOrder, limit: Option<Ticks>) -> Vec<TradeEvent> {
        let mut trades = Vec::new();
        while taker.size > 0 {
            let Some(i) = self.best_match(taker.side, limit) else {
                break;
            };
            let maker = &mut self.resting[i];
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
                price: maker.price,
                size: fill,
                self_trade: maker.agent == taker.agent,
            });
            if maker.size == 0 {
                self.resting.remove(i);
            }
        }
        if limit.is_some() && taker.size > 0 {
            self.resting.push(taker);
        }
        trades
    }

    fn cancel(&mut self, id: OrderId) -> bool {
        match self.resting.iter().position(|o| o.id == id) {
            Some(i) => {
                self.resting.remove(i);
                true
            }
            None => false,
        }
    }
}

#[derive(Debug, PartialEq)]
struct Outcome {
    trades: Vec<TradeEvent>,
    bids: Vec<LimitOrder>,
    asks: Vec<LimitOrder>,
}

fn run_script(ops: &[Op]) -> Outcome {
    let mut book = OrderBook::new(100, 0.01, 100.0);
    let mut reference = Reference::default();
    let mut issued: Vec<OrderId> = Vec::new();
    let mut submitted: HashMap<OrderId, Lots> = HashMap::new();
    let mut filled: HashMap<OrderId, Lots> = HashMap::new();
    let mut cancelled: HashMap<OrderId, Lots> = HashMap::new();
    let mut all_trades = Vec::new();

    for (slot, op) in ops.iter().enumerate() {
        let slot = slot as u32;
        let trades = match *op {
            Op::Limit {
                side,
                price,
                size,
                agent,
            } => {
                let order = LimitOrder {
                    id: book.next_order_id(),
                    agent,
                    side,
                    price,
                    size,
                    birth_slot: slot,
                };
                issued.push(order.id);
                submitted.insert(order.id, size);
                let want = reference.submit(order.clone(), Some(price));
                let got = book.place_limit(order).expect("valid limit order");
                assert_eq!(got, want, "limit fills differ from reference at op {slot}");
                got
            }
            Op::Market { side, size, agent } => match book.place_market(side, size, agent, slot) {
                Ok((id, got)) => {
                    let taker = LimitOrder {
                        id,
                        agent,
                        side,
                        price: 0,
                        size,
                        birth_slot: slot,
                    };
                    submitted.insert(id, size);
                    let want = reference.submit(taker, None);
                    assert_eq!(got, want, "market fills differ from reference at op {slot}");
                    assert!(got.iter().map(|t| t.size).sum::<Lots>() <= size);
                    got
                }
                Err(_) => {
                    assert!(
                        reference.resting.iter().all(|o| o.side == side),
                        "market order rejected with liquidity present"
                    );
                    Vec::new()
                }
            },
            Op::Cancel(k) => {
                if !issued.is_empty() {
                    let id = issued[k % issued.len()];
                    let left = book.order(id).map(|o| o.size);
                    let ok = book.cancel(id);
                    assert_eq!(ok, reference.cancel(id), "cancel outcome differs at op {slot}");
                    if let Some(l) = left {
                        *cancelled.entry(id).or_default() += l;
                    }
                }
                Vec::new()
            }
        };
        for t in &trades {
            assert!(t.size > 0);
            *filled.entry(t.maker).or_default() += t.size;
            *filled.entry(t.taker).or_default() += t.size;
        }
        all_trades.extend(trades);

        // Never crossed.
        if let (Some(b), Some(a)) = (book.best_bid(), book.best_ask()) {
            assert!(b < a, "crossed book after op {slot}: bid {b} ask {a}");
        }
        assert_eq!(book.resting_count(), reference.resting.len());
        if slot.is_multiple_of(250) {
            for side in [Side::Bid, Side::Ask] {
                let mut want: Vec<&LimitOrder> = reference.resting.iter().filter(|o| o.side == side).collect();
                // Stable sort keeps arrival order within a price.
                match side {
                    Side::Bid => want.sort_by_key(|o| std::cmp::Reverse(o.price)),
                    Side::Ask => want.sort_by_key(|o| o.price),
                }
                assert_eq!(book.orders(side), want, "{side:?} queue order differs at op {slot}");
            }
        }
    }

    // Conservation: every limit order's lots are filled, resting or
    // cancelled; nothing is created or lost.
    for id in &issued {
        let rest = book.order(*id).map_or(0, |o| o.size);
        let f = filled.get(id).copied().unwrap_or(0);
        let c = cancelled.get(id).copied().unwrap_or(0);
        assert_eq!(submitted[id], f + rest + c, "lots of order {id} not conserved");
    }
    for (id, f) in &filled {
        assert!(*f <= submitted[id], "order {id} overfilled");
    }
    let bought: Lots = all_trades.iter().map(|t| t.size).sum();
    let depth = book.depth(Side::Bid) + book.depth(Side::Ask);
    let resting: Lots = issued.iter().filter_map(|id| book.order(*id)).map(|o| o.size).sum();
    assert_eq!(depth, resting);
    assert!(bought >= 0);

    Outcome {
        trades: all_trades,
        bids: book.orders(Side::Bid).into_iter().cloned().collect(),
        asks: book.orders(Side::Ask).into_iter().cloned().collect(),
    }
}

/// `cases` random scripts of `OPS` operations, each run twice.
pub fn random_scripts_match_reference_and_replay(cases: u32) {
    let mut runner = TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&prop::collection::vec(op_strategy(), OPS), |ops| {
            let first = run_script(&ops);
            let second = run_script(&ops);
            prop_assert_eq!(first, second);
            Ok(())
        })
        .unwrap();
}

pub fn resting_orders_keep_price_then_arrival_order() {
    let mut book = OrderBook::new(100, 0.01, 100.0);
    for (price, agent) in [(101, 0), (99, 1), (101, 2), (100, 3), (99, 4)] {
        let id = book.next_order_id();
        book.place_limit(LimitOrder {
            id,
            agent,
            side: Side::Bid,
            price,
            size: 1,
            birth_slot: 0,
        })
        .unwrap();
    }
    let id = book.next_order_id();
    let trades = book
        .place_limit(LimitOrder {
            id,
            agent: 9,
            side: Side::Ask,
            price: 1,
            size: 5,
            birth_slot: 1,
        })
        .unwrap();
    let makers: Vec<usize> = trades.iter().map(|t| t.maker_agent).collect();
    assert_eq!(makers, vec![0, 2, 3, 1, 4]);
    let prices: Vec<Ticks> = trades.iter().map(|t| t.price).collect();
    assert_eq!(prices, vec![101, 101, 100, 99, 99]);
}
