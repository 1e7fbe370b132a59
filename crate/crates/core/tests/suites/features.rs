//! The extractor against a naive recount on small random streams, plus
//! hand-built examples.

use calisim::features::{extract, FeatureVector, FEATURE_DIM};
use calisim::lob::{LimitOrder, OrderBook, OrderId, Side};
use calisim::simulator::{OrderStream, StreamEvent, StreamMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SLOTS: u32 = 1200;

fn meta(seed: u64) -> StreamMeta {
    StreamMeta {
        open_price: 100,
        tick_size: 0.01,
        lot_size: 100,
        slots_per_day: SLOTS,
        seed,
        wakeups: 0,
    }
}

/// Builds a stream by pushing `orders` (slot, side, price, size) through a
/// book and recording placements with their fills.
fn stream_from(orders: &mut [(u32, Side, i64, i64)], seed: u64) -> OrderStream {
    orders.sort_by_key(|o| o.0);
    let mut book = OrderBook::new(100, 0.01, 100.0);
    let mut events = Vec::new();
    let mut seq = 0;
    for (i, &(slot, side, price, size)) in orders.iter().enumerate() {
        let order = LimitOrder {
            id: OrderId(i as u64 + 1),
            agent: i,
            side,
            price,
            size,
            birth_slot: slot,
        };
        let trades = book.place_limit(order.clone()).unwrap();
        events.push(StreamEvent::Place { slot, seq, order });
        seq += 1;
        for trade in trades {
            events.push(StreamEvent::Trade { slot, seq, trade });
            seq += 1;
        }
    }
    OrderStream::replay(meta(seed), events).unwrap()
}

// ---- naive recount -------------------------------------------------------

fn naive_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

fn naive_corr(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (naive_mean(a), naive_mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn recount(s: &OrderStream) -> [f64; FEATURE_DIM] {
    // Minute mids straight from the per-slot series.
    let mut mids = vec![s.meta.open_price as f64];
    for m in 1..(SLOTS / 60) {
        mids.push(s.slot_mids[(m * 60 - 1) as usize]);
    }
    let mut r = Vec::new();
    for i in 1..mids.len() {
        r.push((mids[i] / mids[i - 1]).ln());
    }
    let mut up = 0;
    let mut down = 0;
    let mut flat = 0;
    for x in &r {
        if *x > 0.0 {
            up += 1;
        } else if *x < 0.0 {
            down += 1;
        } else {
            flat += 1;
        }
    }
    let gl = up as f64 / if down == 0 { 1.0 } else { down as f64 };
    let m = naive_mean(&r);
    let m2 = naive_mean(&r.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>());
    let m4 = naive_mean(&r.iter().map(|x| (x - m).powi(4)).collect::<Vec<_>>());
    let kurt = if m2 == 0.0 { 0.0 } else { m4 / (m2 * m2) - 3.0 };
    let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
    let mut vc = [0.0; 10];
    for (n, v) in vc.iter_mut().enumerate() {
        let lag = n + 1;
        if sq.len() > lag + 1 {
            *v = naive_corr(&sq[..sq.len() - lag], &sq[lag..]);
        }
    }

    let mut counted = 0.0;
    let mut le = [0.0; 4];
    let mut near = 0.0;
    let mut within = [0.0; 2];
    for e in &s.events {
        if let StreamEvent::Place { slot, order, .. } = e {
            let mid = if *slot == 0 {
                s.meta.open_price as f64
            } else {
                s.slot_mids[*slot as usize - 1]
            };
            if order.size <= 100 {
                counted += 1.0;
                for (k, t) in [1, 5, 10, 50].iter().enumerate() {
                    if order.size <= *t {
                        le[k] += 1.0;
                    }
                }
            }
            let d = (order.price as f64 - mid).abs();
            if (1.0..=10.0).contains(&d) {
                near += 1.0;
                if d <= 1.0 {
                    within[0] += 1.0;
                }
                if d <= 5.0 {
                    within[1] += 1.0;
                }
            }
        }
    }
    let ratio = |a: f64, n: f64| if n == 0.0 { 0.0 } else { a / n };
    [
        gl,
        kurt,
        flat as f64 / r.len() as f64,
        vc[0],
        vc[1],
        vc[2],
        naive_mean(&vc),
        ratio(le[0], counted),
        ratio(le[1], counted),
        ratio(le[2], counted),
        ratio(le[3], counted),
        ratio(within[0], near),
        ratio(within[1], near),
    ]
}

fn random_orders(rng: &mut ChaCha8Rng) -> Vec<(u32, Side, i64, i64)> {
    let n = rng.random_range(1..=10);
    (0..n)
        .map(|_| {
            let side = if rng.random_bool(0.5) { Side::Bid } else { Side::Ask };
            let price = 100 + rng.random_range(-12..=12);
            let size = [1, 2, 5, 7, 10, 30, 50, 60, 100, 150][rng.random_range(0..10)];
            (rng.random_range(0..SLOTS), side, price.max(1), size)
        })
        .collect()
}

pub fn extract_matches_recount_on_random_micro_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let s = stream_from(&mut random_orders(&mut rng), case);
        let got = extract(&s).unwrap().to_array();
        let want = recount(&s);
        for k in 0..FEATURE_DIM {
            // Ratios are exact; moment statistics may differ in the last
            // bits from summation order.
            let tol = if k >= 7 { 0.0 } else { 1e-12 * want[k].abs().max(1.0) };
            assert!(
                (got[k] - want[k]).abs() <= tol,
                "case {case}, field {k}: extract {} vs recount {}",
                got[k],
                want[k]
            );
        }
    }
}

pub fn hand_built_order_ratios() {
    // Mid stays at the open while all six orders rest; offsets 1, 4, 12.
    let mut orders = vec![
        (0, Side::Bid, 99, 1),
        (0, Side::Bid, 96, 7),
        (0, Side::Bid, 88, 60),
        (0, Side::Ask, 101, 1),
        (0, Side::Ask, 104, 7),
        (0, Side::Ask, 112, 60),
    ];
    let f: FeatureVector = extract(&stream_from(&mut orders, 0)).unwrap();
    assert_eq!(f.size_le_1, 1.0 / 3.0);
    assert_eq!(f.size_le_5, 1.0 / 3.0);
    assert_eq!(f.size_le_10, 2.0 / 3.0);
    assert_eq!(f.size_le_50, 2.0 / 3.0);
    assert_eq!(f.px_within_1_tick, 0.5);
    // Both remaining orders (1 and 4 ticks) are within 5 ticks.
    assert_eq!(f.px_within_5_ticks, 1.0);
}

pub fn flat_day_follows_degenerate_rules() {
    let f = extract(&stream_from(&mut [], 0)).unwrap();
    assert_eq!(f.zero_return_ratio, 1.0);
    assert_eq!(f.gain_loss_ratio, 0.0);
    assert_eq!(f.kurtosis, 0.0);
    assert_eq!([f.vc_1, f.vc_2, f.vc_3, f.vc_mean10], [0.0; 4]);
    assert_eq!(f.size_le_1, 0.0);
    assert_eq!(f.px_within_5_ticks, 0.0);
}

pub fn extract_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = stream_from(&mut random_orders(&mut rng), 1);
    let a = extract(&s).unwrap().to_array();
    let b = extract(&s.clone()).unwrap().to_array();
    assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
}
