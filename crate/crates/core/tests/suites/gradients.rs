//! Tape gradients against central differences, and where the losses are
//! allowed to send gradient.

use calisim::agents::BEHAVIOR_DIM;
use calisim::diff::{grad_check, GradCheckConfig, GradCheckReport, Linear, Lstm, ParamStore, Tape};
use calisim::features::{FeatureNormalizer, FEATURE_DIM};
use calisim::metamarket::{self, MetaMarket, MetaTrainConfig, Sample, WINDOW};
use calisim::seed;
use calisim::state::{StateNormalizer, STATE_DIM};
use calisim::surrogate::SurrogateNet;
use rand::Rng;

const SEEDS: u64 = 10;
const FUND: usize = 24;

type Loss<'a> = dyn Fn(&mut Tape, &ParamStore) -> calisim::Result<calisim::diff::Var> + 'a;

fn check(store: &mut ParamStore, seed: u64, loss: &Loss) -> GradCheckReport {
    check_with(store, seed, 1e-7, loss)
}

/// The step is wider than the library default: for losses of order one,
/// roundoff at a 1e-5 step already costs about 1e-5 relative error on
/// gradients near 1e-5. `denom_floor` turns the test into an absolute one
/// for coordinates whose gradient is below it.
fn check_with(store: &mut ParamStore, seed: u64, denom_floor: f64, loss: &Loss) -> GradCheckReport {
    let cfg = GradCheckConfig {
        rel_step: 1e-4,
        denom_floor,
        ..GradCheckConfig::default()
    };
    let r = grad_check(store, loss, &cfg, &mut seed::rng(1000 + seed)).unwrap();
    assert!(r.passed, "seed {seed}: {r:?}");
    assert!(r.checked > r.kinks, "seed {seed}: mostly kinks {r:?}");
    r
}

fn noise(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn affine_relu_sigmoid_tanh_chains() {
    for s in 0..SEEDS {
        let mut rng = seed::rng(s);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 7, 16, &mut rng).unwrap();
        let l2 = Linear::new(&mut store, "l2", 16, 9, &mut rng).unwrap();
        let l3 = Linear::new(&mut store, "l3", 9, 3, &mut rng).unwrap();
        for l in [l1, l2, l3] {
            store.get_mut(l.b).values = noise(&mut rng, l.fan_out, 0.5);
        }
        let x = noise(&mut rng, 7, 2.0);
        let target = noise(&mut rng, 3, 1.0);
        check(&mut store, s, &|t, st| {
            let h = t.constant(x.clone());
            let h = l1.forward(t, st, h)?;
            let h = t.relu(h);
            let h = l2.forward(t, st, h)?;
            let h = t.tanh(h);
            let h = l3.forward(t, st, h)?;
            let y = t.sigmoid(h);
            let y2 = t.constant(target.clone());
            t.sq_dist(y, y2)
        });
    }
}

pub fn two_layer_lstm_over_a_full_window() {
    for s in 0..SEEDS {
        let mut rng = seed::rng(100 + s);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", FEATURE_DIM, 16, 2, &mut rng).unwrap();
        let head = Linear::new(&mut store, "head", 16, 2, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..WINDOW).map(|_| noise(&mut rng, FEATURE_DIM, 1.5)).collect();
        check(&mut store, s, &|t, st| {
            let vs: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let h = lstm.forward(t, st, &vs)?;
            let y = head.forward(t, st, h)?;
            Ok(t.sum_sq(y))
        });
    }
}

fn surrogate(s: u64) -> SurrogateNet {
    let mut rng = seed::rng(200 + s);
    let mut net = SurrogateNet::new(FUND, FeatureNormalizer::identity(), &mut rng).unwrap();
    // Non-zero biases so ReLU boundaries are not all at the origin.
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        if net.store.get(id).name.ends_with(".b") {
            let n = net.store.get(id).len();
            net.store.get_mut(id).values = noise(&mut rng, n, 0.1);
        }
    }
    net
}

pub fn surrogate_weights() {
    for s in 0..SEEDS {
        let net = surrogate(s);
        let mut rng = seed::rng(300 + s);
        let b = noise(&mut rng, BEHAVIOR_DIM, 1.0)
            .iter()
            .map(|v| v.abs())
            .collect::<Vec<_>>();
        let fund = noise(&mut rng, FUND, 1.0);
        let target: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut store = net.store.clone();
        check(&mut store, s, &|t, st| {
            let bv = t.constant(b.clone());
            metamarket::repr_loss(t, &net, st, bv, &fund, &target)
        });
    }
}

pub fn surrogate_input_behavior() {
    for s in 0..SEEDS {
        let mut net = surrogate(s);
        net.freeze();
        let mut rng = seed::rng(400 + s);
        let mut store = ParamStore::new();
        let b = store
            .add("b", &[BEHAVIOR_DIM], noise(&mut rng, BEHAVIOR_DIM, 1.0))
            .unwrap();
        let fund = noise(&mut rng, FUND, 1.0);
        let target: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        check(&mut store, s, &|t, st| {
            let z = t.param(st, b);
            let bv = t.sigmoid(z);
            metamarket::repr_loss(t, &net, &net.store, bv, &fund, &target)
        });
    }
}

fn sample(rng: &mut impl Rng) -> Sample {
    Sample {
        window_z: (0..WINDOW)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5)))
            .collect(),
        state_z: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
        fund: noise(rng, FUND, 1.0),
        target_z: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        truth: None,
    }
}

/// A calibrator whose analyzer already depends on the state.
fn meta(s: u64) -> MetaMarket {
    let mut mm = MetaMarket::new(FeatureNormalizer::identity(), StateNormalizer::identity(), 500 + s).unwrap();
    let mut rng = seed::rng(600 + s);
    let w = mm.store.id("mm.ana2.w").unwrap();
    let n = mm.store.get(w).len();
    mm.store.get_mut(w).values = noise(&mut rng, n, 0.05);
    mm
}

pub fn hypernetwork_chunk_loss_with_all_terms() {
    let cfg = MetaTrainConfig {
        margin: 0.5,
        ..MetaTrainConfig::default()
    };
    for s in 0..SEEDS {
        let mut sur = surrogate(s);
        sur.freeze();
        let mm = meta(s);
        let mut rng = seed::rng(700 + s);
        let samples: Vec<Sample> = (0..3).map(|_| sample(&mut rng)).collect();
        let triplets: Vec<_> = samples
            .iter()
            .map(|x| metamarket::fabricate(&x.state_z, 0.1, 1.0, &mut rng).unwrap())
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut store = mm.store.clone();
        let (_, terms) = {
            let mut t = Tape::inference();
            metamarket::chunk_loss(&mut t, &mm, &store, &sur, &sur.store, &refs, &triplets, &cfg).unwrap()
        };
        assert!(
            terms.repr > 0.0 && terms.temp > 0.0 && terms.stat > 0.0,
            "seed {s}: inactive term {terms:?}"
        );
        // The state term sees `u` as a constant, so finite differences
        // through the LSTM only agree with the tape without it.
        // Some analyzer gradients are near 1e-7 against a loss near 4, below
        // what differences resolve; they are held to 1e-11 absolute.
        store.set_trainable("mm.lstm", false);
        check_with(&mut store, s, 1e-6, &|t, st| {
            let (v, _) = metamarket::chunk_loss(t, &mm, st, &sur, &sur.store, &refs, &triplets, &cfg)?;
            Ok(v)
        });
        store.set_trainable("mm.lstm", true);
        let no_state = MetaTrainConfig {
            w_s: 0.0,
            ..cfg.clone()
        };
        check_with(&mut store, s, 1e-6, &|t, st| {
            let (v, _) = metamarket::chunk_loss(t, &mm, st, &sur, &sur.store, &refs, &triplets, &no_state)?;
            Ok(v)
        });
    }
}

pub fn state_loss_reaches_only_the_analyzer() {
    let mm = meta(0);
    let mut rng = seed::rng(42);
    let x = sample(&mut rng);
    let tri = metamarket::fabricate(&x.state_z, 0.1, 1.0, &mut rng).unwrap();
    let mut t = Tape::new();
    let u = mm.implicit(&mut t, &mm.store, &x.window_z).unwrap();
    let t2 = mm.theta2(&mut t, &mm.store, &x.state_z).unwrap();
    let loss = mm.stat_loss(&mut t, &mm.store, u, t2, &tri, 0.5).unwrap();
    assert!(t.scalar(loss) > 0.0);
    t.backward(loss).unwrap();
    let grads = mm.store.tape_grads(&t, 1.0);
    let mut analyzer = 0.0;
    for (tensor, g) in mm.store.iter().zip(&grads) {
        let mass: f64 = g.iter().map(|v| v.abs()).sum();
        if tensor.name.starts_with("mm.lstm") {
            assert_eq!(mass, 0.0, "{} got gradient from the state loss", tensor.name);
        } else {
            analyzer += mass;
        }
    }
    assert!(analyzer > 0.0);
}

pub fn frozen_surrogate_gets_no_gradient() {
    let mut sur = surrogate(0);
    sur.freeze();
    let mm = meta(0);
    let mut rng = seed::rng(43);
    let samples: Vec<Sample> = (0..4).map(|_| sample(&mut rng)).collect();
    let triplets: Vec<_> = samples
        .iter()
        .map(|x| metamarket::fabricate(&x.state_z, 0.1, 1.0, &mut rng).unwrap())
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = Tape::new();
    let (v, _) = metamarket::chunk_loss(
        &mut t,
        &mm,
        &mm.store,
        &sur,
        &sur.store,
        &refs,
        &triplets,
        &MetaTrainConfig::default(),
    )
    .unwrap();
    t.backward(v).unwrap();
    let mut sur_store = sur.store.clone();
    sur_store.accumulate(&t, 1.0);
    assert!(sur_store.grad_snapshot().iter().flatten().all(|g| *g == 0.0));
    let mut mm_store = mm.store.clone();
    mm_store.accumulate(&t, 1.0);
    assert!(mm_store.grad_snapshot().iter().flatten().any(|g| *g != 0.0));
}

pub fn state_blind_init_ignores_the_state() {
    let mm = MetaMarket::new(FeatureNormalizer::identity(), StateNormalizer::identity(), 9).unwrap();
    let mut rng = seed::rng(44);
    let x = sample(&mut rng);
    let run = |state: [f64; STATE_DIM]| {
        let mut t = Tape::inference();
        let u = mm.implicit(&mut t, &mm.store, &x.window_z).unwrap();
        let t2 = mm.theta2(&mut t, &mm.store, &state).unwrap();
        let b = mm.estimate(&mut t, u, t2).unwrap();
        t.value(b).to_vec()
    };
    assert_eq!(run(x.state_z), run([3.0, -2.0, 0.5, 1.0, -1.0]));
}
