//! Small reverse-mode differentiation core.
//!
//! A [`Tape`] records vector-valued nodes in topological order; calling
//! [`Tape::backward`] on a scalar node fills in gradients for every node
//! that depends on a trainable parameter. Parameters live in a
//! [`ParamStore`] and are pulled onto the tape once per tape (shared across
//! every use, so recurrent weights accumulate correctly).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// A named parameter tensor with paired gradient storage.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub trainable: bool,
    uid: u64,
}

impl ParamTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// An ordered collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name {name}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("initial values of {name}")));
        }
        let id = self.tensors.len();
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            grads: vec![0.0; n],
            values,
            trainable: true,
            uid: fresh_uid(),
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Marks every tensor whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable("", false);
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients recorded on `tape` to every trainable tensor of
    /// this store that appeared on it, scaled by `weight`.
    pub fn accumulate(&mut self, tape: &Tape, weight: f64) {
        for t in &mut self.tensors {
            if !t.trainable {
                continue;
            }
            let Some(&var) = tape.params.get(&t.uid) else {
                continue;
            };
            let g = &tape.grads[var.0];
            if g.is_empty() {
                continue;
            }
            for (acc, d) in t.grads.iter_mut().zip(g) {
                *acc += weight * d;
            }
        }
    }

    /// Gradients recorded on `tape` in the layout of
    /// [`grad_snapshot`](Self::grad_snapshot), scaled by `weight`; frozen or
    /// absent tensors get zeros.
    pub fn tape_grads(&self, tape: &Tape, weight: f64) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| {
                let g = tape.params.get(&t.uid).map(|v| &tape.grads[v.0]);
                match g {
                    Some(g) if t.trainable && !g.is_empty() => g.iter().map(|d| weight * d).collect(),
                    _ => vec![0.0; t.values.len()],
                }
            })
            .collect()
    }

    /// Adds a flat gradient snapshot (see [`grad_snapshot`](Self::grad_snapshot)).
    pub fn add_grads(&mut self, snapshot: &[Vec<f64>]) {
        for (t, g) in self.tensors.iter_mut().zip(snapshot) {
            for (acc, d) in t.grads.iter_mut().zip(g) {
                *acc += d;
            }
        }
    }

    pub fn grad_snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.grads.clone()).collect()
    }

    pub fn values_snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.tensors.len() {
            return Err(Error::Shape("snapshot tensor count mismatch".into()));
        }
        for (t, v) in self.tensors.iter_mut().zip(snapshot) {
            if v.len() != t.values.len() {
                return Err(Error::Shape(format!("snapshot size mismatch for {}", t.name)));
            }
            t.values.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; every tensor of the store must
    /// be present with the same shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for t in &mut self.tensors {
            let src = ck
                .get(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
            if src.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: shape {:?} in file, {:?} expected",
                    t.name, src.shape, t.shape
                )));
            }
            t.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    MatVec { m: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Sum(Var),
    SumSq(Var),
    Norm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    params: HashMap<u64, Var>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that computes values only; [`backward`](Self::backward) on it
    /// is an error.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros when `v`
    /// does not influence it or needs no gradient).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let (op, needs_grad) = if self.no_grad {
            (Op::Const, false)
        } else {
            (op, needs_grad)
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient is tracked for it).
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Loads a parameter tensor; repeated loads of the same tensor return
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        if let Some(&v) = self.params.get(&t.uid) {
            return v;
        }
        let v = self.push(t.values.clone(), Op::Param, t.trainable);
        self.params.insert(t.uid, v);
        v
    }

    /// `y = M x` with `M` stored row-major as `rows x cols`.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (mv, xv) = (&self.nodes[m.0].value, &self.nodes[x.0].value);
        if mv.len() != rows * cols || xv.len() != cols {
            return Err(Error::Shape(format!(
                "matvec: matrix of {} values as {rows}x{cols} with vector of {}",
                mv.len(),
                xv.len()
            )));
        }
        let y: Vec<f64> = mv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(y, Op::MatVec { m, x, rows, cols }, ng))
    }

    /// `W x + b` for a weight of shape `[out, in]` and bias of shape `[out]`.
    pub fn affine(&mut self, store: &ParamStore, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
        let shape = store.get(w).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("affine weight rank {}", shape.len())));
        }
        let wv = self.param(store, w);
        let bv = self.param(store, b);
        let y = self.matvec(wv, x, shape[0], shape[1])?;
        self.add(y, bv)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return Err(Error::Shape(format!("{what}: lengths {la} and {lb}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if start + len > src.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of length {}",
                start + len,
                src.len()
            )));
        }
        let v = src[start..start + len].to_vec();
        let ng = self.ng(a);
        Ok(self.push(v, Op::Slice { a, start }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], Op::Sum(a), ng)
    }

    /// Squared L2 norm.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(vec![s], Op::SumSq(a), ng)
    }

    /// L2 norm; its gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = self.ng(a);
        self.push(vec![s], Op::Norm(a), ng)
    }

    /// `||a - b||^2`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.sum_sq(d))
    }

    /// Mean squared error between equal-length vectors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sq_dist(a, b)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `max(||a - p|| - ||a - n|| + margin, 0)`.
    pub fn triplet(&mut self, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        let dp = self.sub(anchor, pos)?;
        let dp = self.norm(dp);
        let dn = self.sub(anchor, neg)?;
        let dn = self.norm(dn);
        let diff = self.sub(dp, dn)?;
        let shifted = self.offset(diff, margin);
        Ok(self.relu(shifted))
    }

    /// Sum of one-element nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(vec![0.0]));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from the one-element node `out`.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.no_grad {
            return Err(Error::InvalidInput("backward on an inference tape".into()));
        }
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be a scalar, has {} elements",
                self.nodes[out.0].value.len()
            )));
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[out.0] = vec![1.0];
        for i in (0..=out.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        let g = &mut self.grads[v.0];
        if g.is_empty() {
            g.resize(n, 0.0);
        }
        Some(g)
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Const | Op::Param => {}
            Op::MatVec { m, x, rows, cols } => {
                if self.ng(x) {
                    let mut dx = vec![0.0; cols];
                    let mv = &self.nodes[m.0].value;
                    for (r, gr) in g.iter().enumerate().take(rows) {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (d, w) in dx.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                            *d += gr * w;
                        }
                    }
                    add_into(self.acc(x), &dx);
                }
                if self.ng(m) {
                    let xv = self.nodes[x.0].value.clone();
                    if let Some(dm) = self.acc(m) {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (d, xj) in dm[r * cols..(r + 1) * cols].iter_mut().zip(&xv) {
                                *d += gr * xj;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(a), g);
                add_into(self.acc(b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(a), g);
                if let Some(db) = self.acc(b) {
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(da) = self.acc(a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(&bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.acc(b) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(&av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = self.acc(a) {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += k * gi;
                    }
                }
            }
            Op::Offset(a) => add_into(self.acc(a), g),
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.clone();
                if let Some(da) = self.acc(a) {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(&av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.clone();
                if let Some(da) = self.acc(a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.clone();
                if let Some(da) = self.acc(a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    add_into(self.acc(p), &g[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { a, start } => {
                if let Some(da) = self.acc(a) {
                    for (d, gi) in da[start..start + g.len()].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc(a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSq(a) => {
                let av = self.nodes[a.0].value.clone();
                if let Some(da) = self.acc(a) {
                    for (d, x) in da.iter_mut().zip(&av) {
                        *d += 2.0 * g[0] * x;
                    }
                }
            }
            Op::Norm(a) => {
                let n = self.nodes[i].value[0];
                if n > 0.0 {
                    let av = self.nodes[a.0].value.clone();
                    if let Some(da) = self.acc(a) {
                        for (d, x) in da.iter_mut().zip(&av) {
                            *d += g[0] * x / n;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, g: &[f64]) {
    if let Some(d) = dst {
        for (a, b) in d.iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform Glorot draw for a `fan_out x fan_in` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect()
}

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{prefix}.w` (Glorot) and `{prefix}.b` (zeros).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{prefix}.w"), &[fan_out, fan_in], xavier(fan_in, fan_out, rng))?;
        let b = store.add(&format!("{prefix}.b"), &[fan_out], vec![0.0; fan_out])?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Re-attaches to tensors already present in `store`.
    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = lookup(store, &format!("{prefix}.w"))?;
        let b = lookup(store, &format!("{prefix}.b"))?;
        let shape = store.get(w).shape();
        if shape.len() != 2 || store.get(b).shape() != [shape[0]] {
            return Err(Error::Shape(format!("layer {prefix} has inconsistent shapes")));
        }
        Ok(Self {
            w,
            b,
            fan_in: shape[1],
            fan_out: shape[0],
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        tape.affine(store, self.w, self.b, x)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

/// One LSTM layer; gates are stacked `[input, forget, candidate, output]`
/// in a single weight over `[x; h]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{prefix}.w"),
            &[4 * hidden, input + hidden],
            xavier(input + hidden, 4 * hidden, rng),
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(&format!("{prefix}.b"), &[4 * hidden], bias)?;
        Ok(Self { w, b, input, hidden })
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let lin = Linear::attach(store, prefix)?;
        if lin.fan_out % 4 != 0 || lin.fan_in < lin.fan_out / 4 {
            return Err(Error::Shape(format!("lstm {prefix} has inconsistent shapes")));
        }
        let hidden = lin.fan_out / 4;
        Ok(Self {
            w: lin.w,
            b: lin.b,
            input: lin.fan_in - hidden,
            hidden,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.constant(vec![0.0; self.hidden]),
            tape.constant(vec![0.0; self.hidden]),
        )
    }

    /// Returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let (h, c) = state;
        if tape.value(x).len() != self.input {
            return Err(Error::Shape(format!(
                "lstm input has {} values, expected {}",
                tape.value(x).len(),
                self.input
            )));
        }
        let xh = tape.concat(&[x, h]);
        let z = tape.affine(store, self.w, self.b, xh)?;
        let n = self.hidden;
        let zi = tape.slice(z, 0, n)?;
        let zf = tape.slice(z, n, n)?;
        let zg = tape.slice(z, 2 * n, n)?;
        let zo = tape.slice(z, 3 * n, n)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// Stacked LSTM whose output is the top layer's final hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmCell>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let inp = if l == 0 { input } else { hidden };
            layers.push(LstmCell::new(store, &format!("{prefix}.l{l}"), inp, hidden, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn attach(store: &ParamStore, prefix: &str, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| LstmCell::attach(store, &format!("{prefix}.l{l}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("lstm needs at least one step".into()));
        }
        let mut seq = xs.to_vec();
        for cell in &self.layers {
            let mut state = cell.zero_state(tape);
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                state = cell.step(tape, store, x, state)?;
                out.push(state.0);
            }
            seq = out;
        }
        Ok(*seq.last().expect("non-empty sequence"))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable tensor from its accumulated gradient, then
    /// zeroes all gradients. A non-finite gradient aborts the step and
    /// leaves values, moments and gradients untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape("optimizer built for a different store".into()));
        }
        for t in store.iter() {
            if let Some(i) = t.grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}] = {}",
                    t.name, t.grads[i]
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = store.get_mut(id);
            if t.trainable {
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                for j in 0..t.values.len() {
                    let g = t.grads[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    t.values[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
            t.grads.iter_mut().for_each(|g| *g = 0.0);
        }
        for t in store.iter() {
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("values of {} after step", t.name)));
            }
        }
        Ok(())
    }
}

/// Settings of [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Step is `rel_step * max(1, |theta|)`.
    pub rel_step: f64,
    /// Floor of the relative-error denominator.
    pub denom_floor: f64,
    /// Coordinates checked per tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Relative disagreement of one-sided slopes that marks a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            rel_step: 1e-5,
            denom_floor: 1e-7,
            coords_per_tensor: 24,
            kink_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the loss is not smooth there.
    pub kinks: usize,
    pub passed: bool,
}

/// Compares the tape gradient of `loss` with central differences on a
/// random subset of coordinates of every trainable tensor in `store`.
///
/// `loss` builds the scalar on the given tape; it is called once with a
/// recording tape and then twice per checked coordinate on inference tapes.
pub fn grad_check<F, R>(store: &mut ParamStore, loss: F, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    store.accumulate(&tape, 1.0);
    let analytic = store.grad_snapshot();
    store.zero_grads();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let v = loss(&mut t, store)?;
        Ok(t.scalar(v))
    };
    let f0 = eval(store)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
        passed: true,
    };
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, cfg.coords_per_tensor).into_vec()
        };
        for j in coords {
            let theta = store.get(id).values[j];
            let h = cfg.rel_step * theta.abs().max(1.0);
            store.get_mut(id).values[j] = theta + h;
            let fp = eval(store)?;
            store.get_mut(id).values[j] = theta - h;
            let fm = eval(store)?;
            store.get_mut(id).values[j] = theta;

            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let scale = fwd.abs().max(bwd.abs()).max(cfg.denom_floor);
            if (fwd - bwd).abs() > cfg.kink_threshold * scale {
                report.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.0][j];
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance && report.checked > 0;
    Ok(report)
}

const MAGIC: &[u8; 8] = b"CALISIMK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named tensors in the binary checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
    }

    /// Values of a tensor that must exist with exactly `len` elements.
    pub fn values(&self, name: &str, len: usize) -> Result<&[f64]> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.values.len() != len {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {} values, expected {len}",
                t.values.len()
            )));
        }
        Ok(&t.values)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 16 {
                return Err(Error::Checkpoint(format!("name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .filter(|n| *n <= 1 << 28)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape {shape:?}")))?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            tensors.push(NamedTensor { name, shape, values });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;

    #[test]
    fn relu_affine_sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-1.0, 0.0, 2.0]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let mut store = ParamStore::new();
        let w = store
            .add("w", &[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = store.add("b", &[3], vec![0.0; 3]).unwrap();
        let y = tape.affine(&store, w, b, x).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 0.0, 2.0]);

        let z = tape.constant(vec![0.0]);
        let s = tape.sigmoid(z);
        assert_eq!(tape.scalar(s), 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0]);
        let b = tape.constant(vec![1.0]);
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.matvec(a, b, 2, 2), Err(Error::Shape(_))));
        assert!(tape.slice(a, 1, 2).is_err());
    }

    #[test]
    fn lstm_all_zero_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(1);
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        store.get_mut(cell.w).values.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(cell.b).values.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, -2.0, 5.0]);
        let s0 = cell.zero_state(&mut tape);
        let (h, _) = cell.step(&mut tape, &store, x, s0).unwrap();
        assert!(tape.value(h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forget_bias_limit_keeps_cell() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(2);
        let n = 3;
        let cell = LstmCell::new(&mut store, "c", 2, n, &mut rng).unwrap();
        {
            let b = &mut store.get_mut(cell.b).values;
            b[n..2 * n].iter_mut().for_each(|v| *v = 20.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.4, -0.7]);
        let h = tape.constant(vec![0.1, -0.2, 0.3]);
        let c = tape.constant(vec![0.5, -1.5, 2.0]);
        let (_, c_new) = cell.step(&mut tape, &store, x, (h, c)).unwrap();

        // Independent evaluation of i and g from the raw weights.
        let w = &store.get(cell.w).values;
        let b = &store.get(cell.b).values;
        let xh = [0.4, -0.7, 0.1, -0.2, 0.3];
        let pre = |r: usize| -> f64 { b[r] + (0..5).map(|k| w[r * 5 + k] * xh[k]).sum::<f64>() };
        for k in 0..n {
            let i = 1.0 / (1.0 + (-pre(k)).exp());
            let g = pre(2 * n + k).tanh();
            let want = [0.5, -1.5, 2.0][k] + i * g;
            assert!((tape.value(c_new)[k] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut opt = Adam::new(&store, 1e-3);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).values, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[2], vec![0.5, 0.5]).unwrap();
        store.get_mut(id).grads = vec![0.3, -4.0];
        let mut opt = Adam::new(&store, 1e-3);
        opt.step(&mut store).unwrap();
        for (g, v) in [0.3f64, -4.0].iter().zip(&store.get(id).values) {
            let want = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert_relative_eq!(*v, want, epsilon = 1e-15);
        }
        assert_eq!(store.get(id).grads, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(&store, 1e-2);
        let loss = |s: &ParamStore| s.get(id).values.iter().map(|v| v * v).sum::<f64>();
        let l0 = loss(&store);
        for _ in 0..2 {
            let v = store.get(id).values.clone();
            store.get_mut(id).grads = v.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut store).unwrap();
        }
        assert!(loss(&store) < l0);
    }

    #[test]
    fn adam_aborts_on_nan() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[1], vec![1.0]).unwrap();
        store.get_mut(id).grads[0] = f64::NAN;
        let mut opt = Adam::new(&store, 1e-3);
        assert!(matches!(opt.step(&mut store), Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).values[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_tensor_gets_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(3);
        let l1 = Linear::new(&mut store, "a", 3, 3, &mut rng).unwrap();
        let l2 = Linear::new(&mut store, "b", 3, 1, &mut rng).unwrap();
        store.set_trainable("b", false);
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.5, 1.0, -1.0]);
        let h = l1.forward(&mut tape, &store, x).unwrap();
        let y = l2.forward(&mut tape, &store, h).unwrap();
        tape.backward(y).unwrap();
        store.accumulate(&tape, 1.0);
        assert!(store.get(l2.w).grads.iter().all(|g| *g == 0.0));
        assert!(store.get(l1.w).grads.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", &[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let d = tape.detach(v);
        let s = tape.sum_sq(d);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v), vec![0.0, 0.0]);
    }

    #[test]
    fn inference_tape_matches_recording() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(4);
        let lstm = Lstm::new(&mut store, "l", 3, 5, 2, &mut rng).unwrap();
        let run = |tape: &mut Tape| {
            let xs: Vec<Var> = (0..4).map(|k| tape.constant(vec![0.1 * k as f64, -0.3, 0.7])).collect();
            let h = lstm.forward(tape, &store, &xs).unwrap();
            tape.value(h).to_vec()
        };
        assert_eq!(run(&mut Tape::new()), run(&mut Tape::inference()));
        let mut t = Tape::inference();
        let c = t.constant(vec![1.0]);
        assert!(t.backward(c).is_err());
    }

    #[test]
    fn grad_check_affine_relu_chain() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(5);
        let l1 = Linear::new(&mut store, "l1", 4, 6, &mut rng).unwrap();
        let l2 = Linear::new(&mut store, "l2", 6, 2, &mut rng).unwrap();
        for id in [l1.b, l2.b] {
            store
                .get_mut(id)
                .values
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let loss = |t: &mut Tape, s: &ParamStore| {
            let x = t.constant(vec![0.3, -0.8, 1.1, 0.2]);
            let h = l1.forward(t, s, x)?;
            let h = t.relu(h);
            let y = l2.forward(t, s, h)?;
            let y = t.sigmoid(y);
            Ok(t.sum_sq(y))
        };
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            coords_per_tensor: 100,
            ..Default::default()
        };
        let r = grad_check(&mut store, loss, &cfg, &mut rng).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", &[3], vec![0.4, -0.2, 0.9]).unwrap();
        // Scale op whose recorded factor differs from the evaluated one.
        let loss = |t: &mut Tape, s: &ParamStore| {
            let v = t.param(s, p);
            let sq = t.sum_sq(v);
            if t.no_grad {
                Ok(sq)
            } else {
                Ok(t.scale(sq, 1.5))
            }
        };
        let r = grad_check(&mut store, loss, &GradCheckConfig::default(), &mut seed::rng(0)).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn triplet_and_norm_at_zero() {
        let mut store = ParamStore::new();
        let p = store.add("p", &[2], vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, p);
        let n = tape.norm(a);
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(a), vec![0.0, 0.0]);

        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0, 0.0]);
        let loss = tape.triplet(a, a, a, 0.1).unwrap();
        assert_relative_eq!(tape.scalar(loss), 0.1);
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let mut ck = Checkpoint::default();
        ck.push("a.w", &[2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]);
        ck.push("b", &[], vec![42.0]);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"CALISIMK");
        assert_eq!(Checkpoint::read(&buf[..]).unwrap(), ck);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(&bad[..]).is_err());
        assert!(Checkpoint::read(&buf[..buf.len() - 3]).is_err());
    }
}
