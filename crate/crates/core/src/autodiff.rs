//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.
//! Parameters live in a [`ParamStore`]; a tape only holds copies of their
//! values, keyed by [`ParamKey`], and hands gradients back in a [`Gradients`]
//! map.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Exp,
    Arctan,
    Gelu,
    Scale,
    SumSq,
    SliceCols,
    ConcatCols,
    SpectralNorm,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Exp => "exp",
            OpKind::Arctan => "arctan",
            OpKind::Gelu => "gelu",
            OpKind::Scale => "scale",
            OpKind::SumSq => "sum_sq",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SpectralNorm => "spectral_norm",
        };
        f.write_str(s)
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// `[1, c]` or `[c]` spread over every row of an `[r, c]` left operand.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Hadamard(Var, Var, Broadcast),
    Exp(Var),
    Arctan(Var),
    Gelu(Var),
    Scale(Var, f64),
    SumSq(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Var, Var),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        clamped: bool,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a tensor within a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Globally unique key of a parameter tensor: store identity plus index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    store: u64,
    index: usize,
}

/// Named, ordered collection of learnable tensors.
///
/// Each store carries a process-unique id so that a tape can mix parameters
/// from several stores (autoencoder plus regressor) without confusing them.
/// Cloning allocates a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
            names: self.names.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.id,
            index: id.0,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension {
                what: "flat parameter payload",
                expected: self.num_scalars(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copy of every tensor, for checkpoint/restore during training.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len());
        self.tensors.clone_from_slice(snapshot);
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data_mut().fill(value);
        }
    }
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&store.key(id))
    }

    /// One gradient per parameter of `store`, zeros where the loss does not
    /// depend on the parameter.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.get(store, id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    leaf_keys: HashMap<usize, ParamKey>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not receive gradients (data, masks, ...).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf for a learnable parameter. Repeated calls for the same parameter
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Op::Leaf, store.get(id).clone(), true);
        self.params.insert(key, v);
        self.leaf_keys.insert(v.0, key);
        v
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn broadcast(&self, op: OpKind, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if ta.shape().len() == 2
            && tb.rows() == 1
            && tb.cols() == ta.cols()
            && tb.shape().len() <= 2
        {
            Ok(Broadcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn zip(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let bd = tb.data();
        let data = match bc {
            Broadcast::Same => ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => ta.data().iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % cols]))
                .collect(),
        };
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.grad2(a, b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(OpKind::Add, a, b)?;
        let value = self.zip(a, b, bc, |x, y| x + y);
        let rg = self.grad2(a, b);
        Ok(self.push(Op::Add(a, b, bc), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(OpKind::Sub, a, b)?;
        let value = self.zip(a, b, bc, |x, y| x - y);
        let rg = self.grad2(a, b);
        Ok(self.push(Op::Sub(a, b, bc), value, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(OpKind::Hadamard, a, b)?;
        let value = self.zip(a, b, bc, |x, y| x * y);
        let rg = self.grad2(a, b);
        Ok(self.push(Op::Hadamard(a, b, bc), value, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.requires_grad(a);
        self.push(Op::Exp(a), value, rg)
    }

    pub fn arctan(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::atan);
        let rg = self.requires_grad(a);
        self.push(Op::Arctan(a), value, rg)
    }

    /// Exact GeLU, `x * Phi(x)` with the error-function form of `Phi`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.requires_grad(a);
        self.push(Op::Gelu(a), value, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, k), value, rg)
    }

    /// Sum of squares of all entries, as a scalar.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_sq());
        let rg = self.requires_grad(a);
        self.push(Op::SumSq(a), value, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start > end || end > t.cols() {
            return Err(Error::Shape {
                op: OpKind::SliceCols,
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let value = t.slice_cols(start, end);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SliceCols { src: a, start }, value, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::Shape {
                op: OpKind::ConcatCols,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = ta.concat_cols(tb);
        let rg = self.grad2(a, b);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// `W / sigma` with `sigma = u^T W v`; `u` and `v` come from power
    /// iteration and are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let tw = self.value(w);
        if tw.shape().len() != 2 || tw.rows() != u.len() || tw.cols() != v.len() {
            return Err(Error::Shape {
                op: OpKind::SpectralNorm,
                lhs: tw.shape().to_vec(),
                rhs: vec![u.len(), v.len()],
            });
        }
        let raw = crate::spectral::bilinear(tw, u, v);
        let (sigma, clamped) = crate::spectral::clamp_sigma(raw);
        let value = tw.map(|x| x / sigma);
        let rg = self.requires_grad(w);
        Ok(self.push(
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
                clamped,
            },
            value,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter leaf on the tape and clears the tape for reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            let shape = lv.shape().to_vec();
            self.clear();
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(key) = self.leaf_keys.get(&i) {
                out.map.insert(*key, g);
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        self.clear();
        Ok(out)
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.leaf_keys.clear();
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b, bc) => {
                if self.requires_grad(*b) {
                    accumulate(grads, *b, reduce_broadcast(&g, *bc, self.value(*b)));
                }
                accumulate(grads, *a, g);
            }
            Op::Sub(a, b, bc) => {
                if self.requires_grad(*b) {
                    let neg = g.map(|x| -x);
                    accumulate(grads, *b, reduce_broadcast(&neg, *bc, self.value(*b)));
                }
                accumulate(grads, *a, g);
            }
            Op::Hadamard(a, b, bc) => {
                if self.requires_grad(*a) {
                    let ga = self.zip_grad(&g, *b, *bc, |gv, y| gv * y);
                    accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let ta = self.value(*a);
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    accumulate(grads, *b, reduce_broadcast(&prod, *bc, self.value(*b)));
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                accumulate(grads, *a, zip_same(&g, y, |gv, yv| gv * yv));
            }
            Op::Arctan(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_same(&g, x, |gv, xv| gv / (1.0 + xv * xv)));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_same(&g, x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, g.map(|x| k * x));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.item();
                accumulate(grads, *a, self.value(*a).map(|x| s * x));
            }
            Op::SliceCols { src, start } => {
                let ts = self.value(*src);
                let (r, c, w) = (ts.rows(), ts.cols(), g.cols());
                let mut full = Tensor::zeros(ts.shape());
                let fd = full.data_mut();
                for row in 0..r {
                    fd[row * c + start..row * c + start + w].copy_from_slice(g.row_slice(row));
                }
                accumulate(grads, *src, full);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.slice_cols(0, ca));
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.slice_cols(ca, ca + cb));
                }
            }
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                clamped,
            } => {
                let mut dw = g.map(|x| x / sigma);
                if !clamped {
                    // d(W/sigma)/dW picks up -<G, W> / sigma^2 * u v^T through sigma.
                    let tw = self.value(*w);
                    let inner: f64 = g.data().iter().zip(tw.data()).map(|(a, b)| a * b).sum();
                    let coef = inner / (sigma * sigma);
                    let cols = v.len();
                    for (idx, d) in dw.data_mut().iter_mut().enumerate() {
                        *d -= coef * u[idx / cols] * v[idx % cols];
                    }
                }
                accumulate(grads, *w, dw);
            }
        }
    }

    fn zip_grad(&self, g: &Tensor, b: Var, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let bd = self.value(b).data();
        let cols = g.cols();
        let data = match bc {
            Broadcast::Same => g.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => g.data().iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Row => g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % cols]))
                .collect(),
        };
        Tensor::new(g.shape().to_vec(), data).unwrap()
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

/// Sum a full-shape gradient back down to the shape of a broadcast operand.
fn reduce_broadcast(g: &Tensor, bc: Broadcast, target: &Tensor) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::full(target.shape(), g.data().iter().sum()),
        Broadcast::Row => {
            let cols = g.cols();
            let mut acc = vec![0.0; cols];
            for row in g.data().chunks_exact(cols) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(target.shape().to_vec(), acc).unwrap()
        }
    }
}

/// Standard normal CDF.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    phi_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn elementwise_values_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[0.0]));
        let a = tape.arctan(x);
        let g = tape.gelu(x);
        assert_eq!(tape.value(a).data(), &[0.0]);
        assert_eq!(tape.value(g).data(), &[0.0]);
    }

    #[test]
    fn sum_sq_gradient_is_two_x() {
        let mut store = ParamStore::new();
        let id = store.add("x", row(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.sum_sq(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&store, id).unwrap().data(), &[2.0, 4.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", row(&[3.0, -1.0]));
        let mut tape = Tape::new();
        let _ = tape.param(&store, id);
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum_sq(c);
        let grads = tape.backward(loss).unwrap();
        let all = grads.for_store(&store);
        assert_eq!(all[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn add_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: OpKind::Add, .. }));
    }

    #[test]
    fn gelu_odd_part_identity() {
        // x*Phi(x) - (-x)*Phi(-x) = x*(Phi(x) + Phi(-x)) = x
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            assert!((gelu(x) - gelu(-x) - x).abs() < 1e-12, "x={x}");
        }
    }

    /// Central differences over every entry of every parameter.
    fn check_grads(
        store: &mut ParamStore,
        f: &dyn Fn(&mut Tape, &ParamStore) -> Var,
        tol: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss).unwrap().for_store(store);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let lp = {
                    let l = f(&mut tape, store);
                    let v = tape.value(l).item();
                    tape.clear();
                    v
                };
                store.get_mut(id).data_mut()[j] = orig - h;
                let lm = {
                    let l = f(&mut tape, store);
                    let v = tape.value(l).item();
                    tape.clear();
                    v
                };
                store.get_mut(id).data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let ad = grads[id.index()].data()[j];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst < tol, "worst relative error {worst:e}");
        worst
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[3, 4]));
        let b = store.add("b", random(&mut rng, &[4, 2]));
        let r = store.add("r", random(&mut rng, &[1, 2]));
        let s = store.add("s", random(&mut rng, &[1]));
        let c = store.add("c", random(&mut rng, &[3, 2]));
        type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(move |t, st| {
                let (x, y) = (t.param(st, a), t.param(st, b));
                let m = t.matmul(x, y).unwrap();
                t.sum_sq(m)
            })),
            ("add_row", Box::new(move |t, st| {
                let (x, y) = (t.param(st, c), t.param(st, r));
                let m = t.add(x, y).unwrap();
                t.sum_sq(m)
            })),
            ("sub_scalar", Box::new(move |t, st| {
                let (x, y) = (t.param(st, c), t.param(st, s));
                let m = t.sub(x, y).unwrap();
                t.sum_sq(m)
            })),
            ("hadamard", Box::new(move |t, st| {
                let (x, y) = (t.param(st, c), t.param(st, r));
                let m = t.hadamard(x, y).unwrap();
                t.sum_sq(m)
            })),
            ("exp", Box::new(move |t, st| {
                let x = t.param(st, c);
                let m = t.exp(x);
                t.sum_sq(m)
            })),
            ("arctan", Box::new(move |t, st| {
                let x = t.param(st, a);
                let m = t.arctan(x);
                t.sum_sq(m)
            })),
            ("gelu", Box::new(move |t, st| {
                let x = t.param(st, a);
                let m = t.gelu(x);
                t.sum_sq(m)
            })),
            ("scale", Box::new(move |t, st| {
                let x = t.param(st, a);
                let m = t.scale(x, -0.7);
                t.sum_sq(m)
            })),
            ("slice_concat", Box::new(move |t, st| {
                let x = t.param(st, a);
                let l = t.slice_cols(x, 1, 3).unwrap();
                let y = t.param(st, c);
                let e = t.exp(y);
                let m = t.concat_cols(e, l).unwrap();
                let m = t.gelu(m);
                t.sum_sq(m)
            })),
            ("spectral_norm", Box::new(move |t, st| {
                let w = t.param(st, a);
                let u = [0.6, 0.0, 0.8];
                let v = [0.5, 0.5, 0.5, 0.5];
                let n = t.spectral_norm(w, &u, &v).unwrap();
                let x = t.param(st, b);
                let m = t.matmul(n, x).unwrap();
                t.sum_sq(m)
            })),
        ];
        for (name, f) in &cases {
            let worst = check_grads(&mut store, f.as_ref(), 1e-5);
            eprintln!("{name}: {worst:e}");
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("x", row(&[3.0]));
        let mut tape = Tape::new();
        let x1 = tape.param(&store, id);
        let x2 = tape.param(&store, id);
        assert_eq!(x1, x2);
        let p = tape.hadamard(x1, x2).unwrap();
        let loss = tape.sum_sq(p);
        // d/dx x^4 = 4 x^3
        let g = tape.backward(loss).unwrap();
        assert!((g.get(&store, id).unwrap().item() - 108.0).abs() < 1e-12);
    }
}
