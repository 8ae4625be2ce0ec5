//! Reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] owns every value it has produced. Operations are recorded as
//! nodes only when recording is switched on *and* at least one input depends
//! on a watched variable; anything else becomes a constant leaf. Switching
//! recording off around a sub-computation is how the one-step gradient
//! engines keep a single step of the sampling chain differentiable.
//!
//! Leaves are copied into the tape on creation, so mutating the caller's
//! arrays afterwards cannot affect a later backward pass.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::array::{kernels, DenseArray};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{primitive}: shape mismatch {shapes:?}")]
    ShapeMismatch {
        primitive: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{primitive}: expected {expected} inputs, got {actual}")]
    Arity {
        primitive: &'static str,
        expected: &'static str,
        actual: usize,
    },
    #[error("handle {index} belongs to a different tape")]
    ForeignHandle { index: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("cotangent shape {cotangent:?} does not match output shape {output:?}")]
    CotangentShape {
        output: Vec<usize>,
        cotangent: Vec<usize>,
    },
}

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// The fixed primitive set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Elementwise product; one side may be a single element.
    Mul,
    /// `[m,k] x [k,n]`, or `[m,k] x [k]`.
    MatMul,
    /// `x W^T + b` with `W: [out, in]`, `x: [in]` or `[rows, in]`, optional `b: [out]`.
    Affine,
    Tanh,
    Sum,
    Mean,
    SquaredNorm,
    /// Elementwise clamp; slope is zero outside the open interval `(lo, hi)`.
    Clamp { lo: f64, hi: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Scale(_) => "scale",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Affine => "affine",
            Primitive::Tanh => "tanh",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::Clamp { .. } => "clamp",
        }
    }
}

#[derive(Debug)]
struct Entry {
    value: DenseArray,
    /// Depends (through recorded nodes) on some watched variable.
    live: bool,
}

#[derive(Debug)]
struct Node {
    primitive: Primitive,
    inputs: Vec<usize>,
    output: usize,
}

/// Gradients of one backward pass, keyed by watched variable.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<Var, DenseArray>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(&v)
    }

    /// Gradient for a watched variable. Panics if `v` was not watched.
    pub fn wrt(&self, v: Var) -> &DenseArray {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("variable {} is not watched", v.index))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Concatenate gradients of `vars` in the given order.
    pub fn flatten(&self, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in vars {
            out.extend_from_slice(self.wrt(v).data());
        }
        out
    }
}

/// Single-writer recording tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    entries: Vec<Entry>,
    nodes: Vec<Node>,
    watched: Vec<usize>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            nodes: Vec::new(),
            watched: Vec::new(),
            recording: true,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Set the recording switch; returns the previous setting.
    pub fn set_recording(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.recording, on)
    }

    /// Run `f` with recording switched to `on`, restoring the previous state.
    pub fn with_recording<R>(&mut self, on: bool, f: impl FnOnce(&mut Tape) -> R) -> R {
        let prev = self.set_recording(on);
        let out = f(self);
        self.recording = prev;
        out
    }

    /// Number of recorded operation nodes. Leaves are not counted.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: DenseArray, live: bool) -> Var {
        self.entries.push(Entry { value, live });
        Var {
            index: self.entries.len() - 1,
            tape: self.id,
        }
    }

    /// A watched leaf: `backward` reports a gradient for it.
    pub fn variable(&mut self, value: DenseArray) -> Var {
        let v = self.push(value, true);
        self.watched.push(v.index);
        v
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, false)
    }

    fn check(&self, v: Var) -> Result<(), TapeError> {
        if v.tape != self.id || v.index >= self.entries.len() {
            return Err(TapeError::ForeignHandle { index: v.index });
        }
        Ok(())
    }

    /// Value behind a handle. Panics on a handle from another tape.
    pub fn value(&self, v: Var) -> &DenseArray {
        assert!(v.tape == self.id, "handle {} belongs to a different tape", v.index);
        &self.entries[v.index].value
    }

    pub fn is_live(&self, v: Var) -> bool {
        self.entries[v.index].live
    }

    /// Identity on values, zero on the backward pass.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, false)
    }

    /// Evaluate `primitive` on `inputs`, recording a node when appropriate.
    pub fn record(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var, TapeError> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&DenseArray> = inputs.iter().map(|v| &self.entries[v.index].value).collect();
        let out = forward(primitive, &values)?;
        let live = self.recording && inputs.iter().any(|v| self.entries[v.index].live);
        let var = self.push(out, live);
        if live {
            self.nodes.push(Node {
                primitive,
                inputs: inputs.iter().map(|v| v.index).collect(),
                output: var.index,
            });
        }
        Ok(var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, TapeError> {
        match b {
            Some(b) => self.record(Primitive::Affine, &[w, x, b]),
            None => self.record(Primitive::Affine, &[w, x]),
        }
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::SquaredNorm, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TapeError> {
        self.record(Primitive::Clamp { lo, hi }, &[a])
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TapeError> {
        self.check(output)?;
        let shape = self.entries[output.index].value.shape().to_vec();
        if self.entries[output.index].value.len() != 1 {
            return Err(TapeError::NotScalar { shape });
        }
        self.vjp(output, &DenseArray::filled(&shape, 1.0))
    }

    /// Vector-Jacobian product: pulls `cotangent` (shaped like `output`)
    /// back to every watched variable.
    pub fn vjp(&self, output: Var, cotangent: &DenseArray) -> Result<Gradients, TapeError> {
        self.check(output)?;
        let out_shape = self.entries[output.index].value.shape();
        if out_shape != cotangent.shape() {
            return Err(TapeError::CotangentShape {
                output: out_shape.to_vec(),
                cotangent: cotangent.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        if self.entries[output.index].live {
            adj[output.index] = Some(cotangent.data().to_vec());
        }
        for node in self.nodes.iter().rev() {
            if node.output > output.index {
                continue;
            }
            let Some(g) = adj[node.output].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g);
            for (slot, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.entries[*slot].live {
                    continue;
                }
                match &mut adj[*slot] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    None => adj[*slot] = Some(contrib),
                }
            }
        }
        let mut grads = HashMap::with_capacity(self.watched.len());
        for &w in &self.watched {
            let value = &self.entries[w].value;
            let data = adj[w].take().unwrap_or_else(|| vec![0.0; value.len()]);
            let arr = DenseArray::new(value.shape().to_vec(), data).expect("gradient shape");
            grads.insert(Var { index: w, tape: self.id }, arr);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |i: usize| &self.entries[node.inputs[i]].value;
        let live = |i: usize| self.entries[node.inputs[i]].live;
        match node.primitive {
            Primitive::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Primitive::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Primitive::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                let grad_for = |this: &DenseArray, other: &DenseArray| -> Vec<f64> {
                    if this.shape() == other.shape() {
                        g.iter().zip(other.data()).map(|(g, o)| g * o).collect()
                    } else if this.is_scalar_like() {
                        vec![g.iter().zip(other.data()).map(|(g, o)| g * o).sum()]
                    } else {
                        let s = other.data()[0];
                        g.iter().map(|g| g * s).collect()
                    }
                };
                vec![
                    live(0).then(|| grad_for(a, b)),
                    live(1).then(|| grad_for(b, a)),
                ]
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
                // ga = g [m,n] x b^T [n,k]; gb = a^T [k,m] x g [m,n]
                let ga = live(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b.data()[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    ga
                });
                let gb = live(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }
            Primitive::Affine => {
                let (w, x) = (val(0), val(1));
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / inp;
                let (gx, gw, gb) = kernels::affine_backward(w.data(), x.data(), g, rows, inp, out);
                let mut res = vec![Some(gw), Some(gx)];
                if node.inputs.len() == 3 {
                    res.push(Some(gb));
                }
                res
            }
            Primitive::Tanh => {
                let y = &self.entries[node.output].value;
                vec![Some(
                    g.iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )]
            }
            Primitive::Sum => vec![Some(vec![g[0]; val(0).len()])],
            Primitive::Mean => {
                let n = val(0).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Primitive::SquaredNorm => {
                vec![Some(val(0).data().iter().map(|x| 2.0 * x * g[0]).collect())]
            }
            Primitive::Clamp { lo, hi } => vec![Some(
                val(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > lo && x < hi { g } else { 0.0 })
                    .collect(),
            )],
        }
    }
}

fn mismatch(p: Primitive, inputs: &[&DenseArray]) -> TapeError {
    TapeError::ShapeMismatch {
        primitive: p.name(),
        shapes: inputs.iter().map(|v| v.shape().to_vec()).collect(),
    }
}

fn arity(p: Primitive, expected: &'static str, actual: usize) -> TapeError {
    TapeError::Arity {
        primitive: p.name(),
        expected,
        actual,
    }
}

fn forward(p: Primitive, x: &[&DenseArray]) -> Result<DenseArray, TapeError> {
    let unary = |x: &[&DenseArray]| -> Result<(), TapeError> {
        if x.len() != 1 {
            return Err(arity(p, "1", x.len()));
        }
        Ok(())
    };
    let binary = |x: &[&DenseArray]| -> Result<(), TapeError> {
        if x.len() != 2 {
            return Err(arity(p, "2", x.len()));
        }
        Ok(())
    };
    match p {
        Primitive::Add => {
            binary(x)?;
            x[0].add(x[1]).map_err(|_| mismatch(p, x))
        }
        Primitive::Sub => {
            binary(x)?;
            x[0].sub(x[1]).map_err(|_| mismatch(p, x))
        }
        Primitive::Scale(c) => {
            unary(x)?;
            Ok(x[0].scale(c))
        }
        Primitive::Mul => {
            binary(x)?;
            x[0].mul(x[1]).map_err(|_| mismatch(p, x))
        }
        Primitive::MatMul => {
            binary(x)?;
            let (a, b) = (x[0], x[1]);
            if a.shape().len() != 2 || b.shape().is_empty() || b.shape().len() > 2 {
                return Err(mismatch(p, x));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            if b.shape()[0] != k {
                return Err(mismatch(p, x));
            }
            let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
            let data = kernels::matmul(a.data(), b.data(), m, k, n);
            let shape = if b.shape().len() == 2 { vec![m, n] } else { vec![m] };
            Ok(DenseArray::new(shape, data).expect("matmul shape"))
        }
        Primitive::Affine => {
            if x.len() != 2 && x.len() != 3 {
                return Err(arity(p, "2 or 3", x.len()));
            }
            let (w, inp_arr) = (x[0], x[1]);
            if w.shape().len() != 2 || inp_arr.shape().is_empty() || inp_arr.shape().len() > 2 {
                return Err(mismatch(p, x));
            }
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            if inp_arr.last_dim() != inp {
                return Err(mismatch(p, x));
            }
            let bias = if x.len() == 3 {
                if x[2].shape() != [out] {
                    return Err(mismatch(p, x));
                }
                Some(x[2].data())
            } else {
                None
            };
            let rows = inp_arr.rows();
            let data = kernels::affine(w.data(), inp_arr.data(), bias, rows, inp, out);
            let shape = if inp_arr.shape().len() == 2 {
                vec![rows, out]
            } else {
                vec![out]
            };
            Ok(DenseArray::new(shape, data).expect("affine shape"))
        }
        Primitive::Tanh => {
            unary(x)?;
            Ok(DenseArray::new(x[0].shape().to_vec(), kernels::tanh(x[0].data())).expect("tanh"))
        }
        Primitive::Sum => {
            unary(x)?;
            Ok(DenseArray::scalar(x[0].sum()))
        }
        Primitive::Mean => {
            unary(x)?;
            if x[0].is_empty() {
                return Err(mismatch(p, x));
            }
            Ok(DenseArray::scalar(x[0].sum() / x[0].len() as f64))
        }
        Primitive::SquaredNorm => {
            unary(x)?;
            Ok(DenseArray::scalar(x[0].squared_norm()))
        }
        Primitive::Clamp { lo, hi } => {
            unary(x)?;
            Ok(DenseArray::new(x[0].shape().to_vec(), kernels::clamp(x[0].data(), lo, hi))
                .expect("clamp"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DenseArray {
        DenseArray::scalar(v)
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.variable(s(2.0));
        let y = t.constant(s(3.0));
        let z = t.mul(x, y).unwrap();
        assert_eq!(t.value(z).item(), 6.0);
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 3.0);
    }

    #[test]
    fn clamp_saturated_has_zero_slope() {
        let mut t = Tape::new();
        let x = t.variable(s(1.5));
        let z = t.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(t.value(z).item(), 1.0);
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 0.0);
        // exact boundary point also gets zero
        let mut t = Tape::new();
        let x = t.variable(s(1.0));
        let z = t.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.variable(s(0.0));
        let z = t.tanh(x).unwrap();
        assert_eq!(t.value(z).item(), 0.0);
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn stop_gradient_kills_one_branch() {
        let mut t = Tape::new();
        let x = t.variable(s(5.0));
        let sx = t.stop_gradient(x);
        let z = t.add(x, sx).unwrap();
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 1.0);

        let mut t = Tape::new();
        let x = t.variable(s(2.0));
        let sx = t.stop_gradient(x);
        let z = t.mul(sx, x).unwrap();
        assert_eq!(t.backward(z).unwrap().wrt(x).item(), 2.0);

        let mut t = Tape::new();
        let x = t.variable(s(7.0));
        let sx = t.stop_gradient(x);
        assert_eq!(t.value(sx).item(), 7.0);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.variable(s(3.0));
        let sq = t.squared_norm(x).unwrap();
        let f = t.scale(sq, 0.5).unwrap();
        assert_eq!(t.backward(f).unwrap().wrt(x).item(), 3.0);

        let mut t = Tape::new();
        let x = t.variable(s(2.0));
        let y = t.variable(s(3.0));
        let xy = t.mul(x, y).unwrap();
        let f = t.add(xy, y).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (3.0, 3.0));

        let mut t = Tape::new();
        let x = t.variable(s(2.0));
        let sx = t.stop_gradient(x);
        let f = t.mul(sx, sx).unwrap();
        assert_eq!(t.backward(f).unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn untouched_watched_variable_gets_zeros() {
        let mut t = Tape::new();
        let x = t.variable(DenseArray::vector(vec![1.0, 2.0]));
        let y = t.variable(DenseArray::vector(vec![3.0, 4.0, 5.0]));
        let f = t.squared_norm(x).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn node_counting() {
        let mut t = Tape::new();
        assert_eq!(t.node_count(), 0);
        let x = t.variable(s(1.0));
        let y = t.variable(s(2.0));
        t.add(x, y).unwrap();
        assert_eq!(t.node_count(), 1);

        let mut t = Tape::new();
        let mut x = t.variable(s(1.0));
        t.set_recording(false);
        for _ in 0..10 {
            x = t.add(x, x).unwrap();
        }
        assert_eq!(t.node_count(), 0);
        assert!(!t.is_live(x));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.variable(DenseArray::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(TapeError::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.variable(DenseArray::vector(vec![1.0, 2.0]));
        let b = t.variable(DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TapeError::ShapeMismatch {
                primitive: "add",
                shapes: vec![vec![2], vec![3]]
            }
        );
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn foreign_handle_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.variable(s(1.0));
        let y = t2.variable(s(1.0));
        assert!(matches!(t2.add(x, y), Err(TapeError::ForeignHandle { .. })));
    }

    #[test]
    fn sg_of_sg_matches_sg() {
        let mut t = Tape::new();
        let x = t.variable(s(4.0));
        let a = t.stop_gradient(x);
        let b = t.stop_gradient(a);
        let fa = t.mul(a, x).unwrap();
        let fb = t.mul(b, x).unwrap();
        assert_eq!(t.value(fa), t.value(fb));
        assert_eq!(t.backward(fa).unwrap().wrt(x), t.backward(fb).unwrap().wrt(x));
    }
}
