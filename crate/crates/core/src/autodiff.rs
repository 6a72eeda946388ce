//! Scalar reverse-mode automatic differentiation.
//!
//! Computations are written once against the [`Graph`] trait and can then be
//! run either on a recording [`Tape`] (values plus cached local partials, so a
//! later [`Tape::backward`] yields gradients) or on [`Eval`], which performs the
//! same floating-point arithmetic without recording anything. Both backends
//! share the primitive formulas below, so a value computed on a tape is
//! bitwise identical to the same value computed with `Eval`.
//!
//! The tape stores one node per scalar. Inputs of a node always have smaller
//! ids than the node itself, so reverse accumulation is a single backwards
//! sweep over the node list.

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op} of non-positive value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("primitive {op:?} expects {expected} inputs, got {got}")]
    Arity { op: Op, expected: usize, got: usize },
    #[error("node {0} is not on this tape")]
    NotOnTape(u32),
}

/// Primitive operations a tape can record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Differentiable input (a parameter or any other leaf of interest).
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Tanh,
    Sqrt,
    Abs,
    Square,
    Sum,
}

impl Op {
    fn arity(self) -> Option<usize> {
        match self {
            Op::Leaf | Op::Const => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div => Some(2),
            Op::Neg | Op::Exp | Op::Ln | Op::Tanh | Op::Sqrt | Op::Abs | Op::Square => Some(1),
            Op::Sum => None,
        }
    }
}

// Primitive value formulas shared by both backends.

#[inline]
fn sum_values(xs: impl Iterator<Item = f64>) -> f64 {
    let mut xs = xs;
    match xs.next() {
        Some(first) => xs.fold(first, |acc, x| acc + x),
        None => 0.0,
    }
}

#[inline]
fn checked_ln(a: f64) -> Result<f64, AutodiffError> {
    if a > 0.0 {
        Ok(a.ln())
    } else {
        Err(AutodiffError::Domain { op: "ln", value: a })
    }
}

#[inline]
fn checked_sqrt(a: f64) -> Result<f64, AutodiffError> {
    if a > 0.0 {
        Ok(a.sqrt())
    } else {
        Err(AutodiffError::Domain { op: "sqrt", value: a })
    }
}

/// Subgradient of `|x|`, taken as 0 at exactly 0.
#[inline]
fn abs_partial(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Arithmetic backend used by the neural models and the particle filters.
pub trait Graph {
    type V: Copy + std::fmt::Debug;

    /// A differentiable input.
    fn param(&mut self, value: f64) -> Self::V;
    /// A value that gradients do not flow into.
    fn constant(&mut self, value: f64) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Result<Self::V, AutodiffError>;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Result<Self::V, AutodiffError>;
    fn abs(&mut self, a: Self::V) -> Self::V;
    fn square(&mut self, a: Self::V) -> Self::V;
    /// Left-to-right sum; the empty sum is 0.
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
}

/// Plain `f64` evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type V = f64;

    fn param(&mut self, value: f64) -> f64 {
        value
    }
    fn constant(&mut self, value: f64) -> f64 {
        value
    }
    fn value(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> Result<f64, AutodiffError> {
        checked_ln(a)
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn sqrt(&mut self, a: f64) -> Result<f64, AutodiffError> {
        checked_sqrt(a)
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn square(&mut self, a: f64) -> f64 {
        a * a
    }
    fn sum(&mut self, xs: &[f64]) -> f64 {
        sum_values(xs.iter().copied())
    }
}

/// Handle to a node on a [`Tape`]. Only valid against the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Var {
    tape: u32,
    id: u32,
    value: f64,
}

impl Var {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn node_id(&self) -> u32 {
        self.id
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    input: u32,
    partial: f64,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Append-only record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    ops: Vec<Op>,
    values: Vec<f64>,
    // edges of node i live in edges[edge_start[i]..edge_start[i + 1]]
    edge_start: Vec<u32>,
    edges: Vec<Edge>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut edge_start = Vec::with_capacity(nodes + 1);
        edge_start.push(0);
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            ops: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            edge_start,
            edges: Vec::with_capacity(nodes * 2),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Next node id to be assigned.
    pub fn next_id(&self) -> u32 {
        self.ops.len() as u32
    }

    #[inline]
    fn check(&self, v: Var) {
        assert!(
            v.tape == self.id && (v.id as usize) < self.ops.len(),
            "Var {} belongs to tape {}, not tape {}",
            v.id,
            v.tape,
            self.id
        );
    }

    #[inline]
    fn push(&mut self, op: Op, value: f64, edges: &[(Var, f64)]) -> Var {
        let id = self.ops.len() as u32;
        for &(input, partial) in edges {
            self.check(input);
            assert!(input.id < id, "topological order violated");
            self.edges.push(Edge {
                input: input.id,
                partial,
            });
        }
        self.ops.push(op);
        self.values.push(value);
        self.edge_start.push(self.edges.len() as u32);
        Var {
            tape: self.id,
            id,
            value,
        }
    }

    /// Records `op` applied to `inputs` and caches its local partials.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if let Some(expected) = op.arity() {
            if expected != inputs.len() {
                return Err(AutodiffError::Arity {
                    op,
                    expected,
                    got: inputs.len(),
                });
            }
        }
        for &v in inputs {
            self.check(v);
        }
        Ok(match op {
            Op::Leaf | Op::Const => unreachable!("leaves are created with param/constant"),
            Op::Add => self.add(inputs[0], inputs[1]),
            Op::Sub => self.sub(inputs[0], inputs[1]),
            Op::Mul => self.mul(inputs[0], inputs[1]),
            Op::Div => self.div(inputs[0], inputs[1]),
            Op::Neg => self.neg(inputs[0]),
            Op::Exp => self.exp(inputs[0]),
            Op::Ln => self.ln(inputs[0])?,
            Op::Tanh => self.tanh(inputs[0]),
            Op::Sqrt => self.sqrt(inputs[0])?,
            Op::Abs => self.abs(inputs[0]),
            Op::Square => self.square(inputs[0]),
            Op::Sum => self.sum(inputs),
        })
    }

    /// Reverse accumulation of `∂root/∂leaf` for every requested leaf.
    ///
    /// The adjoint buffer is allocated per call and the tape is not modified,
    /// so calling this more than once on the same tape is allowed.
    pub fn backward(&self, root: Var, leaves: &[Var]) -> Result<Gradient, AutodiffError> {
        if root.tape != self.id || root.id as usize >= self.ops.len() {
            return Err(AutodiffError::NotOnTape(root.id));
        }
        for leaf in leaves {
            if leaf.tape != self.id || leaf.id as usize >= self.ops.len() {
                return Err(AutodiffError::NotOnTape(leaf.id));
            }
        }
        let n = root.id as usize + 1;
        let mut adjoint = vec![0.0_f64; n];
        adjoint[root.id as usize] = 1.0;
        for node in (0..n).rev() {
            let a = adjoint[node];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (self.edge_start[node] as usize, self.edge_start[node + 1] as usize);
            for e in &self.edges[lo..hi] {
                adjoint[e.input as usize] += e.partial * a;
            }
        }
        let entries = leaves
            .iter()
            .map(|leaf| {
                let adj = adjoint.get(leaf.id as usize).copied().unwrap_or(0.0);
                (leaf.id, adj)
            })
            .collect();
        Ok(Gradient { entries })
    }

    /// Recomputes every node value from the leaf and constant values.
    pub fn replay(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let (lo, hi) = (self.edge_start[i] as usize, self.edge_start[i + 1] as usize);
            let arg = |k: usize| out[self.edges[lo + k].input as usize];
            let v = match op {
                Op::Leaf | Op::Const => self.values[i],
                Op::Add => arg(0) + arg(1),
                Op::Sub => arg(0) - arg(1),
                Op::Mul => arg(0) * arg(1),
                Op::Div => arg(0) / arg(1),
                Op::Neg => -arg(0),
                Op::Exp => arg(0).exp(),
                Op::Ln => arg(0).ln(),
                Op::Tanh => arg(0).tanh(),
                Op::Sqrt => arg(0).sqrt(),
                Op::Abs => arg(0).abs(),
                Op::Square => arg(0) * arg(0),
                Op::Sum => sum_values((0..hi - lo).map(arg)),
            };
            out.push(v);
        }
        out
    }

    /// Cached value of every node, indexed by node id.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Input node ids of `node`.
    pub fn inputs(&self, node: u32) -> Vec<u32> {
        let i = node as usize;
        let (lo, hi) = (self.edge_start[i] as usize, self.edge_start[i + 1] as usize);
        self.edges[lo..hi].iter().map(|e| e.input).collect()
    }
}

impl Graph for Tape {
    type V = Var;

    fn param(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value, &[])
    }
    fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value, &[])
    }
    fn value(&self, v: Var) -> f64 {
        v.value
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, a.value + b.value, &[(a, 1.0), (b, 1.0)])
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub, a.value - b.value, &[(a, 1.0), (b, -1.0)])
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, a.value * b.value, &[(a, b.value), (b, a.value)])
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        let y = a.value / b.value;
        self.push(Op::Div, y, &[(a, 1.0 / b.value), (b, -y / b.value)])
    }
    fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg, -a.value, &[(a, -1.0)])
    }
    fn exp(&mut self, a: Var) -> Var {
        let y = a.value.exp();
        self.push(Op::Exp, y, &[(a, y)])
    }
    fn ln(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let y = checked_ln(a.value)?;
        Ok(self.push(Op::Ln, y, &[(a, 1.0 / a.value)]))
    }
    fn tanh(&mut self, a: Var) -> Var {
        let y = a.value.tanh();
        self.push(Op::Tanh, y, &[(a, 1.0 - y * y)])
    }
    fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let y = checked_sqrt(a.value)?;
        Ok(self.push(Op::Sqrt, y, &[(a, 0.5 / y)]))
    }
    fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs, a.value.abs(), &[(a, abs_partial(a.value))])
    }
    fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square, a.value * a.value, &[(a, 2.0 * a.value)])
    }
    fn sum(&mut self, xs: &[Var]) -> Var {
        let id = self.ops.len() as u32;
        for &x in xs {
            self.check(x);
            assert!(x.id < id, "topological order violated");
            self.edges.push(Edge {
                input: x.id,
                partial: 1.0,
            });
        }
        let value = sum_values(xs.iter().map(|x| x.value));
        self.ops.push(Op::Sum);
        self.values.push(value);
        self.edge_start.push(self.edges.len() as u32);
        Var {
            tape: self.id,
            id,
            value,
        }
    }
}

/// Adjoints `∂root/∂leaf`, in the order the leaves were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    entries: Vec<(u32, f64)>,
}

impl Gradient {
    pub fn get(&self, leaf: &Var) -> Option<f64> {
        self.entries.iter().find(|(id, _)| *id == leaf.id).map(|(_, g)| *g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adjoints in leaf-request order.
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, g)| *g).collect()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values()
    }
}

/// A scalar function of a parameter vector, written once for any backend.
pub trait ScalarFn {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> Result<G::V, AutodiffError>;
}

/// Value and gradient of `f` at `point`, via one tape.
pub fn value_and_grad<F: ScalarFn>(f: &F, point: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|&x| tape.param(x)).collect();
    let root = f.eval(&mut tape, &leaves)?;
    let grad = tape.backward(root, &leaves)?;
    Ok((root.value(), grad.into_values()))
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, point: &[f64], step: f64) -> Result<f64, AutodiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = value_and_grad(f, point)?;
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f.eval(&mut Eval, &x)?;
        x[i] = orig - step;
        let down = f.eval(&mut Eval, &x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_primitives() {
        let mut t = Tape::new();
        let x = t.param(3.0);
        let y = t.param(4.0);
        assert_eq!(t.record(Op::Mul, &[x, y]).unwrap().value(), 12.0);
        let z = t.constant(0.0);
        assert_eq!(t.record(Op::Tanh, &[z]).unwrap().value(), 0.0);
        let w = t.constant(-2.3);
        assert_eq!(t.record(Op::Abs, &[w]).unwrap().value(), 2.3);
    }

    #[test]
    fn record_rejects_bad_arity_and_domain() {
        let mut t = Tape::new();
        let x = t.param(-1.0);
        assert!(matches!(t.record(Op::Add, &[x]), Err(AutodiffError::Arity { .. })));
        assert!(matches!(t.ln(x), Err(AutodiffError::Domain { op: "ln", .. })));
        assert!(matches!(t.sqrt(x), Err(AutodiffError::Domain { op: "sqrt", .. })));
        let zero = t.constant(0.0);
        assert!(t.sqrt(zero).is_err());
    }

    #[test]
    #[should_panic(expected = "belongs to tape")]
    fn foreign_var_panics() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(1.0);
        let _ = b.param(1.0);
        b.exp(x);
    }

    #[test]
    fn backward_rejects_foreign_leaf() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(1.0);
        let y = b.param(1.0);
        let r = a.square(x);
        assert_eq!(a.backward(r, &[y]), Err(AutodiffError::NotOnTape(y.node_id())));
    }

    #[test]
    fn power_rule_and_tanh() {
        let mut t = Tape::new();
        let x = t.param(3.0);
        let r = t.square(x);
        assert_eq!(t.backward(r, &[x]).unwrap().get(&x), Some(6.0));

        let mut t = Tape::new();
        let x = t.param(0.0);
        let r = t.tanh(x);
        assert_eq!(t.backward(r, &[x]).unwrap().get(&x), Some(1.0));
    }

    #[test]
    fn abs_subgradient_is_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.param(0.0);
        let r = t.abs(x);
        assert_eq!(t.backward(r, &[x]).unwrap().values(), vec![0.0]);
    }

    #[test]
    fn unused_leaf_has_zero_adjoint() {
        let mut t = Tape::new();
        let x = t.param(2.0);
        let unused = t.param(5.0);
        let r = t.exp(x);
        let g = t.backward(r, &[x, unused]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(&unused), Some(0.0));
    }

    #[test]
    fn sum_of_nothing_is_zero() {
        let mut t = Tape::new();
        assert_eq!(t.sum(&[]).value(), 0.0);
        assert_eq!(Eval.sum(&[]), 0.0);
    }

    struct Kernel;
    impl ScalarFn for Kernel {
        // exp(−(o − e)²/(2σ²)) with o = x[0], e = x[1], σ = x[2]
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> Result<G::V, AutodiffError> {
            let r = g.sub(x[0], x[1]);
            let r2 = g.square(r);
            let s2 = g.square(x[2]);
            let two = g.constant(2.0);
            let den = g.mul(two, s2);
            let q = g.div(r2, den);
            let nq = g.neg(q);
            Ok(g.exp(nq))
        }
    }

    #[test]
    fn gaussian_kernel_gradient_matches_finite_difference() {
        let point = [1.0, 0.5, 1.0];
        let (_, grad) = value_and_grad(&Kernel, &point).unwrap();
        let h = 1e-5;
        let f = |e: f64| Kernel.eval(&mut Eval, &[1.0, e, 1.0]).unwrap();
        let numeric = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!((grad[1] - numeric).abs() / numeric.abs() <= 1e-5);
        assert!(finite_diff_check(&Kernel, &point, h).unwrap() <= 1e-5);
    }

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> Result<G::V, AutodiffError> {
            let sq: Vec<_> = x.iter().map(|&v| g.square(v)).collect();
            Ok(g.sum(&sq))
        }
    }

    struct Constant;
    impl ScalarFn for Constant {
        fn eval<G: Graph>(&self, g: &mut G, _x: &[G::V]) -> Result<G::V, AutodiffError> {
            Ok(g.constant(7.0))
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let (_, grad) = value_and_grad(&SumSquares, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(grad, vec![2.0, 4.0, 6.0]);
        assert!(finite_diff_check(&SumSquares, &[1.0, 2.0, 3.0], 1e-5).unwrap() <= 1e-6);
        assert_eq!(finite_diff_check(&Constant, &[1.0, -2.0], 1e-5).unwrap(), 0.0);
    }

    /// A composite of every primitive. Inputs are shifted so that the ln and
    /// sqrt arguments stay well inside their domains.
    struct Composite;
    impl ScalarFn for Composite {
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> Result<G::V, AutodiffError> {
            let (a, b, c) = (x[0], x[1], x[2]);
            let ab = g.mul(a, b);
            let t = g.tanh(ab);
            let sq = g.square(c);
            let three = g.constant(3.0);
            let pos = g.add(sq, three);
            let l = g.ln(pos)?;
            let ab_abs = g.abs(b);
            let one = g.constant(1.0);
            let shifted = g.add(ab_abs, one);
            let r = g.sqrt(shifted)?;
            let q = g.div(l, r);
            let e = g.exp(t);
            let n = g.neg(e);
            let d = g.sub(q, n);
            Ok(g.sum(&[d, t, a]))
        }
    }

    proptest! {
        #[test]
        fn composite_gradient_matches_finite_difference(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
        ) {
            // keep |b| off the abs kink
            prop_assume!(b.abs() > 1e-3);
            let err = finite_diff_check(&Composite, &[a, b, c], 1e-5).unwrap();
            prop_assert!(err <= 1e-5, "relative error {err}");
        }

        #[test]
        fn backward_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..2.0,
        ) {
            let point = [x, y, z];
            let (_, gf) = value_and_grad(&Kernel, &point).unwrap();
            let (_, gg) = value_and_grad(&SumSquares, &point).unwrap();
            struct Combo(f64, f64);
            impl ScalarFn for Combo {
                fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> Result<G::V, AutodiffError> {
                    let f = Kernel.eval(g, x)?;
                    let h = SumSquares.eval(g, x)?;
                    let ca = g.constant(self.0);
                    let cb = g.constant(self.1);
                    let af = g.mul(ca, f);
                    let bh = g.mul(cb, h);
                    Ok(g.add(af, bh))
                }
            }
            let (_, gc) = value_and_grad(&Combo(a, b), &point).unwrap();
            for i in 0..3 {
                let expected = a * gf[i] + b * gg[i];
                prop_assert!((gc[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }

        #[test]
        fn tape_is_topological_and_replays_exactly(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
        ) {
            let mut t = Tape::new();
            let xs: Vec<Var> = [a, b, c].iter().map(|&v| t.param(v)).collect();
            let root = Composite.eval(&mut t, &xs).unwrap();
            for node in 0..t.len() as u32 {
                for input in t.inputs(node) {
                    prop_assert!(input < node);
                }
            }
            let replayed = t.replay();
            prop_assert_eq!(replayed.len(), t.values().len());
            for (r, v) in replayed.iter().zip(t.values()) {
                prop_assert_eq!(r.to_bits(), v.to_bits());
            }
            // Eval backend agrees bitwise with the tape
            let plain = Composite.eval(&mut Eval, &[a, b, c]).unwrap();
            prop_assert_eq!(plain.to_bits(), root.value().to_bits());
        }
    }
}
