//! Reverse-mode differentiation on a dynamically recorded scalar tape.
//!
//! A [`Tape`] is an append-only list of nodes. Every node stores the operation
//! that produced it, its operands (earlier nodes or inline constants), the
//! local partial derivative with respect to each operand and the forward
//! value. Because operands always precede the node that uses them, the node
//! list is a topological order and a single reverse sweep accumulates all
//! adjoints.
//!
//! The tape is rebuilt for every optimisation step. Particle ancestry in an
//! SMC sweep is random, so the shape of the graph changes from one step to the
//! next.
//!
//! Model code is written once against the [`Real`] trait and instantiated
//! either with plain `f64` (fast forward evaluation) or with [`Var`]
//! (recorded for differentiation). Both instantiations share the same scalar
//! kernels, so forward values agree bit-for-bit.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use smallvec::SmallVec;
use thiserror::Error;

/// Elementary operation recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    /// `x^p` for a constant exponent `p`.
    Powf(f64),
    LogSumExp,
    Sum,
    /// Node whose value and partials were computed outside the tape. Replay
    /// reuses the stored value.
    Fused,
}

impl Op {
    fn arity(self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div => Some(2),
            Op::LogSumExp | Op::Sum | Op::Fused => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("domain error in {op:?} at node {node}: argument {value}")]
    Domain { op: Op, node: usize, value: f64 },
    #[error("{op:?} expects {expected} argument(s), got {got}")]
    Arity { op: Op, expected: usize, got: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

#[derive(Debug, Clone, Copy)]
enum Operand {
    Node(usize),
    Const(f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    operands: SmallVec<[Operand; 2]>,
    partials: SmallVec<[f64; 2]>,
    value: f64,
}

/// First argument outside an operation's domain seen by the lenient
/// (operator-overloading) recording path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainViolation {
    pub op: Op,
    pub node: usize,
    pub value: f64,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    violation: Cell<Option<DomainViolation>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

thread_local! {
    // Node storage of the last dropped tape on this thread. Optimisation loops
    // build one large tape per step; reusing the allocation avoids touching
    // fresh memory every time.
    static SPARE_NODES: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

impl Drop for Tape {
    fn drop(&mut self) {
        let mut nodes = std::mem::take(self.nodes.get_mut());
        nodes.clear();
        let _ = SPARE_NODES.try_with(|spare| {
            let mut spare = spare.borrow_mut();
            if nodes.capacity() > spare.capacity() {
                *spare = nodes;
            }
        });
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let nodes = SPARE_NODES
            .try_with(|spare| std::mem::take(&mut *spare.borrow_mut()))
            .unwrap_or_default();
        Tape {
            nodes: RefCell::new(nodes),
            violation: Cell::new(None),
        }
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            violation: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Declares a differentiable leaf (a parameter).
    pub fn var(&self, value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            operands: SmallVec::new(),
            partials: SmallVec::new(),
            value,
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    /// Declares one leaf per value.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Checked recording: rejects foreign variables, wrong arity and
    /// arguments outside the operation's domain.
    pub fn record<'t>(&'t self, op: Op, args: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        if let Some(expected) = op.arity() {
            if expected != args.len() || op == Op::Leaf {
                return Err(AdError::Arity {
                    op,
                    expected,
                    got: args.len(),
                });
            }
        } else if op == Op::Fused {
            return Err(AdError::Arity {
                op,
                expected: 0,
                got: args.len(),
            });
        }
        for a in args {
            if let Some(t) = a.tape {
                if !std::ptr::eq(t, self) {
                    return Err(AdError::ForeignVar);
                }
            }
        }
        if let Some(value) = domain_violation(op, args.iter().map(|a| a.value)) {
            return Err(AdError::Domain {
                op,
                node: self.len(),
                value,
            });
        }
        Ok(self.push(op, args))
    }

    fn push<'t>(&'t self, op: Op, args: &[Var<'t>]) -> Var<'t> {
        let values: SmallVec<[f64; 4]> = args.iter().map(|a| a.value).collect();
        let (value, partials) = eval(op, &values);
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        if self.violation.get().is_none() {
            if let Some(bad) = domain_violation(op, values.iter().copied()) {
                self.violation.set(Some(DomainViolation {
                    op,
                    node: index,
                    value: bad,
                }));
            }
        }
        let operands = args
            .iter()
            .map(|a| match a.tape {
                Some(t) => {
                    assert!(std::ptr::eq(t, self), "operands recorded on different tapes");
                    Operand::Node(a.index)
                }
                None => Operand::Const(a.value),
            })
            .collect();
        nodes.push(Node {
            op,
            operands,
            partials,
            value,
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    fn push_fused<'t>(&'t self, value: f64, parts: &[(Var<'t>, f64)]) -> Var<'t> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        let mut operands = SmallVec::new();
        let mut partials = SmallVec::new();
        for (v, d) in parts {
            if let Some(t) = v.tape {
                assert!(std::ptr::eq(t, self), "operands recorded on different tapes");
                operands.push(Operand::Node(v.index));
                partials.push(*d);
            }
        }
        nodes.push(Node {
            op: Op::Fused,
            operands,
            partials,
            value,
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    /// The first out-of-domain argument recorded through operator overloading.
    pub fn domain_violation(&self) -> Option<DomainViolation> {
        self.violation.get()
    }

    /// Reverse sweep from `output`. Adjoints accumulate, so shared
    /// subexpressions receive the sum of all their uses.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradients, AdError> {
        let nodes = self.nodes.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        match output.tape {
            None => {}
            Some(t) if !std::ptr::eq(t, self) => return Err(AdError::ForeignVar),
            Some(_) => {
                adjoints[output.index] = 1.0;
                for i in (0..=output.index).rev() {
                    let adj = adjoints[i];
                    if adj == 0.0 {
                        continue;
                    }
                    let node = &nodes[i];
                    for (operand, d) in node.operands.iter().zip(&node.partials) {
                        if let Operand::Node(j) = *operand {
                            adjoints[j] += adj * d;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self as *const Tape,
            adjoints,
        })
    }

    /// Gradient of `output` with respect to the given leaves, in order.
    pub fn backward(&self, output: Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<f64>, AdError> {
        let grads = self.gradient(output)?;
        leaves.iter().map(|&l| grads.try_wrt(l)).collect()
    }

    /// Recomputes every node's forward value from the leaves and inline
    /// constants. Fused nodes keep their stored value.
    pub fn replay(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<f64> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Fused => node.value,
                op => {
                    let args: SmallVec<[f64; 4]> = node
                        .operands
                        .iter()
                        .map(|o| match *o {
                            Operand::Node(j) => values[j],
                            Operand::Const(c) => c,
                        })
                        .collect();
                    eval(op, &args).0
                }
            };
            values.push(v);
        }
        values
    }

    /// Stored forward values, in node order.
    pub fn values(&self) -> Vec<f64> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }

    /// Checks the topological-order invariant: every operand index is
    /// smaller than the index of the node using it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.borrow().iter().enumerate().all(|(i, n)| {
            n.operands.iter().all(|o| match *o {
                Operand::Node(j) => j < i,
                Operand::Const(_) => true,
            })
        })
    }
}

/// Adjoints of one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: *const Tape,
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `v`; zero for constants. Panics on a variable from another tape.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.try_wrt(v).expect("variable from a different tape")
    }

    pub fn try_wrt(&self, v: Var<'_>) -> Result<f64, AdError> {
        match v.tape {
            None => Ok(0.0),
            Some(t) if std::ptr::eq(t, self.tape) => Ok(self.adjoints[v.index]),
            Some(_) => Err(AdError::ForeignVar),
        }
    }
}

/// Scalar handle into a [`Tape`], or a constant when it has no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.index, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            index: usize::MAX,
            value,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    /// Index of the node on its tape, `None` for constants.
    pub fn node(&self) -> Option<usize> {
        self.tape.map(|_| self.index)
    }

    /// Same value, no gradient flow.
    pub fn stop_gradient(self) -> Self {
        Var::constant(self.value)
    }
}

fn apply<'t>(op: Op, args: &[Var<'t>]) -> Var<'t> {
    if let Some(v) = identity_shortcut(op, args) {
        return v;
    }
    match args.iter().find_map(|a| a.tape) {
        Some(tape) => tape.push(op, args),
        None => {
            let values: SmallVec<[f64; 4]> = args.iter().map(|a| a.value).collect();
            Var::constant(eval(op, &values).0)
        }
    }
}

/// Skips recording `x·1`, `x·0`, `x+0`, `x−0` and `x/1` with a constant operand;
/// the result and its derivatives are unchanged.
fn identity_shortcut<'t>(op: Op, args: &[Var<'t>]) -> Option<Var<'t>> {
    let [a, b] = args else { return None };
    let is = |v: &Var<'_>, c: f64| v.tape.is_none() && v.value == c;
    match op {
        Op::Mul if is(b, 1.0) => Some(*a),
        Op::Mul if is(a, 1.0) => Some(*b),
        Op::Mul if (is(b, 0.0) && a.value.is_finite()) || (is(a, 0.0) && b.value.is_finite()) => {
            Some(Var::constant(0.0))
        }
        Op::Add if is(b, 0.0) => Some(*a),
        Op::Add if is(a, 0.0) => Some(*b),
        Op::Sub if is(b, 0.0) => Some(*a),
        Op::Div if is(b, 1.0) => Some(*a),
        _ => None,
    }
}

fn domain_violation(op: Op, mut args: impl Iterator<Item = f64>) -> Option<f64> {
    match op {
        Op::Ln | Op::Sqrt => args.next().filter(|x| !(*x > 0.0)),
        _ => None,
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp value and softmax weights.
fn log_sum_exp_kernel(xs: &[f64]) -> (f64, SmallVec<[f64; 2]>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (m, xs.iter().map(|_| 0.0).collect());
    }
    if m == f64::INFINITY {
        let v = if xs.iter().any(|x| x.is_nan()) {
            f64::NAN
        } else {
            m
        };
        return (v, xs.iter().map(|_| 0.0).collect());
    }
    let mut s = 0.0;
    let exps: SmallVec<[f64; 2]> = xs
        .iter()
        .map(|&x| {
            let e = (x - m).exp();
            s += e;
            e
        })
        .collect();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

fn eval(op: Op, x: &[f64]) -> (f64, SmallVec<[f64; 2]>) {
    use smallvec::smallvec;
    match op {
        Op::Leaf | Op::Fused => unreachable!("leaves and fused nodes are not evaluated"),
        Op::Add => (x[0] + x[1], smallvec![1.0, 1.0]),
        Op::Sub => (x[0] - x[1], smallvec![1.0, -1.0]),
        Op::Mul => (x[0] * x[1], smallvec![x[1], x[0]]),
        Op::Div => {
            let q = x[0] / x[1];
            (q, smallvec![1.0 / x[1], -q / x[1]])
        }
        Op::Neg => (-x[0], smallvec![-1.0]),
        Op::Exp => {
            let e = x[0].exp();
            (e, smallvec![e])
        }
        Op::Ln => (x[0].ln(), smallvec![1.0 / x[0]]),
        Op::Sqrt => {
            let s = x[0].sqrt();
            (s, smallvec![0.5 / s])
        }
        Op::Tanh => {
            let t = x[0].tanh();
            (t, smallvec![1.0 - t * t])
        }
        Op::Sigmoid => {
            let s = sigmoid(x[0]);
            (s, smallvec![s * (1.0 - s)])
        }
        Op::Softplus => (softplus(x[0]), smallvec![sigmoid(x[0])]),
        Op::Square => (x[0] * x[0], smallvec![2.0 * x[0]]),
        Op::Powf(p) => (x[0].powf(p), smallvec![p * x[0].powf(p - 1.0)]),
        Op::LogSumExp => log_sum_exp_kernel(x),
        Op::Sum => (x.iter().sum(), x.iter().map(|_| 1.0).collect()),
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                apply($op, &[self, rhs])
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                apply($op, &[self, Var::constant(rhs)])
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                apply($op, &[Var::constant(self), rhs])
            }
        }
    };
}

binary_op!(Add, add, Op::Add);
binary_op!(Sub, sub, Op::Sub);
binary_op!(Mul, mul, Op::Mul);
binary_op!(Div, div, Op::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        apply(Op::Neg, &[self])
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Var<'t>) {
        *self = *self + rhs;
    }
}

impl<'t> SubAssign for Var<'t> {
    fn sub_assign(&mut self, rhs: Var<'t>) {
        *self = *self - rhs;
    }
}

/// Scalar arithmetic shared by plain evaluation (`f64`) and recorded
/// evaluation ([`Var`]).
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
{
    fn cst(value: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn square(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn stop_gradient(self) -> Self;
    /// `log Σ exp(x_i)`, finite for large positive or negative inputs.
    /// Empty input gives `-∞`.
    fn log_sum_exp(xs: &[Self]) -> Self;
    fn sum(xs: &[Self]) -> Self;
    /// A scalar whose value and partial derivatives with respect to `parts`
    /// were computed externally.
    fn fused(value: f64, parts: &[(Self, f64)]) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// `log σ(x)` computed as `-softplus(-x)`.
    fn log_sigmoid(self) -> Self {
        -(-self).softplus()
    }
}

impl Real for f64 {
    fn cst(value: f64) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn stop_gradient(self) -> Self {
        self
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        log_sum_exp_kernel(xs).0
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn fused(value: f64, _parts: &[(Self, f64)]) -> Self {
        value
    }
}

impl<'t> Real for Var<'t> {
    fn cst(value: f64) -> Self {
        Var::constant(value)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        apply(Op::Exp, &[self])
    }
    fn ln(self) -> Self {
        apply(Op::Ln, &[self])
    }
    fn sqrt(self) -> Self {
        apply(Op::Sqrt, &[self])
    }
    fn tanh(self) -> Self {
        apply(Op::Tanh, &[self])
    }
    fn sigmoid(self) -> Self {
        apply(Op::Sigmoid, &[self])
    }
    fn softplus(self) -> Self {
        apply(Op::Softplus, &[self])
    }
    fn square(self) -> Self {
        apply(Op::Square, &[self])
    }
    fn powf(self, p: f64) -> Self {
        apply(Op::Powf(p), &[self])
    }
    fn stop_gradient(self) -> Self {
        Var::stop_gradient(self)
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        if xs.is_empty() {
            return Var::constant(f64::NEG_INFINITY);
        }
        apply(Op::LogSumExp, xs)
    }
    fn sum(xs: &[Self]) -> Self {
        if xs.is_empty() {
            return Var::constant(0.0);
        }
        apply(Op::Sum, xs)
    }
    fn fused(value: f64, parts: &[(Self, f64)]) -> Self {
        match parts.iter().find_map(|(v, _)| v.tape) {
            Some(tape) => tape.push_fused(value, parts),
            None => Var::constant(value),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn log_of_one() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let y = tape.record(Op::Ln, &[x]).unwrap();
        assert_eq!(y.value(), 0.0);
        assert_eq!(tape.backward(y, &[x]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = tape.record(Op::Softplus, &[x]).unwrap();
        assert_relative_eq!(y.value(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(tape.backward(y, &[x]).unwrap(), vec![0.5]);
    }

    #[test]
    fn log_sum_exp_of_identical_inputs() {
        let tape = Tape::new();
        let a = tape.var(2.0);
        let y = tape.record(Op::LogSumExp, &[a, a, a]).unwrap();
        assert_relative_eq!(y.value(), 2.0 + 3f64.ln(), epsilon = 1e-15);
        // three uses of the same leaf, each with softmax weight 1/3
        assert_relative_eq!(tape.backward(y, &[a]).unwrap()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let v = f64::log_sum_exp(&[1000.0, -1000.0]);
        assert!(v.is_finite());
        assert_eq!(v, 1000.0);
        let tape = Tape::new();
        let xs = [tape.var(1000.0), tape.var(-1000.0)];
        let y = Var::log_sum_exp(&xs);
        assert_eq!(y.value(), 1000.0);
        let g = tape.backward(y, &xs).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_all_negative_infinity() {
        let tape = Tape::new();
        let xs = [tape.var(f64::NEG_INFINITY), tape.var(f64::NEG_INFINITY)];
        let y = Var::log_sum_exp(&xs);
        assert_eq!(y.value(), f64::NEG_INFINITY);
        assert_eq!(tape.backward(y, &xs).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        assert_eq!(tape.backward(y, &[x]).unwrap(), vec![6.0]);
    }

    #[test]
    fn product_plus_log() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(1.0);
        let f = x * y + y.ln();
        assert_eq!(tape.backward(f, &[x, y]).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn stop_gradient_cuts_flow() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let f = x.stop_gradient() * x;
        assert_eq!(f.value(), 4.0);
        assert_eq!(tape.backward(f, &[x]).unwrap(), vec![2.0]);

        let g = (x * x + x.exp()).stop_gradient();
        assert_eq!(tape.backward(g, &[x]).unwrap(), vec![0.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let unused = tape.var(5.0);
        let f = x.exp();
        assert_eq!(tape.backward(f, &[unused]).unwrap(), vec![0.0]);
    }

    #[test]
    fn constants_contribute_nothing() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let c = Var::constant(4.0);
        let f = x * c + c.exp();
        let grads = tape.gradient(f).unwrap();
        assert_eq!(grads.wrt(x), 4.0);
        assert_eq!(grads.wrt(c), 0.0);
    }

    #[test]
    fn domain_errors_report_node() {
        let tape = Tape::new();
        let _ = tape.var(1.0);
        let x = tape.var(-1.0);
        let err = tape.record(Op::Ln, &[x]).unwrap_err();
        assert_eq!(
            err,
            AdError::Domain {
                op: Op::Ln,
                node: 2,
                value: -1.0
            }
        );
        let z = tape.var(0.0);
        assert!(matches!(
            tape.record(Op::Sqrt, &[z]),
            Err(AdError::Domain { op: Op::Sqrt, .. })
        ));
        // the lenient path records the violation instead
        let _ = x.ln();
        assert_eq!(tape.domain_violation().unwrap().op, Op::Ln);
    }

    #[test]
    fn arity_is_checked() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        assert!(matches!(
            tape.record(Op::Add, &[x]),
            Err(AdError::Arity { .. })
        ));
    }

    #[test]
    fn foreign_output_is_a_usage_error() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.var(1.0);
        assert_eq!(a.gradient(x.exp()).unwrap_err(), AdError::ForeignVar);
        let y = a.var(1.0);
        assert_eq!(a.record(Op::Add, &[y, x]).unwrap_err(), AdError::ForeignVar);
    }

    #[test]
    fn fused_node_uses_supplied_partials() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(3.0);
        // f = x^2 y, supplied directly
        let f = Var::fused(12.0, &[(x, 12.0), (y, 4.0)]);
        let g = f * 2.0;
        assert_eq!(tape.backward(g, &[x, y]).unwrap(), vec![24.0, 8.0]);
    }

    #[test]
    fn f64_and_tape_values_agree() {
        let tape = Tape::new();
        let xv = 0.37;
        let x = tape.var(xv);
        let via_tape = ((x * 3.0).softplus() + x.sigmoid().ln() - (x / 7.0).tanh()).exp();
        let plain = ((xv * 3.0).softplus() + Real::ln(xv.sigmoid()) - Real::tanh(xv / 7.0)).exp();
        assert_eq!(via_tape.value().to_bits(), plain.to_bits());
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn check_unary(op: Op, x: f64) {
        let tape = Tape::new();
        let v = tape.var(x);
        let y = tape.record(op, &[v]).unwrap();
        let g = tape.backward(y, &[v]).unwrap()[0];
        let f = |z: f64| eval(op, &[z]).0;
        let h = 1e-6 * x.abs().max(1.0);
        let numeric = fd(f, x, h);
        let scale = g.abs().max(numeric.abs()).max(1e-3);
        assert!(
            (g - numeric).abs() / scale < 1e-6,
            "{op:?} at {x}: tape {g}, fd {numeric}"
        );
    }

    proptest! {
        #[test]
        fn unary_partials_match_finite_differences(x in -4.0f64..4.0, p in 0.5f64..3.0) {
            for op in [Op::Exp, Op::Tanh, Op::Sigmoid, Op::Softplus, Op::Square, Op::Neg] {
                check_unary(op, x);
            }
            let pos = x.abs() + 0.1;
            for op in [Op::Ln, Op::Sqrt, Op::Powf(p)] {
                check_unary(op, pos);
            }
        }

        #[test]
        fn binary_partials_match_finite_differences(a in -3.0f64..3.0, b in 0.2f64..3.0) {
            for op in [Op::Add, Op::Sub, Op::Mul, Op::Div] {
                let tape = Tape::new();
                let x = tape.var(a);
                let y = tape.var(b);
                let out = tape.record(op, &[x, y]).unwrap();
                let g = tape.backward(out, &[x, y]).unwrap();
                let h = 1e-6;
                let ga = fd(|z| eval(op, &[z, b]).0, a, h);
                let gb = fd(|z| eval(op, &[a, z]).0, b, h);
                prop_assert!((g[0] - ga).abs() <= 1e-6 * ga.abs().max(1.0));
                prop_assert!((g[1] - gb).abs() <= 1e-6 * gb.abs().max(1.0));
            }
        }

        #[test]
        fn log_sum_exp_partials_match_finite_differences(xs in proptest::collection::vec(-5.0f64..5.0, 1..6)) {
            let tape = Tape::new();
            let vars = tape.vars(&xs);
            let out = Var::log_sum_exp(&vars);
            let g = tape.backward(out, &vars).unwrap();
            for i in 0..xs.len() {
                let f = |z: f64| {
                    let mut v = xs.clone();
                    v[i] = z;
                    f64::log_sum_exp(&v)
                };
                let numeric = fd(f, xs[i], 1e-6);
                prop_assert!((g[i] - numeric).abs() <= 1e-6 * numeric.abs().max(1e-3) + 1e-9);
            }
        }

        #[test]
        fn adjoints_are_linear(a in -2.0f64..2.0, b in 0.1f64..2.0) {
            let tape = Tape::new();
            let x = tape.var(a);
            let y = tape.var(b);
            let f1 = x.exp() * y;
            let f2 = (x * y).tanh() + y.ln();
            let g1 = tape.backward(f1, &[x, y]).unwrap();
            let g2 = tape.backward(f2, &[x, y]).unwrap();
            let g12 = tape.backward(f1 + f2, &[x, y]).unwrap();
            for i in 0..2 {
                prop_assert!((g12[i] - (g1[i] + g2[i])).abs() <= 1e-12 * (1.0 + g12[i].abs()));
            }
        }

        #[test]
        fn replay_reproduces_values(a in -2.0f64..2.0, b in 0.1f64..2.0) {
            let tape = Tape::new();
            let x = tape.var(a);
            let y = tape.var(b);
            let z = Var::log_sum_exp(&[x * y, (x - 1.0).softplus(), y.sqrt()]);
            let _ = (z / y).powf(2.0).sigmoid() + Var::sum(&[x, y, z]);
            prop_assert!(tape.is_topologically_ordered());
            let replayed = tape.replay();
            let stored = tape.values();
            prop_assert_eq!(replayed.len(), stored.len());
            for (r, s) in replayed.iter().zip(&stored) {
                prop_assert_eq!(r.to_bits(), s.to_bits());
            }
        }
    }
}
