//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every [`Var`] is a `Copy` handle holding its primal value and the index of
//! the node that produced it. Constants carry no tape reference and never
//! allocate a node, so generic code written against [`Real`] can mix literals
//! and variables freely. Each node records at most two parents together with
//! the local partial derivatives, which is enough for every primitive used in
//! this crate (matrix routines decompose into scalar operations).
//!
//! ```
//! use bvsmooth::autodiff::value_and_grad;
//!
//! let (v, g) = value_and_grad(&[3.0], |x| Ok(x[0] * x[0])).unwrap();
//! assert_eq!(v, 9.0);
//! assert_eq!(g, vec![6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::scalar::Real;

const NONE: u32 = u32::MAX;

/// Primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
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
    Cos,
    Sin,
    Softplus,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: OpKind,
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            op: OpKind::Leaf,
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op kind of the node at `idx`.
    pub fn op(&self, idx: usize) -> OpKind {
        self.nodes.borrow()[idx].op
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Adjoints of every node with respect to `output`.
    pub fn backward(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for p in 0..2 {
                let parent = node.parents[p];
                if parent != NONE {
                    adj[parent as usize] += a * node.partials[p];
                }
            }
        }
        adj
    }
}

/// A scalar recorded on a [`Tape`], or a constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var({}#{})", self.val, self.idx),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val,
        }
    }

    /// Tape index, or `None` for constants.
    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn unary(self, op: OpKind, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.push(Node {
                    op,
                    parents: [self.idx, NONE],
                    partials: [d, 0.0],
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn binary(self, other: Self, op: OpKind, val: f64, da: f64, db: f64) -> Self {
        let tape = match (self.tape, other.tape) {
            (None, None) => return Var::constant(val),
            (Some(a), Some(b)) => {
                debug_assert!(std::ptr::eq(a, b), "variables from different tapes");
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
        };
        let pa = if self.tape.is_some() { self.idx } else { NONE };
        let pb = if other.tape.is_some() {
            other.idx
        } else {
            NONE
        };
        let idx = tape.push(Node {
            op,
            parents: [pa, pb],
            partials: [da, db],
        });
        Var {
            tape: Some(tape),
            idx,
            val,
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, OpKind::Add, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, OpKind::Sub, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, OpKind::Mul, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, OpKind::Div, q, 1.0 / o.val, -q / o.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(OpKind::Neg, -self.val, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(OpKind::Add, self.val + c, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(OpKind::Sub, self.val - c, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(OpKind::Mul, self.val * c, c)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(OpKind::Div, self.val / c, 1.0 / c)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Var<'_> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Var<'_> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Real for Var<'_> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(OpKind::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(OpKind::Ln, self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(OpKind::Sqrt, s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(OpKind::Tanh, t, 1.0 - t * t)
    }

    fn cos(self) -> Self {
        self.unary(OpKind::Cos, self.val.cos(), -self.val.sin())
    }

    fn sin(self) -> Self {
        self.unary(OpKind::Sin, self.val.sin(), self.val.cos())
    }

    fn softplus(self) -> Self {
        let v = Real::softplus(self.val);
        self.unary(OpKind::Softplus, v, Real::sigmoid(self.val))
    }

    fn sigmoid(self) -> Self {
        let s = Real::sigmoid(self.val);
        self.unary(OpKind::Sigmoid, s, s * (1.0 - s))
    }

    fn ln_1p(self) -> Self {
        self.unary(OpKind::Ln, self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
}

/// Evaluates `f` on a fresh tape seeded with `params` and returns the value
/// together with its gradient.
///
/// Fails with [`Error::NonFiniteValue`] when the value or any gradient
/// coordinate is not finite, which is how divergence surfaces during training.
pub fn value_and_grad<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::with_capacity(4 * params.len() + 1024);
    let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let out = f(&vars)?;
    let value = out.value();
    if !value.is_finite() {
        return Err(Error::NonFiniteValue(format!("objective = {value}")));
    }
    let adj = tape.backward(out);
    let grad: Vec<f64> = vars.iter().map(|v| adj[v.idx as usize]).collect();
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteValue(format!("gradient coordinate {i}")));
    }
    Ok((value, grad))
}

/// Central finite-difference gradient of a plain `f64` function.
pub fn finite_difference_grad<F>(params: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x)?;
        x[i] = orig - step;
        let fm = f(&x)?;
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}
