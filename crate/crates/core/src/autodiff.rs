//! Minimal reverse-mode automatic differentiation over scalars.
//!
//! A [`Tape`] records every operation with its local partial derivatives.
//! Nodes may have any number of parents, so an affine neuron `b + Σ wᵢxᵢ` is a
//! single node instead of `2n` binary ones. [`Tape::gradient`] sweeps the tape
//! once in reverse.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Node {
    start: u32,
    end: u32,
}

#[derive(Debug, Default)]
struct Inner<F> {
    nodes: Vec<Node>,
    values: Vec<F>,
    parents: Vec<u32>,
    partials: Vec<F>,
}

#[derive(Debug)]
pub struct Tape<F> {
    inner: RefCell<Inner<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    idx: u32,
    val: F,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                values: Vec::new(),
                parents: Vec::new(),
                partials: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push<I>(&self, val: F, edges: I) -> Var<'_, F>
    where
        I: IntoIterator<Item = (u32, F)>,
    {
        let mut inner = self.inner.borrow_mut();
        let start = inner.parents.len() as u32;
        for (p, d) in edges {
            inner.parents.push(p);
            inner.partials.push(d);
        }
        let end = inner.parents.len() as u32;
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node { start, end });
        inner.values.push(val);
        Var { tape: self, idx, val }
    }

    /// Leaf variable (an input to differentiate with respect to).
    pub fn var(&self, val: F) -> Var<'_, F> {
        self.push(val, std::iter::empty())
    }

    pub fn constant(&self, val: F) -> Var<'_, F> {
        self.var(val)
    }

    /// `Σ cᵢ vᵢ`.
    pub fn linear_comb<'t>(&'t self, terms: &[(Var<'t, F>, F)]) -> Var<'t, F> {
        let val = terms.iter().fold(F::zero(), |acc, (v, c)| acc + v.val * *c);
        self.push(val, terms.iter().map(|(v, c)| (v.idx, *c)))
    }

    pub fn sum<'t>(&'t self, vars: &[Var<'t, F>]) -> Var<'t, F> {
        let val = vars.iter().fold(F::zero(), |acc, v| acc + v.val);
        self.push(val, vars.iter().map(|v| (v.idx, F::one())))
    }

    /// `b + Σ wᵢ xᵢ` with variable weights and constant inputs.
    pub fn affine_const<'t>(&'t self, bias: Var<'t, F>, weights: &[Var<'t, F>], inputs: &[F]) -> Var<'t, F> {
        debug_assert_eq!(weights.len(), inputs.len());
        let val = weights
            .iter()
            .zip(inputs)
            .fold(bias.val, |acc, (w, &x)| acc + w.val * x);
        let edges = std::iter::once((bias.idx, F::one())).chain(
            weights
                .iter()
                .zip(inputs)
                .filter(|(_, &x)| x != F::zero())
                .map(|(w, &x)| (w.idx, x)),
        );
        self.push(val, edges)
    }

    /// `b + Σ wᵢ xᵢ` with variable weights and variable inputs.
    pub fn affine<'t>(&'t self, bias: Var<'t, F>, weights: &[Var<'t, F>], inputs: &[Var<'t, F>]) -> Var<'t, F> {
        debug_assert_eq!(weights.len(), inputs.len());
        let val = weights
            .iter()
            .zip(inputs)
            .fold(bias.val, |acc, (w, x)| acc + w.val * x.val);
        let edges = std::iter::once((bias.idx, F::one())).chain(
            weights
                .iter()
                .zip(inputs)
                .flat_map(|(w, x)| [(w.idx, x.val), (x.idx, w.val)]),
        );
        self.push(val, edges)
    }

    /// Adjoints `∂output/∂node` for every node on the tape.
    pub fn gradient(&self, output: Var<'_, F>) -> Vec<F> {
        let inner = self.inner.borrow();
        let mut adj = vec![F::zero(); inner.nodes.len()];
        adj[output.idx as usize] = F::one();
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == F::zero() {
                continue;
            }
            let node = inner.nodes[i];
            for e in node.start as usize..node.end as usize {
                adj[inner.parents[e] as usize] += a * inner.partials[e];
            }
        }
        adj
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn value(&self) -> F {
        self.val
    }

    pub fn index(&self) -> usize {
        self.idx as usize
    }

    fn unary(self, val: F, d: F) -> Self {
        self.tape.push(val, [(self.idx, d)])
    }

    pub fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Self {
        self.unary(self.val.ln(), self.val.recip())
    }

    pub fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), (F::one() + self.val).recip())
    }

    /// Subgradient 0 at the kink.
    pub fn abs(self) -> Self {
        let d = if self.val > F::zero() {
            F::one()
        } else if self.val < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        self.unary(self.val.abs(), d)
    }

    pub fn relu(self) -> Self {
        if self.val > F::zero() {
            self.unary(self.val, F::one())
        } else {
            self.unary(F::zero(), F::zero())
        }
    }

    /// `log(1 + eˣ)` evaluated as `max(x, 0) + log1p(e^{−|x|})`; derivative is the
    /// logistic function.
    pub fn softplus(self) -> Self {
        self.unary(softplus(self.val), sigmoid(self.val))
    }

    /// Clamp with zero derivative outside `[lo, hi]`.
    pub fn clamp(self, lo: F, hi: F) -> Self {
        if self.val < lo {
            self.unary(lo, F::zero())
        } else if self.val > hi {
            self.unary(hi, F::zero())
        } else {
            self.unary(self.val, F::one())
        }
    }

    pub fn powi(self, n: i32) -> Self {
        let d = F::from_i32(n).expect("small integer") * self.val.powi(n - 1);
        self.unary(self.val.powi(n), d)
    }

    pub fn scale(self, c: F) -> Self {
        self.unary(self.val * c, c)
    }
}

pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<'t, F: Scalar> Add for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, rhs: Self) -> Self {
        self.tape
            .push(self.val + rhs.val, [(self.idx, F::one()), (rhs.idx, F::one())])
    }
}

impl<'t, F: Scalar> Sub for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, rhs: Self) -> Self {
        self.tape
            .push(self.val - rhs.val, [(self.idx, F::one()), (rhs.idx, -F::one())])
    }
}

impl<'t, F: Scalar> Mul for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .push(self.val * rhs.val, [(self.idx, rhs.val), (rhs.idx, self.val)])
    }
}

impl<'t, F: Scalar> Neg for Var<'t, F> {
    type Output = Var<'t, F>;
    fn neg(self) -> Self {
        self.unary(-self.val, -F::one())
    }
}

impl<'t, F: Scalar> Add<F> for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, rhs: F) -> Self {
        self.unary(self.val + rhs, F::one())
    }
}

impl<'t, F: Scalar> Sub<F> for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, rhs: F) -> Self {
        self.unary(self.val - rhs, F::one())
    }
}

impl<'t, F: Scalar> Mul<F> for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, rhs: F) -> Self {
        self.scale(rhs)
    }
}
