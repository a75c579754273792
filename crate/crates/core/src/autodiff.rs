//! Reverse-mode differentiation over scalar expressions.
//!
//! A [`Tape`] records every primitive application as a [`ScalarNode`] with its
//! value computed eagerly and its local partial derivatives stored next to
//! it. [`Tape::backward`] sweeps the tape once in reverse and accumulates
//! adjoints into a [`Gradients`] map keyed by parameter registration order.
//!
//! Model code is written once against the [`Graph`] trait and runs either on
//! plain `f64` values ([`Eval`]) or on the tape. Both routes share the same
//! arithmetic, which is what lets [`finite_difference_check`] compare an
//! analytic gradient against central differences of the very same function.

use thiserror::Error;

/// Denominators with magnitude at or below this are treated as zero.
pub const DIVIDING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("division by near-zero denominator {0:e}")]
    DivisionNearZero(f64),
    #[error("non-finite value produced by {0:?}")]
    NonFiniteValue(OpKind),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("node {0} does not exist on this tape")]
    UnknownNode(u32),
}

/// Primitive recorded by a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Max,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Sigmoid,
    PowI(i32),
    /// Routes one value to a new position of a permutation (used by sorting).
    Select,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn id(self) -> u32 {
        self.0
    }
}

/// Index of a parameter in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamHandle(pub usize);

/// A primitive application over existing nodes, as accepted by [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Constant(f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Max(Var, Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Sigmoid(Var),
    PowI(Var, i32),
    Select(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNode {
    pub value: f64,
    pub op: OpKind,
    parents: [u32; 2],
    partials: [f64; 2],
    arity: u8,
}

impl ScalarNode {
    /// `(parent id, local partial)` pairs.
    pub fn parents(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.parents[..self.arity as usize]
            .iter()
            .copied()
            .zip(self.partials[..self.arity as usize].iter().copied())
    }
}

/// Parameter gradients indexed by [`ParamHandle`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, handle: ParamHandle) -> f64 {
        self.values[handle.0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only record of a scalar computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<ScalarNode>,
    params: Vec<u32>,
    fault: Option<AutodiffError>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            ..Self::default()
        }
    }

    /// Drops all nodes but keeps the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.fault = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ScalarNode] {
        &self.nodes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// First error raised through the infallible [`Graph`] interface, if any.
    pub fn fault(&self) -> Option<&AutodiffError> {
        self.fault.as_ref()
    }

    /// Registers a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: f64) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(ScalarNode {
            value,
            op: OpKind::Parameter,
            parents: [0; 2],
            partials: [0.0; 2],
            arity: 0,
        });
        self.params.push(id);
        Var(id)
    }

    pub fn handle(&self, var: Var) -> Option<ParamHandle> {
        self.params.binary_search(&var.0).ok().map(ParamHandle)
    }

    pub fn value_of(&self, var: Var) -> f64 {
        self.nodes[var.0 as usize].value
    }

    fn check(&self, v: Var) -> Result<(f64, u32), AutodiffError> {
        self.nodes
            .get(v.0 as usize)
            .map(|n| (n.value, v.0))
            .ok_or(AutodiffError::UnknownNode(v.0))
    }

    fn push(
        &mut self,
        op: OpKind,
        value: f64,
        parents: &[(u32, f64)],
    ) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue(op));
        }
        let mut node = ScalarNode {
            value,
            op,
            parents: [0; 2],
            partials: [0.0; 2],
            arity: parents.len() as u8,
        };
        for (slot, &(id, d)) in parents.iter().enumerate() {
            node.parents[slot] = id;
            node.partials[slot] = d;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        Ok(Var(id))
    }

    /// Records one primitive, computing its value and local partials.
    pub fn record(&mut self, prim: Primitive) -> Result<Var, AutodiffError> {
        use Primitive as P;
        match prim {
            P::Constant(v) => self.push(OpKind::Constant, v, &[]),
            P::Add(a, b) => {
                let ((x, ia), (y, ib)) = (self.check(a)?, self.check(b)?);
                self.push(OpKind::Add, x + y, &[(ia, 1.0), (ib, 1.0)])
            }
            P::Sub(a, b) => {
                let ((x, ia), (y, ib)) = (self.check(a)?, self.check(b)?);
                self.push(OpKind::Sub, x - y, &[(ia, 1.0), (ib, -1.0)])
            }
            P::Mul(a, b) => {
                let ((x, ia), (y, ib)) = (self.check(a)?, self.check(b)?);
                self.push(OpKind::Mul, x * y, &[(ia, y), (ib, x)])
            }
            P::Div(a, b) => {
                let ((x, ia), (y, ib)) = (self.check(a)?, self.check(b)?);
                if y.abs() <= DIVIDING_FLOOR {
                    return Err(AutodiffError::DivisionNearZero(y));
                }
                let q = x / y;
                self.push(OpKind::Div, q, &[(ia, 1.0 / y), (ib, -q / y)])
            }
            P::Neg(a) => {
                let (x, ia) = self.check(a)?;
                self.push(OpKind::Neg, -x, &[(ia, -1.0)])
            }
            P::Max(a, b) => {
                let ((x, ia), (y, ib)) = (self.check(a)?, self.check(b)?);
                // ties take the first argument's branch
                if x >= y {
                    self.push(OpKind::Max, x, &[(ia, 1.0), (ib, 0.0)])
                } else {
                    self.push(OpKind::Max, y, &[(ia, 0.0), (ib, 1.0)])
                }
            }
            P::Exp(a) => {
                let (x, ia) = self.check(a)?;
                let e = x.exp();
                self.push(OpKind::Exp, e, &[(ia, e)])
            }
            P::Ln(a) => {
                let (x, ia) = self.check(a)?;
                self.push(OpKind::Ln, x.ln(), &[(ia, 1.0 / x)])
            }
            P::Sin(a) => {
                let (x, ia) = self.check(a)?;
                self.push(OpKind::Sin, x.sin(), &[(ia, x.cos())])
            }
            P::Cos(a) => {
                let (x, ia) = self.check(a)?;
                self.push(OpKind::Cos, x.cos(), &[(ia, -x.sin())])
            }
            P::Sqrt(a) => {
                let (x, ia) = self.check(a)?;
                let r = x.sqrt();
                self.push(OpKind::Sqrt, r, &[(ia, 0.5 / r)])
            }
            P::Sigmoid(a) => {
                let (x, ia) = self.check(a)?;
                let s = sigmoid(x);
                self.push(OpKind::Sigmoid, s, &[(ia, s * (1.0 - s))])
            }
            P::PowI(a, n) => {
                let (x, ia) = self.check(a)?;
                let d = if n == 0 {
                    0.0
                } else {
                    n as f64 * x.powi(n - 1)
                };
                self.push(OpKind::PowI(n), x.powi(n), &[(ia, d)])
            }
            P::Select(a) => {
                let (x, ia) = self.check(a)?;
                self.push(OpKind::Select, x, &[(ia, 1.0)])
            }
        }
    }

    /// Records through the infallible interface: the first error is latched
    /// and a NaN placeholder constant is returned.
    fn latch(&mut self, prim: Primitive) -> Var {
        match self.record(prim) {
            Ok(v) => v,
            Err(e) => {
                if self.fault.is_none() {
                    self.fault = Some(e);
                }
                let id = self.nodes.len() as u32;
                self.nodes.push(ScalarNode {
                    value: f64::NAN,
                    op: OpKind::Constant,
                    parents: [0; 2],
                    partials: [0.0; 2],
                    arity: 0,
                });
                Var(id)
            }
        }
    }

    /// Adjoint of every node with respect to `root`. The buffer has one entry
    /// per node; entries after `root` are zero.
    pub fn adjoints(&self, root: Var) -> Result<Vec<f64>, AutodiffError> {
        let (root_value, root_id) = self.check(root)?;
        if let Some(e) = &self.fault {
            return Err(e.clone());
        }
        if !root_value.is_finite() {
            return Err(AutodiffError::NonFiniteValue(
                self.nodes[root_id as usize].op,
            ));
        }
        let mut adj = vec![0.0; self.nodes.len()];
        adj[root_id as usize] = 1.0;
        for i in (0..=root_id as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            for slot in 0..node.arity as usize {
                adj[node.parents[slot] as usize] += node.partials[slot] * a;
            }
        }
        Ok(adj)
    }

    /// Gradient of `root` with respect to every registered parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let adj = self.adjoints(root)?;
        let mut values = Vec::with_capacity(self.params.len());
        for (handle, &id) in self.params.iter().enumerate() {
            let g = adj[id as usize];
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(handle));
            }
            values.push(g);
        }
        Ok(Gradients { values })
    }

    /// Recomputes every node value from the leaves using the recorded ops.
    pub fn replay(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |slot: usize| out[node.parents[slot] as usize];
            let v = match node.op {
                OpKind::Constant | OpKind::Parameter => node.value,
                OpKind::Add => arg(0) + arg(1),
                OpKind::Sub => arg(0) - arg(1),
                OpKind::Mul => arg(0) * arg(1),
                OpKind::Div => arg(0) / arg(1),
                OpKind::Neg => -arg(0),
                OpKind::Max => {
                    let (x, y) = (arg(0), arg(1));
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
                OpKind::Exp => arg(0).exp(),
                OpKind::Ln => arg(0).ln(),
                OpKind::Sin => arg(0).sin(),
                OpKind::Cos => arg(0).cos(),
                OpKind::Sqrt => arg(0).sqrt(),
                OpKind::Sigmoid => sigmoid(arg(0)),
                OpKind::PowI(n) => arg(0).powi(n),
                OpKind::Select => arg(0),
            };
            out.push(v);
        }
        out
    }
}

/// Arithmetic backend shared by plain evaluation and the tape.
pub trait Graph {
    type T: Copy + std::fmt::Debug;

    fn constant(&mut self, v: f64) -> Self::T;
    fn value(&self, x: Self::T) -> f64;
    fn add(&mut self, a: Self::T, b: Self::T) -> Self::T;
    fn sub(&mut self, a: Self::T, b: Self::T) -> Self::T;
    fn mul(&mut self, a: Self::T, b: Self::T) -> Self::T;
    fn div(&mut self, a: Self::T, b: Self::T) -> Self::T;
    fn neg(&mut self, a: Self::T) -> Self::T;
    fn max(&mut self, a: Self::T, b: Self::T) -> Self::T;
    fn exp(&mut self, a: Self::T) -> Self::T;
    fn ln(&mut self, a: Self::T) -> Self::T;
    fn sin(&mut self, a: Self::T) -> Self::T;
    fn cos(&mut self, a: Self::T) -> Self::T;
    fn sqrt(&mut self, a: Self::T) -> Self::T;
    fn sigmoid(&mut self, a: Self::T) -> Self::T;
    fn powi(&mut self, a: Self::T, n: i32) -> Self::T;
    fn select(&mut self, a: Self::T) -> Self::T;

    /// `a / b`, or a zero constant when `|b| <= DIVIDING_FLOOR` (0/0 := 0).
    fn div_or_zero(&mut self, a: Self::T, b: Self::T) -> Self::T {
        if self.value(b).abs() <= DIVIDING_FLOOR {
            self.constant(0.0)
        } else {
            self.div(a, b)
        }
    }

    fn silu(&mut self, x: Self::T) -> Self::T {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    fn relu(&mut self, x: Self::T) -> Self::T {
        let zero = self.constant(0.0);
        self.max(x, zero)
    }

    fn mul_add(&mut self, a: Self::T, b: Self::T, acc: Self::T) -> Self::T {
        let p = self.mul(a, b);
        self.add(p, acc)
    }

    /// Left-to-right sum; zero constant for an empty slice.
    fn sum(&mut self, xs: &[Self::T]) -> Self::T {
        match xs.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Ascending sort; ties keep original index order. Gradients are routed
    /// back through the permutation.
    fn sort(&mut self, xs: &[Self::T]) -> Vec<Self::T> {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| self.value(xs[i]).total_cmp(&self.value(xs[j])));
        order.into_iter().map(|i| self.select(xs[i])).collect()
    }
}

/// Plain `f64` evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type T = f64;

    fn constant(&mut self, v: f64) -> f64 {
        v
    }
    fn value(&self, x: f64) -> f64 {
        x
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
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if a >= b {
            a
        } else {
            b
        }
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn cos(&mut self, a: f64) -> f64 {
        a.cos()
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
    fn sigmoid(&mut self, a: f64) -> f64 {
        sigmoid(a)
    }
    fn powi(&mut self, a: f64, n: i32) -> f64 {
        a.powi(n)
    }
    fn select(&mut self, a: f64) -> f64 {
        a
    }
}

impl Graph for Tape {
    type T = Var;

    fn constant(&mut self, v: f64) -> Var {
        self.latch(Primitive::Constant(v))
    }
    fn value(&self, x: Var) -> f64 {
        self.nodes[x.0 as usize].value
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.latch(Primitive::Add(a, b))
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.latch(Primitive::Sub(a, b))
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.latch(Primitive::Mul(a, b))
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        self.latch(Primitive::Div(a, b))
    }
    fn neg(&mut self, a: Var) -> Var {
        self.latch(Primitive::Neg(a))
    }
    fn max(&mut self, a: Var, b: Var) -> Var {
        self.latch(Primitive::Max(a, b))
    }
    fn exp(&mut self, a: Var) -> Var {
        self.latch(Primitive::Exp(a))
    }
    fn ln(&mut self, a: Var) -> Var {
        self.latch(Primitive::Ln(a))
    }
    fn sin(&mut self, a: Var) -> Var {
        self.latch(Primitive::Sin(a))
    }
    fn cos(&mut self, a: Var) -> Var {
        self.latch(Primitive::Cos(a))
    }
    fn sqrt(&mut self, a: Var) -> Var {
        self.latch(Primitive::Sqrt(a))
    }
    fn sigmoid(&mut self, a: Var) -> Var {
        self.latch(Primitive::Sigmoid(a))
    }
    fn powi(&mut self, a: Var, n: i32) -> Var {
        self.latch(Primitive::PowI(a, n))
    }
    fn select(&mut self, a: Var) -> Var {
        self.latch(Primitive::Select(a))
    }
}

/// A scalar function of a parameter vector, generic over the backend.
pub trait ScalarFunction {
    fn eval<G: Graph>(&self, g: &mut G, params: &[G::T]) -> G::T;
}

/// Value and gradient of `f` at `params` via the tape.
pub fn gradient<F: ScalarFunction>(
    f: &F,
    params: &[f64],
) -> Result<(f64, Vec<f64>), AutodiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|&p| tape.parameter(p)).collect();
    let root = f.eval(&mut tape, &vars);
    let grads = tape.backward(root)?;
    Ok((tape.value_of(root), grads.into_vec()))
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// parameters. Callers must keep `params` away from kinks of `f`.
pub fn finite_difference_check<F: ScalarFunction>(
    f: &F,
    params: &[f64],
    step: f64,
) -> Result<f64, AutodiffError> {
    let (_, analytic) = gradient(f, params)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = f.eval(&mut Eval, &probe);
        probe[i] = params[i] - step;
        let down = f.eval(&mut Eval, &probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFiniteValue(OpKind::Parameter));
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
