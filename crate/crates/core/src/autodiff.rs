//! Reverse-mode automatic differentiation over a scalar expression tape.
//!
//! Every arithmetic operation on a [`Var`] appends a node to the owning
//! [`Tape`], recording its forward value together with the local partial
//! derivatives with respect to its parents. [`Tape::backward`] then sweeps
//! the node list in reverse and accumulates adjoints.
//!
//! ```
//! use recourse::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(y.value(), 9.0);
//! assert_eq!(grads.wrt(x), 6.0);
//! ```
//!
//! Domain violations (log of a non-positive number, division by zero) do not
//! panic. The first violation is recorded on the tape and reported by
//! [`Tape::backward`] and [`Tape::fault`].

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Kind of operation a tape node was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Powf,
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Indicator,
    Custom,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("domain violation in {op} at input {input}")]
    Domain { op: OpKind, input: f64 },
    #[error("tape contains custom nodes and cannot be replayed")]
    NotReplayable,
    #[error("replay expected {expected} leaf values, got {got}")]
    LeafCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    value: f64,
    /// For custom nodes `parents = [start, len]` into the side table.
    parents: [usize; 2],
    partials: [f64; 2],
    arity: u8,
    /// Exponent for `Powf`.
    aux: f64,
}

/// Append-only record of scalar operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    custom: RefCell<Vec<(usize, f64)>>,
    fault: Cell<Option<EvalError>>,
}

/// A scalar value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Derivative of the differentiated output with respect to `var`.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adjoints.get(var.index).copied().unwrap_or(0.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(nodes)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node. Requires that no `Var` of this tape is alive.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.custom.get_mut().clear();
        self.fault.set(None);
    }

    pub fn fault(&self) -> Option<EvalError> {
        self.fault.get()
    }

    /// Differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Node {
            kind: OpKind::Leaf,
            value,
            parents: [0; 2],
            partials: [0.0; 2],
            arity: 0,
            aux: 0.0,
        })
    }

    /// Constant input. Its reported gradient is always zero.
    pub fn lift(&self, value: f64) -> Var<'_> {
        self.push(Node {
            kind: OpKind::Constant,
            value,
            parents: [0; 2],
            partials: [0.0; 2],
            arity: 0,
            aux: 0.0,
        })
    }

    /// Records an externally evaluated function of `inputs` with the given
    /// value and partial derivatives.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: f64, partials: &[f64]) -> Var<'t> {
        assert_eq!(inputs.len(), partials.len(), "one partial per input");
        let start = {
            let mut side = self.custom.borrow_mut();
            let start = side.len();
            side.extend(inputs.iter().zip(partials).map(|(v, &p)| (v.index, p)));
            start
        };
        self.push(Node {
            kind: OpKind::Custom,
            value,
            parents: [start, inputs.len()],
            partials: [0.0; 2],
            arity: 0,
            aux: 0.0,
        })
    }

    pub fn sum<'t>(&'t self, terms: &[Var<'t>]) -> Var<'t> {
        let mut iter = terms.iter().copied();
        match iter.next() {
            Some(first) => iter.fold(first, |acc, t| acc + t),
            None => self.lift(0.0),
        }
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        let value = node.value;
        nodes.push(node);
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn flag(&self, op: OpKind, input: f64) {
        if self.fault.get().is_none() {
            self.fault.set(Some(EvalError::Domain { op, input }));
        }
    }

    fn unary(&self, kind: OpKind, a: Var<'_>, value: f64, partial: f64) -> Var<'_> {
        self.push(Node {
            kind,
            value,
            parents: [a.index, 0],
            partials: [partial, 0.0],
            arity: 1,
            aux: 0.0,
        })
    }

    fn binary(&self, kind: OpKind, a: Var<'_>, b: Var<'_>, value: f64, pa: f64, pb: f64) -> Var<'_> {
        self.push(Node {
            kind,
            value,
            parents: [a.index, b.index],
            partials: [pa, pb],
            arity: 2,
            aux: 0.0,
        })
    }

    /// Reverse sweep from `output`. Nodes created after `output` are ignored.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, EvalError> {
        if let Some(err) = self.fault.get() {
            return Err(err);
        }
        let nodes = self.nodes.borrow();
        let custom = self.custom.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = &nodes[i];
            match node.kind {
                OpKind::Custom => {
                    let [start, len] = node.parents;
                    for &(p, d) in &custom[start..start + len] {
                        adjoints[p] += d * adj;
                    }
                }
                _ => {
                    for k in 0..node.arity as usize {
                        adjoints[node.parents[k]] += node.partials[k] * adj;
                    }
                }
            }
        }
        for (adj, node) in adjoints.iter_mut().zip(nodes.iter()) {
            if node.kind == OpKind::Constant {
                *adj = 0.0;
            }
        }
        Ok(Gradients { adjoints })
    }

    /// Recomputes every node from new leaf values, given in creation order
    /// of the `var` leaves. Constants keep their recorded values.
    pub fn replay(&self, leaf_values: &[f64]) -> Result<(), EvalError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes.iter().any(|n| n.kind == OpKind::Custom) {
            return Err(EvalError::NotReplayable);
        }
        let leaves = nodes.iter().filter(|n| n.kind == OpKind::Leaf).count();
        if leaves != leaf_values.len() {
            return Err(EvalError::LeafCount {
                expected: leaves,
                got: leaf_values.len(),
            });
        }
        self.fault.set(None);
        let mut next_leaf = leaf_values.iter();
        for i in 0..nodes.len() {
            let node = nodes[i];
            let a = nodes[node.parents[0]].value;
            let b = nodes[node.parents[1]].value;
            let (value, partials) = match node.kind {
                OpKind::Leaf => (*next_leaf.next().unwrap(), [0.0; 2]),
                OpKind::Constant => (node.value, [0.0; 2]),
                OpKind::Custom => unreachable!(),
                kind => match eval(kind, a, b, node.aux) {
                    Ok(r) => r,
                    Err(input) => {
                        self.flag(kind, input);
                        (f64::NAN, [0.0; 2])
                    }
                },
            };
            nodes[i].value = value;
            nodes[i].partials = partials;
        }
        Ok(())
    }

    /// Current forward value of `var` (reflects replays).
    pub fn value_of(&self, var: Var<'_>) -> f64 {
        self.nodes.borrow()[var.index].value
    }
}

/// Forward value and local partials of a non-leaf operation. On a domain
/// violation returns the offending input.
fn eval(kind: OpKind, a: f64, b: f64, aux: f64) -> Result<(f64, [f64; 2]), f64> {
    Ok(match kind {
        OpKind::Add => (a + b, [1.0, 1.0]),
        OpKind::Sub => (a - b, [1.0, -1.0]),
        OpKind::Mul => (a * b, [b, a]),
        OpKind::Div => {
            if b == 0.0 {
                return Err(b);
            }
            (a / b, [1.0 / b, -a / (b * b)])
        }
        OpKind::Neg => (-a, [-1.0, 0.0]),
        OpKind::Powf => {
            let integral = aux.fract() == 0.0;
            if (a < 0.0 && !integral) || (a == 0.0 && aux < 1.0) {
                return Err(a);
            }
            (a.powf(aux), [aux * a.powf(aux - 1.0), 0.0])
        }
        OpKind::Exp => {
            let e = a.exp();
            (e, [e, 0.0])
        }
        OpKind::Ln => {
            if a <= 0.0 {
                return Err(a);
            }
            (a.ln(), [1.0 / a, 0.0])
        }
        OpKind::Sigmoid => {
            let s = sigmoid(a);
            (s, [s * (1.0 - s), 0.0])
        }
        OpKind::Relu => {
            if a > 0.0 {
                (a, [1.0, 0.0])
            } else {
                (0.0, [0.0, 0.0])
            }
        }
        OpKind::Indicator => (if a > 0.0 { 1.0 } else { 0.0 }, [0.0, 0.0]),
        OpKind::Leaf | OpKind::Constant | OpKind::Custom => unreachable!("not an operation"),
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn apply(self, kind: OpKind, other: Option<Var<'t>>, aux: f64) -> Var<'t> {
        let b = other.map_or(0.0, |o| o.value);
        match eval(kind, self.value, b, aux) {
            Ok((value, [pa, pb])) => match other {
                Some(o) => self.tape.binary(kind, self, o, value, pa, pb),
                None => {
                    let mut v = self.tape.unary(kind, self, value, pa);
                    if kind == OpKind::Powf {
                        self.tape.nodes.borrow_mut()[v.index].aux = aux;
                        v.value = value;
                    }
                    v
                }
            },
            Err(input) => {
                self.tape.flag(kind, input);
                match other {
                    Some(o) => self.tape.binary(kind, self, o, f64::NAN, 0.0, 0.0),
                    None => self.tape.unary(kind, self, f64::NAN, 0.0),
                }
            }
        }
    }

    pub fn powf(self, exponent: f64) -> Var<'t> {
        self.apply(OpKind::Powf, None, exponent)
    }

    pub fn exp(self) -> Var<'t> {
        self.apply(OpKind::Exp, None, 0.0)
    }

    pub fn ln(self) -> Var<'t> {
        self.apply(OpKind::Ln, None, 0.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.apply(OpKind::Sigmoid, None, 0.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.apply(OpKind::Relu, None, 0.0)
    }

    /// `1{x > 0}` in the forward pass, zero derivative everywhere.
    pub fn indicator_stopgrad(self) -> Var<'t> {
        self.apply(OpKind::Indicator, None, 0.0)
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.apply($kind, Some(rhs), 0.0)
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let rhs = self.tape.lift(rhs);
                self.apply($kind, Some(rhs), 0.0)
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let lhs = rhs.tape.lift(self);
                lhs.apply($kind, Some(rhs), 0.0)
            }
        }
    };
}

var_binop!(Add, add, OpKind::Add);
var_binop!(Sub, sub, OpKind::Sub);
var_binop!(Mul, mul, OpKind::Mul);
var_binop!(Div, div, OpKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.apply(OpKind::Neg, None, 0.0)
    }
}

/// Scalar arithmetic shared by plain `f64` evaluation and taped evaluation,
/// so model equations can be written once.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    fn indicator_stopgrad(self) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn indicator_stopgrad(self) -> Self {
        if self > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn indicator_stopgrad(self) -> Self {
        Var::indicator_stopgrad(self)
    }
}
