//! Scalar expression graphs with exact evaluation and differentiation.
//!
//! An [`Expr`] is an immutable, reference-counted node in a directed acyclic
//! graph of scalar operations. Differentiation is expression-to-expression:
//! [`Expr::differentiate`] rewrites a graph into the graph of its partial
//! derivative, built from the same closed set of node kinds. This closure is
//! what makes second input-derivatives of a network (`u_xx`) and parameter
//! gradients of derivative-containing losses both exact: the derivative of a
//! derivative is just another graph.
//!
//! Evaluation is memoized over shared subgraphs, so the semantics are those of
//! the unfolded tree while the cost is that of the DAG. Graphs are `Send` and
//! `Sync`; every evaluation carries its own workspace, so one graph may be
//! evaluated from many threads concurrently.
//!
//! Conventions:
//! - `abs` is not differentiable at 0. Its derivative is realized as the
//!   saturated sign `tanh(1e30 * x)`, which is exactly `-1`/`0`/`+1` for every
//!   representable input outside `(0, 2e-29)`, matching the subgradient-0
//!   convention at the kink while staying inside the closed kind set.
//! - Evaluation reports non-finite intermediates (overflow, 0/0, sqrt of a
//!   negative) as errors carrying the path to the offending node rather than
//!   silently returning NaN/Inf.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Scale used to realize `sign(x)` as `tanh(SIGN_SCALE * x)` in f64.
const SIGN_SCALE: f64 = 1e30;

/// Identifier of a free variable in an expression graph.
///
/// Ids are allocated process-wide so that independently constructed graphs
/// (e.g. two networks plus trainable constants) can be composed without
/// collisions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(u32);

static NEXT_VAR: AtomicU32 = AtomicU32::new(0);

impl VarId {
    /// Allocates a fresh, globally unique variable id.
    pub fn fresh() -> Self {
        VarId(NEXT_VAR.fetch_add(1, Ordering::Relaxed))
    }

    /// Allocates `n` fresh consecutive ids.
    pub fn fresh_block(n: usize) -> Vec<Self> {
        (0..n).map(|_| Self::fresh()).collect()
    }
}

impl fmt::Debug for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Tanh,
    Exp,
    Sqrt,
    Square,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Node {
    Const(f64),
    Var(VarId),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
}

/// Node kind selector for the generic [`Expr::construct`] entry point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExprKind {
    Constant(f64),
    Variable(VarId),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Exp,
    Sqrt,
    Square,
    Abs,
}

/// Errors raised while constructing expressions.
#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("{kind} expects {expected} operand(s), got {got}")]
    ArityMismatch {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("division by constant zero")]
    DivisionByZero,
}

/// Errors raised while evaluating expressions.
#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no value bound for variable {0:?}")]
    MissingVariable(VarId),
    #[error("non-finite value ({value}) at node path {path}")]
    NonFinite { value: f64, path: String },
}

/// Map from variable id to value, consumed by evaluation.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    values: HashMap<VarId, f64>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, var: VarId, value: f64) {
        self.values.insert(var, value);
    }

    /// Builder-style insertion.
    pub fn with(mut self, var: VarId, value: f64) -> Self {
        self.set(var, value);
        self
    }

    pub fn get(&self, var: VarId) -> Option<f64> {
        self.values.get(&var).copied()
    }
}

impl FromIterator<(VarId, f64)> for Binding {
    fn from_iter<T: IntoIterator<Item = (VarId, f64)>>(iter: T) -> Self {
        Binding {
            values: iter.into_iter().collect(),
        }
    }
}

/// A scalar expression: an immutable handle to a node in an acyclic graph.
///
/// Cloning is O(1) and shares the underlying node. Subgraphs may be shared
/// freely; evaluation and differentiation treat sharing as a cache, with
/// semantics defined on the unfolded tree.
#[derive(Clone)]
pub struct Expr {
    node: Arc<Node>,
}

impl Expr {
    fn wrap(node: Node) -> Self {
        Expr {
            node: Arc::new(node),
        }
    }

    /// Stable per-node key (pointer identity of the shared node).
    fn key(&self) -> usize {
        Arc::as_ptr(&self.node) as usize
    }

    pub fn constant(value: f64) -> Self {
        Self::wrap(Node::Const(value))
    }

    pub fn var(id: VarId) -> Self {
        Self::wrap(Node::Var(id))
    }

    /// Returns the constant payload if this node is a constant.
    pub fn as_constant(&self) -> Option<f64> {
        match &*self.node {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn is_const(&self, value: f64) -> bool {
        self.as_constant() == Some(value)
    }

    /// Generic constructor; checks operand arity and rejects division by a
    /// constant zero. Constant folding is applied where it preserves the
    /// value at every binding.
    pub fn construct(kind: ExprKind, operands: &[Expr]) -> Result<Expr, ExprError> {
        let arity = |kind: &'static str, n: usize| -> Result<(), ExprError> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(ExprError::ArityMismatch {
                    kind,
                    expected: n,
                    got: operands.len(),
                })
            }
        };
        match kind {
            ExprKind::Constant(c) => {
                arity("constant", 0)?;
                Ok(Expr::constant(c))
            }
            ExprKind::Variable(v) => {
                arity("variable", 0)?;
                Ok(Expr::var(v))
            }
            ExprKind::Add => {
                arity("add", 2)?;
                Ok(add(&operands[0], &operands[1]))
            }
            ExprKind::Sub => {
                arity("sub", 2)?;
                Ok(sub(&operands[0], &operands[1]))
            }
            ExprKind::Mul => {
                arity("mul", 2)?;
                Ok(mul(&operands[0], &operands[1]))
            }
            ExprKind::Div => {
                arity("div", 2)?;
                div(&operands[0], &operands[1])
            }
            ExprKind::Neg => {
                arity("neg", 1)?;
                Ok(neg(&operands[0]))
            }
            ExprKind::Tanh => {
                arity("tanh", 1)?;
                Ok(operands[0].tanh())
            }
            ExprKind::Exp => {
                arity("exp", 1)?;
                Ok(operands[0].exp())
            }
            ExprKind::Sqrt => {
                arity("sqrt", 1)?;
                Ok(operands[0].sqrt())
            }
            ExprKind::Square => {
                arity("square", 1)?;
                Ok(operands[0].square())
            }
            ExprKind::Abs => {
                arity("abs", 1)?;
                Ok(operands[0].abs())
            }
        }
    }

    pub fn tanh(&self) -> Expr {
        match self.as_constant() {
            Some(c) => Expr::constant(c.tanh()),
            None => Expr::wrap(Node::Unary(UnaryOp::Tanh, self.clone())),
        }
    }

    pub fn exp(&self) -> Expr {
        match self.as_constant() {
            Some(c) => Expr::constant(c.exp()),
            None => Expr::wrap(Node::Unary(UnaryOp::Exp, self.clone())),
        }
    }

    pub fn sqrt(&self) -> Expr {
        match self.as_constant() {
            Some(c) => Expr::constant(c.sqrt()),
            None => Expr::wrap(Node::Unary(UnaryOp::Sqrt, self.clone())),
        }
    }

    pub fn square(&self) -> Expr {
        match self.as_constant() {
            Some(c) => Expr::constant(c * c),
            None => Expr::wrap(Node::Unary(UnaryOp::Square, self.clone())),
        }
    }

    pub fn abs(&self) -> Expr {
        match self.as_constant() {
            Some(c) => Expr::constant(c.abs()),
            None => Expr::wrap(Node::Unary(UnaryOp::Abs, self.clone())),
        }
    }

    /// Evaluates the expression under `binding`.
    ///
    /// Every variable reachable from the root must be bound. Any node whose
    /// value comes out NaN or infinite aborts evaluation with the path to the
    /// offending node.
    pub fn evaluate(&self, binding: &Binding) -> Result<f64, EvalError> {
        let order = topo_order(self);
        let mut vals: HashMap<usize, f64> = HashMap::with_capacity(order.len());
        for e in &order {
            let v = match &*e.node {
                Node::Const(c) => *c,
                Node::Var(id) => binding.get(*id).ok_or(EvalError::MissingVariable(*id))?,
                Node::Unary(op, a) => apply_unary(*op, vals[&a.key()]),
                Node::Binary(op, a, b) => apply_binary(*op, vals[&a.key()], vals[&b.key()]),
            };
            if !v.is_finite() {
                return Err(EvalError::NonFinite {
                    value: v,
                    path: path_to(self, e.key()),
                });
            }
            vals.insert(e.key(), v);
        }
        Ok(vals[&self.key()])
    }

    /// Rewrites this expression into the graph of its partial derivative with
    /// respect to `wrt`.
    ///
    /// The result is built only from the same node kinds, so it can be
    /// differentiated again (this is how `u_xx` and parameter gradients of
    /// residual losses are formed). Where the input is differentiable, the
    /// result evaluates to the exact partial derivative. `abs` at 0 follows
    /// the subgradient-0 convention.
    pub fn differentiate(&self, wrt: VarId) -> Expr {
        let order = topo_order(self);
        let mut deriv: HashMap<usize, Expr> = HashMap::with_capacity(order.len());
        for e in &order {
            let de = match &*e.node {
                Node::Const(_) => Expr::constant(0.0),
                Node::Var(id) => Expr::constant(if *id == wrt { 1.0 } else { 0.0 }),
                Node::Unary(op, a) => {
                    let da = deriv[&a.key()].clone();
                    match op {
                        UnaryOp::Neg => neg(&da),
                        // Reuse the tanh/exp/sqrt node itself rather than
                        // rebuilding it, so the derivative shares work with
                        // the primal graph.
                        UnaryOp::Tanh => {
                            let one_minus = sub(&Expr::constant(1.0), &e.square());
                            mul(&one_minus, &da)
                        }
                        UnaryOp::Exp => mul(e, &da),
                        UnaryOp::Sqrt => {
                            let two_root = mul(&Expr::constant(2.0), e);
                            div_unchecked(&da, &two_root)
                        }
                        UnaryOp::Square => mul(&mul(&Expr::constant(2.0), a), &da),
                        UnaryOp::Abs => mul(&saturated_sign(a), &da),
                    }
                }
                Node::Binary(op, a, b) => {
                    let da = deriv[&a.key()].clone();
                    let db = deriv[&b.key()].clone();
                    match op {
                        BinaryOp::Add => add(&da, &db),
                        BinaryOp::Sub => sub(&da, &db),
                        BinaryOp::Mul => add(&mul(&da, b), &mul(a, &db)),
                        BinaryOp::Div => {
                            let num = sub(&mul(&da, b), &mul(a, &db));
                            div_unchecked(&num, &b.square())
                        }
                    }
                }
            };
            deriv.insert(e.key(), de);
        }
        deriv.remove(&self.key()).expect("root visited")
    }

    /// Reverse-mode gradient: one forward sweep plus one adjoint sweep.
    ///
    /// Element `i` equals `self.differentiate(wrt[i]).evaluate(binding)` to
    /// within 1e-12 relative; this path just avoids materializing the
    /// derivative graphs.
    pub fn gradient(&self, wrt: &[VarId], binding: &Binding) -> Result<Vec<f64>, EvalError> {
        let order = topo_order(self);
        let mut vals: HashMap<usize, f64> = HashMap::with_capacity(order.len());
        for e in &order {
            let v = match &*e.node {
                Node::Const(c) => *c,
                Node::Var(id) => binding.get(*id).ok_or(EvalError::MissingVariable(*id))?,
                Node::Unary(op, a) => apply_unary(*op, vals[&a.key()]),
                Node::Binary(op, a, b) => apply_binary(*op, vals[&a.key()], vals[&b.key()]),
            };
            if !v.is_finite() {
                return Err(EvalError::NonFinite {
                    value: v,
                    path: path_to(self, e.key()),
                });
            }
            vals.insert(e.key(), v);
        }

        let mut adjoint: HashMap<usize, f64> = HashMap::with_capacity(order.len());
        adjoint.insert(self.key(), 1.0);
        let mut by_var: HashMap<VarId, f64> = HashMap::new();
        for e in order.iter().rev() {
            let Some(&g) = adjoint.get(&e.key()) else {
                continue;
            };
            let mut push = |child: &Expr, partial: f64| -> Result<(), EvalError> {
                let contrib = g * partial;
                if !contrib.is_finite() {
                    return Err(EvalError::NonFinite {
                        value: contrib,
                        path: path_to(self, e.key()),
                    });
                }
                *adjoint.entry(child.key()).or_insert(0.0) += contrib;
                Ok(())
            };
            match &*e.node {
                Node::Const(_) => {}
                Node::Var(id) => {
                    *by_var.entry(*id).or_insert(0.0) += g;
                }
                Node::Unary(op, a) => {
                    let av = vals[&a.key()];
                    let ev = vals[&e.key()];
                    let partial = match op {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Tanh => 1.0 - ev * ev,
                        UnaryOp::Exp => ev,
                        UnaryOp::Sqrt => 1.0 / (2.0 * ev),
                        UnaryOp::Square => 2.0 * av,
                        // Subgradient-0 convention at the kink.
                        UnaryOp::Abs => {
                            if av == 0.0 {
                                0.0
                            } else {
                                av.signum()
                            }
                        }
                    };
                    push(a, partial)?;
                }
                Node::Binary(op, a, b) => {
                    let av = vals[&a.key()];
                    let bv = vals[&b.key()];
                    match op {
                        BinaryOp::Add => {
                            push(a, 1.0)?;
                            push(b, 1.0)?;
                        }
                        BinaryOp::Sub => {
                            push(a, 1.0)?;
                            push(b, -1.0)?;
                        }
                        BinaryOp::Mul => {
                            push(a, bv)?;
                            push(b, av)?;
                        }
                        BinaryOp::Div => {
                            push(a, 1.0 / bv)?;
                            push(b, -av / (bv * bv))?;
                        }
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|id| by_var.get(id).copied().unwrap_or(0.0))
            .collect())
    }

    fn children(&self) -> Vec<Expr> {
        match &*self.node {
            Node::Const(_) | Node::Var(_) => Vec::new(),
            Node::Unary(_, a) => vec![a.clone()],
            Node::Binary(_, a, b) => vec![a.clone(), b.clone()],
        }
    }

    fn label(&self) -> String {
        match &*self.node {
            Node::Const(c) => format!("const({c})"),
            Node::Var(id) => format!("{id:?}"),
            Node::Unary(op, _) => format!("{op:?}").to_lowercase(),
            Node::Binary(op, _, _) => format!("{op:?}").to_lowercase(),
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr[{}]", self.label())
    }
}

/// `sign(x)` realized within the closed kind set as `tanh(1e30 * x)`:
/// exactly ±1 for |x| > ~2e-29 and exactly 0 at x = 0.
fn saturated_sign(a: &Expr) -> Expr {
    mul(&Expr::constant(SIGN_SCALE), a).tanh()
}

fn apply_unary(op: UnaryOp, a: f64) -> f64 {
    match op {
        UnaryOp::Neg => -a,
        UnaryOp::Tanh => a.tanh(),
        UnaryOp::Exp => a.exp(),
        UnaryOp::Sqrt => a.sqrt(),
        UnaryOp::Square => a * a,
        UnaryOp::Abs => a.abs(),
    }
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    }
}

/// Post-order (children before parents) over the DAG, each node once.
fn topo_order(root: &Expr) -> Vec<Expr> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((e, expanded)) = stack.pop() {
        if expanded {
            order.push(e);
            continue;
        }
        if !seen.insert(e.key()) {
            continue;
        }
        stack.push((e.clone(), true));
        for c in e.children() {
            stack.push((c, false));
        }
    }
    order
}

/// Renders the path from `root` to the node with the given key, e.g.
/// `div <- exp <- v3` for error reporting.
fn path_to(root: &Expr, target: usize) -> String {
    // Iterative DFS carrying the label trail; graphs are DAGs so this
    // terminates, and the first path found is reported.
    let mut stack = vec![(root.clone(), vec![root.label()])];
    let mut seen = HashSet::new();
    while let Some((e, trail)) = stack.pop() {
        if e.key() == target {
            return trail.join(" -> ");
        }
        if !seen.insert(e.key()) {
            continue;
        }
        for c in e.children() {
            let mut t = trail.clone();
            t.push(c.label());
            stack.push((c, t));
        }
    }
    root.label()
}

// Folding constructors. Folds are applied only where the folded value agrees
// with the unfolded tree at every binding with finite subterm values;
// non-finite evaluations are error paths either way.

fn add(a: &Expr, b: &Expr) -> Expr {
    match (a.as_constant(), b.as_constant()) {
        (Some(x), Some(y)) => Expr::constant(x + y),
        (Some(0.0), None) => b.clone(),
        (None, Some(0.0)) => a.clone(),
        _ => Expr::wrap(Node::Binary(BinaryOp::Add, a.clone(), b.clone())),
    }
}

fn sub(a: &Expr, b: &Expr) -> Expr {
    match (a.as_constant(), b.as_constant()) {
        (Some(x), Some(y)) => Expr::constant(x - y),
        (None, Some(0.0)) => a.clone(),
        (Some(0.0), None) => neg(b),
        _ => Expr::wrap(Node::Binary(BinaryOp::Sub, a.clone(), b.clone())),
    }
}

fn mul(a: &Expr, b: &Expr) -> Expr {
    match (a.as_constant(), b.as_constant()) {
        (Some(x), Some(y)) => Expr::constant(x * y),
        (Some(0.0), None) | (None, Some(0.0)) => Expr::constant(0.0),
        (Some(1.0), None) => b.clone(),
        (None, Some(1.0)) => a.clone(),
        _ => Expr::wrap(Node::Binary(BinaryOp::Mul, a.clone(), b.clone())),
    }
}

fn div(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if b.is_const(0.0) {
        return Err(ExprError::DivisionByZero);
    }
    Ok(div_unchecked(a, b))
}

/// Division used internally by differentiation rules, where the denominator
/// is structurally nonzero whenever the numerator is.
fn div_unchecked(a: &Expr, b: &Expr) -> Expr {
    match (a.as_constant(), b.as_constant()) {
        (Some(0.0), _) => Expr::constant(0.0),
        (Some(x), Some(y)) => Expr::constant(x / y),
        (None, Some(1.0)) => a.clone(),
        _ => Expr::wrap(Node::Binary(BinaryOp::Div, a.clone(), b.clone())),
    }
}

fn neg(a: &Expr) -> Expr {
    match a.as_constant() {
        Some(c) => Expr::constant(-c),
        None => Expr::wrap(Node::Unary(UnaryOp::Neg, a.clone())),
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $builder:expr) => {
        impl std::ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $builder(self, rhs)
            }
        }
        impl std::ops::$trait<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $builder(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $builder(&self, rhs)
            }
        }
        impl std::ops::$trait<Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $builder(self, &rhs)
            }
        }
        impl std::ops::$trait<f64> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                $builder(self, &Expr::constant(rhs))
            }
        }
        impl std::ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                $builder(&self, &Expr::constant(rhs))
            }
        }
        impl std::ops::$trait<&Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $builder(&Expr::constant(self), rhs)
            }
        }
        impl std::ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $builder(&Expr::constant(self), &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);

// Division panics if the denominator is a constant zero; that is a
// programming error on par with integer division by zero. Use
// `Expr::construct(ExprKind::Div, ..)` for a fallible variant.
fn div_or_panic(a: &Expr, b: &Expr) -> Expr {
    div(a, b).expect("division by constant zero")
}
impl_binop!(Div, div, div_or_panic);

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(self)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(&self)
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Self {
        Expr::constant(v)
    }
}
