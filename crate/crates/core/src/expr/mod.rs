//! Closed-form scalar expressions over chart coordinates.
//!
//! An [`Expr`] is an immutable, reference-counted syntax tree over a fixed
//! node set: real constants, named parameters, coordinate references, the
//! unary operations `-`, `sin`, `cos`, `exp`, `log`, `sqrt`, the binary
//! operations `+`, `-`, `*`, `/`, and powers with an exact rational exponent.
//! The node set is closed under symbolic differentiation to every order, so
//! fourth-order operators downstream are exact rather than approximated.
//!
//! Subtrees are shared (`Arc`), and differentiation, substitution and
//! evaluation are memoised per shared node. Repeated differentiation of a
//! shared tree therefore grows the underlying graph polynomially even when
//! the unfolded tree would grow exponentially.
//!
//! Simplification is conservative and happens in the constructors: constant
//! folding, `0`/`1` identities and merging of constant factors in products.
//! No rewrite that could change the domain of definition beyond those rules
//! is applied.

mod parse;
mod program;

pub use parse::parse_expr;
pub use program::Program;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use num_traits::ToPrimitive;
use thiserror::Error;

/// Exact rational exponent of a power node.
pub type Rational = Rational64;

/// Errors from parsing expression text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

/// Errors from numeric evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    /// The operation left the domain of definition (log/sqrt of a negative
    /// number, division by zero, zero to a negative power, overflow).
    #[error("domain error in `{node}`: {detail}")]
    Domain { node: String, detail: String },
    #[error("parameter `{0}` is not bound")]
    UnboundParam(String),
    #[error("point has dimension {dim} but a coordinate with index {index} is referenced")]
    PointDimension { dim: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression node. Constructed through the methods on [`Expr`] only, so
/// every tree in the system is pre-simplified.
#[derive(Debug, PartialEq)]
pub enum Node {
    Const(f64),
    Param(Arc<str>),
    Var { name: Arc<str>, index: usize },
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
    Pow(Expr, Rational),
}

/// A shared, immutable scalar expression.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || *self.0 == *other.0
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

/// Bindings of parameter names to values. Parameters are bound exactly once
/// per problem; the map rejects rebinding through [`ParamEnv::insert`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamEnv(BTreeMap<String, f64>);

impl ParamEnv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `name`; returns `false` if it was already bound.
    pub fn insert(&mut self, name: &str, value: f64) -> bool {
        self.0.insert(name.to_owned(), value).is_none()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, f64)> for ParamEnv {
    fn from_iter<T: IntoIterator<Item = (String, f64)>>(iter: T) -> Self {
        ParamEnv(iter.into_iter().collect())
    }
}

type Memo<T> = HashMap<usize, T>;

pub(crate) fn key(e: &Expr) -> usize {
    Arc::as_ptr(&e.0) as usize
}

impl Expr {
    fn new(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn number(v: f64) -> Expr {
        Expr::new(Node::Const(v))
    }

    pub fn zero() -> Expr {
        Expr::number(0.0)
    }

    pub fn one() -> Expr {
        Expr::number(1.0)
    }

    pub fn param(name: &str) -> Expr {
        Expr::new(Node::Param(name.into()))
    }

    /// Coordinate reference. `index` is the position of `name` in the
    /// enclosing chart's coordinate list; the two must agree.
    pub fn coord(name: &str, index: usize) -> Expr {
        Expr::new(Node::Var { name: name.into(), index })
    }

    pub fn as_const(&self) -> Option<f64> {
        match &*self.0 {
            Node::Const(v) => Some(*v),
            _ => None,
        }
    }

    fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn add(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if (a + b).is_finite() => return Expr::number(a + b),
            (Some(0.0), _) => return rhs.clone(),
            (_, Some(0.0)) => return self.clone(),
            _ => {}
        }
        Expr::new(Node::Binary(BinaryOp::Add, self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if (a - b).is_finite() => return Expr::number(a - b),
            (_, Some(0.0)) => return self.clone(),
            (Some(0.0), _) => return rhs.neg(),
            _ => {}
        }
        Expr::new(Node::Binary(BinaryOp::Sub, self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if (a * b).is_finite() => return Expr::number(a * b),
            (Some(a), _) => return Expr::mul_const(a, rhs),
            (_, Some(b)) => return Expr::mul_const(b, self),
            _ => {}
        }
        Expr::new(Node::Binary(BinaryOp::Mul, self.clone(), rhs.clone()))
    }

    /// `c * e` with the constant kept leftmost and merged into an existing
    /// leading constant factor of `e`.
    fn mul_const(c: f64, e: &Expr) -> Expr {
        if c == 0.0 {
            return Expr::zero();
        }
        if c == 1.0 {
            return e.clone();
        }
        if let Node::Binary(BinaryOp::Mul, a, b) = &*e.0 {
            if let Some(a) = a.as_const() {
                if (c * a).is_finite() {
                    return Expr::mul_const(c * a, b);
                }
            }
        }
        if c == -1.0 {
            return e.neg();
        }
        Expr::new(Node::Binary(BinaryOp::Mul, Expr::number(c), e.clone()))
    }

    pub fn div(&self, rhs: &Expr) -> Expr {
        if let (Some(a), Some(b)) = (self.as_const(), rhs.as_const()) {
            if b != 0.0 && (a / b).is_finite() {
                return Expr::number(a / b);
            }
        }
        if self.is_zero() {
            return Expr::zero();
        }
        if rhs.is_one() {
            return self.clone();
        }
        Expr::new(Node::Binary(BinaryOp::Div, self.clone(), rhs.clone()))
    }

    pub fn neg(&self) -> Expr {
        if let Some(a) = self.as_const() {
            return Expr::number(-a);
        }
        if let Node::Unary(UnaryOp::Neg, inner) = &*self.0 {
            return inner.clone();
        }
        Expr::new(Node::Unary(UnaryOp::Neg, self.clone()))
    }

    fn unary(op: UnaryOp, arg: &Expr) -> Expr {
        if let Some(a) = arg.as_const() {
            let v = match op {
                UnaryOp::Neg => -a,
                UnaryOp::Sin => a.sin(),
                UnaryOp::Cos => a.cos(),
                UnaryOp::Exp => a.exp(),
                UnaryOp::Log => a.ln(),
                UnaryOp::Sqrt => a.sqrt(),
            };
            if v.is_finite() {
                return Expr::number(v);
            }
        }
        Expr::new(Node::Unary(op, arg.clone()))
    }

    pub fn sin(&self) -> Expr {
        Expr::unary(UnaryOp::Sin, self)
    }

    pub fn cos(&self) -> Expr {
        Expr::unary(UnaryOp::Cos, self)
    }

    pub fn exp(&self) -> Expr {
        Expr::unary(UnaryOp::Exp, self)
    }

    pub fn log(&self) -> Expr {
        Expr::unary(UnaryOp::Log, self)
    }

    pub fn sqrt(&self) -> Expr {
        Expr::unary(UnaryOp::Sqrt, self)
    }

    /// Power with an exact rational exponent.
    pub fn powr(&self, q: Rational) -> Expr {
        if q == Rational::from_integer(0) {
            return Expr::one();
        }
        if q == Rational::from_integer(1) {
            return self.clone();
        }
        if let Some(a) = self.as_const() {
            if let Some(v) = pow_const(a, q) {
                return Expr::number(v);
            }
        }
        Expr::new(Node::Pow(self.clone(), q))
    }

    pub fn powi(&self, n: i64) -> Expr {
        self.powr(Rational::from_integer(n))
    }

    /// Sum of a list of expressions (zero for an empty list).
    pub fn sum<'a>(terms: impl IntoIterator<Item = &'a Expr>) -> Expr {
        let mut acc = Expr::zero();
        for t in terms {
            acc = acc.add(t);
        }
        acc
    }

    /// Partial derivative with respect to the coordinate named `var`.
    /// Parameters are treated as constants.
    pub fn differentiate(&self, var: &str) -> Expr {
        let mut memo: Memo<Expr> = HashMap::new();
        self.diff_inner(var, &mut memo)
    }

    fn diff_inner(&self, var: &str, memo: &mut Memo<Expr>) -> Expr {
        if let Some(d) = memo.get(&key(self)) {
            return d.clone();
        }
        let d = match &*self.0 {
            Node::Const(_) | Node::Param(_) => Expr::zero(),
            Node::Var { name, .. } => {
                if name.as_ref() == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Unary(op, u) => {
                let du = u.diff_inner(var, memo);
                match op {
                    UnaryOp::Neg => du.neg(),
                    UnaryOp::Sin => u.cos().mul(&du),
                    UnaryOp::Cos => u.sin().neg().mul(&du),
                    UnaryOp::Exp => u.exp().mul(&du),
                    UnaryOp::Log => du.div(u),
                    UnaryOp::Sqrt => du.div(&Expr::number(2.0).mul(&u.sqrt())),
                }
            }
            Node::Binary(op, a, b) => {
                let da = a.diff_inner(var, memo);
                let db = b.diff_inner(var, memo);
                match op {
                    BinaryOp::Add => da.add(&db),
                    BinaryOp::Sub => da.sub(&db),
                    BinaryOp::Mul => da.mul(b).add(&a.mul(&db)),
                    BinaryOp::Div => da.mul(b).sub(&a.mul(&db)).div(&b.powi(2)),
                }
            }
            Node::Pow(u, q) => {
                let du = u.diff_inner(var, memo);
                let qf = rational_to_f64(*q);
                Expr::number(qf)
                    .mul(&u.powr(*q - Rational::from_integer(1)))
                    .mul(&du)
            }
        };
        memo.insert(key(self), d.clone());
        d
    }

    /// Replaces coordinate references by expressions (used to compose target
    /// quantities with a map). Names absent from `subs` are left untouched.
    pub fn substitute(&self, subs: &BTreeMap<String, Expr>) -> Expr {
        let mut memo: Memo<Expr> = HashMap::new();
        self.subst_inner(subs, &mut memo)
    }

    fn subst_inner(&self, subs: &BTreeMap<String, Expr>, memo: &mut Memo<Expr>) -> Expr {
        if let Some(s) = memo.get(&key(self)) {
            return s.clone();
        }
        let s = match &*self.0 {
            Node::Const(_) | Node::Param(_) => self.clone(),
            Node::Var { name, .. } => match subs.get(name.as_ref()) {
                Some(replacement) => replacement.clone(),
                None => self.clone(),
            },
            Node::Unary(op, u) => {
                let su = u.subst_inner(subs, memo);
                match op {
                    UnaryOp::Neg => su.neg(),
                    UnaryOp::Sin => su.sin(),
                    UnaryOp::Cos => su.cos(),
                    UnaryOp::Exp => su.exp(),
                    UnaryOp::Log => su.log(),
                    UnaryOp::Sqrt => su.sqrt(),
                }
            }
            Node::Binary(op, a, b) => {
                let sa = a.subst_inner(subs, memo);
                let sb = b.subst_inner(subs, memo);
                match op {
                    BinaryOp::Add => sa.add(&sb),
                    BinaryOp::Sub => sa.sub(&sb),
                    BinaryOp::Mul => sa.mul(&sb),
                    BinaryOp::Div => sa.div(&sb),
                }
            }
            Node::Pow(u, q) => u.subst_inner(subs, memo).powr(*q),
        };
        memo.insert(key(self), s.clone());
        s
    }

    /// Evaluates at `point` (coordinate values by index) under `env`.
    pub fn evaluate(&self, point: &[f64], env: &ParamEnv) -> Result<f64, EvalError> {
        let mut memo: Memo<f64> = HashMap::new();
        self.eval_inner(point, env, &mut memo)
    }

    fn eval_inner(
        &self,
        point: &[f64],
        env: &ParamEnv,
        memo: &mut Memo<f64>,
    ) -> Result<f64, EvalError> {
        if let Some(v) = memo.get(&key(self)) {
            return Ok(*v);
        }
        let v = match &*self.0 {
            Node::Const(c) => *c,
            Node::Param(name) => env
                .get(name)
                .ok_or_else(|| EvalError::UnboundParam(name.to_string()))?,
            Node::Var { index, .. } => {
                if *index >= point.len() {
                    return Err(EvalError::PointDimension { dim: point.len(), index: *index });
                }
                point[*index]
            }
            Node::Unary(op, u) => {
                let a = u.eval_inner(point, env, memo)?;
                let v = match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Log => a.ln(),
                    UnaryOp::Sqrt => a.sqrt(),
                };
                self.check_finite(v, op_name_unary(*op))?
            }
            Node::Binary(op, x, y) => {
                let a = x.eval_inner(point, env, memo)?;
                let b = y.eval_inner(point, env, memo)?;
                let v = match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                };
                self.check_finite(v, op_name_binary(*op))?
            }
            Node::Pow(u, q) => {
                let a = u.eval_inner(point, env, memo)?;
                self.check_finite(pow_value(a, *q), "pow")?
            }
        };
        memo.insert(key(self), v);
        Ok(v)
    }

    fn check_finite(&self, v: f64, what: &str) -> Result<f64, EvalError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::Domain {
                node: self.render_clipped(40),
                detail: format!("{what} produced a non-finite value"),
            })
        }
    }

    /// All parameter names referenced anywhere in the tree.
    pub fn free_params(&self) -> BTreeSet<String> {
        let mut seen = HashMap::new();
        let mut out = BTreeSet::new();
        self.walk_params(&mut seen, &mut out);
        out
    }

    fn walk_params(&self, seen: &mut Memo<()>, out: &mut BTreeSet<String>) {
        if seen.insert(key(self), ()).is_some() {
            return;
        }
        match &*self.0 {
            Node::Param(name) => {
                out.insert(name.to_string());
            }
            Node::Unary(_, u) | Node::Pow(u, _) => u.walk_params(seen, out),
            Node::Binary(_, a, b) => {
                a.walk_params(seen, out);
                b.walk_params(seen, out);
            }
            _ => {}
        }
    }

    /// Number of distinct shared nodes in the expression graph.
    pub fn graph_size(&self) -> usize {
        let mut seen = HashMap::new();
        self.count_nodes(&mut seen);
        seen.len()
    }

    fn count_nodes(&self, seen: &mut Memo<()>) {
        if seen.insert(key(self), ()).is_some() {
            return;
        }
        match &*self.0 {
            Node::Unary(_, u) | Node::Pow(u, _) => u.count_nodes(seen),
            Node::Binary(_, a, b) => {
                a.count_nodes(seen);
                b.count_nodes(seen);
            }
            _ => {}
        }
    }

    /// Canonical text form; `parse_expr` of the result evaluates identically.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut budget = usize::MAX;
        self.render_prec(0, &mut s, &mut budget);
        s
    }

    /// Render clipped to roughly `budget` nodes, for error messages.
    fn render_clipped(&self, budget: usize) -> String {
        let mut s = String::new();
        let mut b = budget;
        self.render_prec(0, &mut s, &mut b);
        s
    }

    // Precedence levels: 0 add/sub, 1 mul/div, 2 unary minus, 3 pow/atom.
    fn render_prec(&self, parent: u8, out: &mut String, budget: &mut usize) {
        if *budget == 0 {
            out.push('…');
            return;
        }
        *budget = budget.saturating_sub(1);
        match &*self.0 {
            Node::Const(v) => {
                if *v < 0.0 || v.is_sign_negative() {
                    let need = parent > 2;
                    if need {
                        out.push('(');
                    }
                    out.push_str(&format_f64(*v));
                    if need {
                        out.push(')');
                    }
                } else {
                    out.push_str(&format_f64(*v));
                }
            }
            Node::Param(name) => out.push_str(name),
            Node::Var { name, .. } => out.push_str(name),
            Node::Unary(UnaryOp::Neg, u) => {
                let need = parent > 2;
                if need {
                    out.push('(');
                }
                out.push('-');
                u.render_prec(2, out, budget);
                if need {
                    out.push(')');
                }
            }
            Node::Unary(op, u) => {
                out.push_str(op_name_unary(*op));
                out.push('(');
                u.render_prec(0, out, budget);
                out.push(')');
            }
            Node::Binary(op, a, b) => {
                let (prec, sym) = match op {
                    BinaryOp::Add => (0, " + "),
                    BinaryOp::Sub => (0, " - "),
                    BinaryOp::Mul => (1, "*"),
                    BinaryOp::Div => (1, "/"),
                };
                let need = parent > prec;
                if need {
                    out.push('(');
                }
                a.render_prec(prec, out, budget);
                out.push_str(sym);
                // Right operand of `-` and `/` must bind tighter.
                let rprec = match op {
                    BinaryOp::Sub => 1,
                    BinaryOp::Div => 2,
                    _ => prec,
                };
                b.render_prec(rprec, out, budget);
                if need {
                    out.push(')');
                }
            }
            Node::Pow(u, q) => {
                let need = parent > 3;
                if need {
                    out.push('(');
                }
                u.render_prec(4, out, budget);
                out.push('^');
                let (n, d) = (*q.numer(), *q.denom());
                if d == 1 && n >= 0 {
                    out.push_str(&n.to_string());
                } else if d == 1 {
                    out.push_str(&format!("({n})"));
                } else {
                    out.push_str(&format!("({n}/{d})"));
                }
                if need {
                    out.push(')');
                }
            }
        }
    }
}

fn op_name_unary(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Sin => "sin",
        UnaryOp::Cos => "cos",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Sqrt => "sqrt",
    }
}

fn op_name_binary(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

pub(crate) fn rational_to_f64(q: Rational) -> f64 {
    q.to_f64().expect("rational exponent representable as f64")
}

/// `base^q` as a plain value; `None` if outside the real domain so that the
/// constructor keeps the node instead of folding.
fn pow_const(base: f64, q: Rational) -> Option<f64> {
    let v = pow_value(base, q);
    v.is_finite().then_some(v)
}

pub(crate) fn pow_value(base: f64, q: Rational) -> f64 {
    if q.is_integer() {
        let n = *q.numer();
        if base == 0.0 && n < 0 {
            return f64::INFINITY; // caught by the finiteness check
        }
        if let Ok(n32) = i32::try_from(n) {
            return base.powi(n32);
        }
        return base.powf(n as f64);
    }
    base.powf(rational_to_f64(q))
}

/// Round-trippable decimal form of a constant.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}
