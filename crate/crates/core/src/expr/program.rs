//! Straight-line compilation of expression graphs.
//!
//! A [`Program`] is a topologically sorted tape over the shared nodes of one
//! or more expressions. Each shared node is computed exactly once per
//! evaluation, in the same order and with the same floating-point operations
//! as the memoised tree walk in [`Expr::evaluate`], so the two paths produce
//! bit-identical values. Parameters are resolved at compile time (they are
//! bound once per problem); points vary per call.

use std::collections::HashMap;

use super::{key, BinaryOp, EvalError, Expr, Node, ParamEnv, Rational, UnaryOp};

#[derive(Debug, Clone)]
enum TapeOp {
    Const(f64),
    Load(usize),
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    Pow(usize, Rational),
}

/// A compiled batch of expressions sharing one tape.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<TapeOp>,
    outputs: Vec<usize>,
}

impl Program {
    /// Compiles `exprs` against `env`. Every referenced parameter must be
    /// bound; unbound names surface as [`EvalError::UnboundParam`].
    pub fn compile(exprs: &[Expr], env: &ParamEnv) -> Result<Program, EvalError> {
        let mut prog = Program { ops: Vec::new(), outputs: Vec::new() };
        let mut slots: HashMap<usize, usize> = HashMap::new();
        for e in exprs {
            let slot = prog.emit(e, env, &mut slots)?;
            prog.outputs.push(slot);
        }
        Ok(prog)
    }

    fn emit(
        &mut self,
        e: &Expr,
        env: &ParamEnv,
        slots: &mut HashMap<usize, usize>,
    ) -> Result<usize, EvalError> {
        if let Some(slot) = slots.get(&key(e)) {
            return Ok(*slot);
        }
        let op = match e.node() {
            Node::Const(c) => TapeOp::Const(*c),
            Node::Param(name) => TapeOp::Const(
                env.get(name)
                    .ok_or_else(|| EvalError::UnboundParam(name.to_string()))?,
            ),
            Node::Var { index, .. } => TapeOp::Load(*index),
            Node::Unary(op, u) => {
                let a = self.emit(u, env, slots)?;
                TapeOp::Unary(*op, a)
            }
            Node::Binary(op, x, y) => {
                let a = self.emit(x, env, slots)?;
                let b = self.emit(y, env, slots)?;
                TapeOp::Binary(*op, a, b)
            }
            Node::Pow(u, q) => {
                let a = self.emit(u, env, slots)?;
                TapeOp::Pow(a, *q)
            }
        };
        self.ops.push(op);
        let slot = self.ops.len() - 1;
        slots.insert(key(e), slot);
        Ok(slot)
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn tape_len(&self) -> usize {
        self.ops.len()
    }

    /// Evaluates all outputs at `point`, reusing `scratch` for slot storage.
    pub fn eval_into(
        &self,
        point: &[f64],
        scratch: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) -> Result<(), EvalError> {
        scratch.clear();
        scratch.reserve(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                TapeOp::Const(c) => *c,
                TapeOp::Load(index) => {
                    if *index >= point.len() {
                        return Err(EvalError::PointDimension { dim: point.len(), index: *index });
                    }
                    point[*index]
                }
                TapeOp::Unary(op, a) => {
                    let a = scratch[*a];
                    match op {
                        UnaryOp::Neg => -a,
                        UnaryOp::Sin => a.sin(),
                        UnaryOp::Cos => a.cos(),
                        UnaryOp::Exp => a.exp(),
                        UnaryOp::Log => a.ln(),
                        UnaryOp::Sqrt => a.sqrt(),
                    }
                }
                TapeOp::Binary(op, a, b) => {
                    let (a, b) = (scratch[*a], scratch[*b]);
                    match op {
                        BinaryOp::Add => a + b,
                        BinaryOp::Sub => a - b,
                        BinaryOp::Mul => a * b,
                        BinaryOp::Div => a / b,
                    }
                }
                TapeOp::Pow(a, q) => super::pow_value(scratch[*a], *q),
            };
            if !v.is_finite() {
                return Err(EvalError::Domain {
                    node: format!("tape step {i} ({op:?})"),
                    detail: "non-finite value".to_owned(),
                });
            }
            scratch.push(v);
        }
        out.clear();
        out.extend(self.outputs.iter().map(|s| scratch[*s]));
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut scratch = Vec::new();
        let mut out = Vec::new();
        self.eval_into(point, &mut scratch, &mut out)?;
        Ok(out)
    }
}
