//! Constraint expression trees and their evaluation.
//!
//! A constraint is a scalar function over a keypoint configuration
//! `k ∈ R^{K×3}`; values ≤ 0 mean satisfied. Expressions are closed trees
//! over a fixed operator set, so evaluation is sandboxed, deterministic,
//! and total on finite inputs.

use nalgebra::Vector3;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("keypoint index {index} out of range for K = {k}")]
    KeypointIndex { index: usize, k: usize },
    #[error("expression produced a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Lit(f64),
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Div(Box<ScalarExpr>, Box<ScalarExpr>),
    Neg(Box<ScalarExpr>),
    Abs(Box<ScalarExpr>),
    Min(Box<ScalarExpr>, Box<ScalarExpr>),
    Max(Box<ScalarExpr>, Box<ScalarExpr>),
    Sq(Box<ScalarExpr>),
    Norm(Box<VecExpr>),
    Dot(Box<VecExpr>, Box<VecExpr>),
    Comp(Axis, Box<VecExpr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum VecExpr {
    /// Keypoint at the current timestep.
    Kp(usize),
    /// Keypoint at the previous timestep (equals current at t = 1).
    KpPrev(usize),
    VSub(Box<VecExpr>, Box<VecExpr>),
    VAdd(Box<VecExpr>, Box<VecExpr>),
    VScale(Box<ScalarExpr>, Box<VecExpr>),
    /// Constant vector; components are literal by grammar.
    Const3(f64, f64, f64),
}

/// A parsed, scalar-valued constraint expression.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintExpr {
    root: ScalarExpr,
    max_kp_index: Option<usize>,
    uses_prev: bool,
}

impl ConstraintExpr {
    pub fn new(root: ScalarExpr) -> Self {
        let mut max_kp_index = None;
        let mut uses_prev = false;
        scan_scalar(&root, &mut max_kp_index, &mut uses_prev);
        Self {
            root,
            max_kp_index,
            uses_prev,
        }
    }

    pub fn root(&self) -> &ScalarExpr {
        &self.root
    }

    /// Largest keypoint index referenced, if any.
    pub fn max_kp_index(&self) -> Option<usize> {
        self.max_kp_index
    }

    /// Whether the expression reads previous-timestep keypoints.
    pub fn uses_prev(&self) -> bool {
        self.uses_prev
    }

    /// Evaluates against the current and previous configurations. Callers
    /// pass `previous = current` at the first timestep.
    pub fn eval(&self, current: &[Vector3<f64>], previous: &[Vector3<f64>]) -> Result<f64, EvalError> {
        let v = eval_scalar(&self.root, current, previous)?;
        if !v.is_finite() {
            return Err(EvalError::NonFinite);
        }
        Ok(v)
    }

    /// Canonical text form; reparses to a structurally identical tree.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        print_scalar(&self.root, &mut out);
        out
    }
}

impl fmt::Display for ConstraintExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}

fn scan_scalar(e: &ScalarExpr, max_kp: &mut Option<usize>, uses_prev: &mut bool) {
    match e {
        ScalarExpr::Lit(_) => {}
        ScalarExpr::Add(a, b)
        | ScalarExpr::Sub(a, b)
        | ScalarExpr::Mul(a, b)
        | ScalarExpr::Div(a, b)
        | ScalarExpr::Min(a, b)
        | ScalarExpr::Max(a, b) => {
            scan_scalar(a, max_kp, uses_prev);
            scan_scalar(b, max_kp, uses_prev);
        }
        ScalarExpr::Neg(a) | ScalarExpr::Abs(a) | ScalarExpr::Sq(a) => {
            scan_scalar(a, max_kp, uses_prev)
        }
        ScalarExpr::Norm(v) | ScalarExpr::Comp(_, v) => scan_vec(v, max_kp, uses_prev),
        ScalarExpr::Dot(a, b) => {
            scan_vec(a, max_kp, uses_prev);
            scan_vec(b, max_kp, uses_prev);
        }
    }
}

fn scan_vec(e: &VecExpr, max_kp: &mut Option<usize>, uses_prev: &mut bool) {
    match e {
        VecExpr::Kp(i) => *max_kp = Some(max_kp.map_or(*i, |m: usize| m.max(*i))),
        VecExpr::KpPrev(i) => {
            *uses_prev = true;
            *max_kp = Some(max_kp.map_or(*i, |m: usize| m.max(*i)));
        }
        VecExpr::VSub(a, b) | VecExpr::VAdd(a, b) => {
            scan_vec(a, max_kp, uses_prev);
            scan_vec(b, max_kp, uses_prev);
        }
        VecExpr::VScale(s, v) => {
            scan_scalar(s, max_kp, uses_prev);
            scan_vec(v, max_kp, uses_prev);
        }
        VecExpr::Const3(..) => {}
    }
}

fn eval_scalar(
    e: &ScalarExpr,
    cur: &[Vector3<f64>],
    prev: &[Vector3<f64>],
) -> Result<f64, EvalError> {
    Ok(match e {
        ScalarExpr::Lit(v) => *v,
        ScalarExpr::Add(a, b) => eval_scalar(a, cur, prev)? + eval_scalar(b, cur, prev)?,
        ScalarExpr::Sub(a, b) => eval_scalar(a, cur, prev)? - eval_scalar(b, cur, prev)?,
        ScalarExpr::Mul(a, b) => eval_scalar(a, cur, prev)? * eval_scalar(b, cur, prev)?,
        ScalarExpr::Div(a, b) => {
            let den = eval_scalar(b, cur, prev)?;
            if den == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            eval_scalar(a, cur, prev)? / den
        }
        ScalarExpr::Neg(a) => -eval_scalar(a, cur, prev)?,
        ScalarExpr::Abs(a) => eval_scalar(a, cur, prev)?.abs(),
        ScalarExpr::Min(a, b) => eval_scalar(a, cur, prev)?.min(eval_scalar(b, cur, prev)?),
        ScalarExpr::Max(a, b) => eval_scalar(a, cur, prev)?.max(eval_scalar(b, cur, prev)?),
        ScalarExpr::Sq(a) => {
            let v = eval_scalar(a, cur, prev)?;
            v * v
        }
        ScalarExpr::Norm(v) => eval_vec(v, cur, prev)?.norm(),
        ScalarExpr::Dot(a, b) => eval_vec(a, cur, prev)?.dot(&eval_vec(b, cur, prev)?),
        ScalarExpr::Comp(axis, v) => {
            let p = eval_vec(v, cur, prev)?;
            match axis {
                Axis::X => p.x,
                Axis::Y => p.y,
                Axis::Z => p.z,
            }
        }
    })
}

fn eval_vec(
    e: &VecExpr,
    cur: &[Vector3<f64>],
    prev: &[Vector3<f64>],
) -> Result<Vector3<f64>, EvalError> {
    Ok(match e {
        VecExpr::Kp(i) => *cur.get(*i).ok_or(EvalError::KeypointIndex {
            index: *i,
            k: cur.len(),
        })?,
        VecExpr::KpPrev(i) => *prev.get(*i).ok_or(EvalError::KeypointIndex {
            index: *i,
            k: prev.len(),
        })?,
        VecExpr::VSub(a, b) => eval_vec(a, cur, prev)? - eval_vec(b, cur, prev)?,
        VecExpr::VAdd(a, b) => eval_vec(a, cur, prev)? + eval_vec(b, cur, prev)?,
        VecExpr::VScale(s, v) => eval_scalar(s, cur, prev)? * eval_vec(v, cur, prev)?,
        VecExpr::Const3(x, y, z) => Vector3::new(*x, *y, *z),
    })
}

fn print_scalar(e: &ScalarExpr, out: &mut String) {
    match e {
        ScalarExpr::Lit(v) => out.push_str(&format_number(*v)),
        ScalarExpr::Add(a, b) => print_binary_ss("add", a, b, out),
        ScalarExpr::Sub(a, b) => print_binary_ss("sub", a, b, out),
        ScalarExpr::Mul(a, b) => print_binary_ss("mul", a, b, out),
        ScalarExpr::Div(a, b) => print_binary_ss("div", a, b, out),
        ScalarExpr::Min(a, b) => print_binary_ss("min", a, b, out),
        ScalarExpr::Max(a, b) => print_binary_ss("max", a, b, out),
        ScalarExpr::Neg(a) => print_unary_s("neg", a, out),
        ScalarExpr::Abs(a) => print_unary_s("abs", a, out),
        ScalarExpr::Sq(a) => print_unary_s("sq", a, out),
        ScalarExpr::Norm(v) => {
            out.push_str("(norm ");
            print_vec(v, out);
            out.push(')');
        }
        ScalarExpr::Dot(a, b) => {
            out.push_str("(dot ");
            print_vec(a, out);
            out.push(' ');
            print_vec(b, out);
            out.push(')');
        }
        ScalarExpr::Comp(axis, v) => {
            out.push('(');
            out.push_str(axis.name());
            out.push(' ');
            print_vec(v, out);
            out.push(')');
        }
    }
}

fn print_binary_ss(op: &str, a: &ScalarExpr, b: &ScalarExpr, out: &mut String) {
    out.push('(');
    out.push_str(op);
    out.push(' ');
    print_scalar(a, out);
    out.push(' ');
    print_scalar(b, out);
    out.push(')');
}

fn print_unary_s(op: &str, a: &ScalarExpr, out: &mut String) {
    out.push('(');
    out.push_str(op);
    out.push(' ');
    print_scalar(a, out);
    out.push(')');
}

fn print_vec(e: &VecExpr, out: &mut String) {
    match e {
        VecExpr::Kp(i) => out.push_str(&format!("(kp {i})")),
        VecExpr::KpPrev(i) => out.push_str(&format!("(kpprev {i})")),
        VecExpr::VSub(a, b) => {
            out.push_str("(vsub ");
            print_vec(a, out);
            out.push(' ');
            print_vec(b, out);
            out.push(')');
        }
        VecExpr::VAdd(a, b) => {
            out.push_str("(vadd ");
            print_vec(a, out);
            out.push(' ');
            print_vec(b, out);
            out.push(')');
        }
        VecExpr::VScale(s, v) => {
            out.push_str("(vscale ");
            print_scalar(s, out);
            out.push(' ');
            print_vec(v, out);
            out.push(')');
        }
        VecExpr::Const3(x, y, z) => {
            out.push_str(&format!(
                "(const3 {} {} {})",
                format_number(*x),
                format_number(*y),
                format_number(*z)
            ));
        }
    }
}

/// Shortest round-trip decimal form, so pretty-printed literals reparse to
/// the identical f64.
fn format_number(v: f64) -> String {
    format!("{v}")
}
