//! Quadratically constrained program representation and its compiled
//! (derivative-ready) form.

use serde::{Deserialize, Serialize};

use crate::sparse::CscMatrix;

/// A scalar quadratic expression `c + Σ aᵢxᵢ + Σ qₖ x_{iₖ} x_{jₖ}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expr {
    pub constant: f64,
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<(usize, usize, f64)>,
}

impl Expr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { constant: c, ..Self::default() }
    }

    pub fn var(i: usize) -> Self {
        Self { linear: vec![(i, 1.0)], ..Self::default() }
    }

    pub fn add_linear(&mut self, i: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.linear.push((i, coef));
        }
        self
    }

    pub fn add_quadratic(&mut self, i: usize, j: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.quadratic.push((i, j, coef));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn is_linear(&self) -> bool {
        self.quadratic.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for &(i, a) in &self.linear {
            v += a * x[i];
        }
        for &(i, j, q) in &self.quadratic {
            v += q * x[i] * x[j];
        }
        v
    }

    /// Dense gradient accumulated into `g` with weight `w`.
    pub fn add_gradient(&self, x: &[f64], w: f64, g: &mut [f64]) {
        for &(i, a) in &self.linear {
            g[i] += w * a;
        }
        for &(i, j, q) in &self.quadratic {
            g[i] += w * q * x[j];
            g[j] += w * q * x[i];
        }
    }

    pub fn max_index(&self) -> Option<usize> {
        let lin = self.linear.iter().map(|t| t.0);
        let quad = self.quadratic.iter().flat_map(|t| [t.0, t.1]);
        lin.chain(quad).max()
    }
}

/// `lower <= body(x) <= upper`; equality when the bounds coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub body: Expr,
    pub lower: f64,
    pub upper: f64,
}

impl Constraint {
    pub fn equal(body: Expr, rhs: f64) -> Self {
        Self { body, lower: rhs, upper: rhs }
    }

    pub fn at_least(body: Expr, lower: f64) -> Self {
        Self { body, lower, upper: f64::INFINITY }
    }

    pub fn at_most(body: Expr, upper: f64) -> Self {
        Self { body, lower: f64::NEG_INFINITY, upper }
    }

    pub fn is_equality(&self) -> bool {
        self.lower == self.upper
    }

    /// Amount by which `value` lies outside `[lower, upper]`.
    pub fn violation(&self, value: f64) -> f64 {
        if value < self.lower {
            self.lower - value
        } else if value > self.upper {
            value - self.upper
        } else {
            0.0
        }
    }
}

/// A quadratically constrained program
/// `min f(x)  s.t.  gₗ <= g(x) <= gᵤ,  xₗ <= x <= xᵤ`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QcqpProblem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Starting point used when no warm start is supplied.
    pub initial: Vec<f64>,
    pub objective: Expr,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProblemError {
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("variable {0} has lower bound above upper bound")]
    InvertedBounds(usize),
    #[error("expression references undeclared variable {0}")]
    UnknownVariable(usize),
    #[error("constraint {0} has lower bound above upper bound")]
    InvertedConstraint(usize),
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
}

impl QcqpProblem {
    pub fn num_variables(&self) -> usize {
        self.lower.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Declares a variable and returns its index.
    pub fn add_variable(&mut self, lower: f64, upper: f64, initial: f64) -> usize {
        self.lower.push(lower);
        self.upper.push(upper);
        self.initial.push(initial);
        self.lower.len() - 1
    }

    pub fn add_constraint(&mut self, c: Constraint) -> usize {
        self.constraints.push(c);
        self.constraints.len() - 1
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let n = self.num_variables();
        if self.upper.len() != n || self.initial.len() != n {
            return Err(ProblemError::Dimension { expected: n, got: self.upper.len().min(self.initial.len()) });
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(ProblemError::InvertedBounds(i));
            }
        }
        let check = |e: &Expr, what: String| -> Result<(), ProblemError> {
            if let Some(m) = e.max_index() {
                if m >= n {
                    return Err(ProblemError::UnknownVariable(m));
                }
            }
            let finite = e.constant.is_finite()
                && e.linear.iter().all(|t| t.1.is_finite())
                && e.quadratic.iter().all(|t| t.2.is_finite());
            if !finite {
                return Err(ProblemError::NonFinite(what));
            }
            Ok(())
        };
        check(&self.objective, "objective".into())?;
        for (k, c) in self.constraints.iter().enumerate() {
            check(&c.body, format!("constraint {k}"))?;
            if c.lower > c.upper {
                return Err(ProblemError::InvertedConstraint(k));
            }
        }
        Ok(())
    }

    /// Objective value and the largest violation over all constraints and
    /// variable bounds.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, f64), ProblemError> {
        if x.len() != self.num_variables() {
            return Err(ProblemError::Dimension { expected: self.num_variables(), got: x.len() });
        }
        let obj = self.objective.eval(x);
        let mut viol: f64 = 0.0;
        for c in &self.constraints {
            viol = viol.max(c.violation(c.body.eval(x)));
        }
        for (i, &xi) in x.iter().enumerate() {
            viol = viol.max(self.lower[i] - xi).max(xi - self.upper[i]);
        }
        Ok((obj, viol))
    }

    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| c.body.eval(x)).collect()
    }
}

/// Precomputed sparse structure for fast evaluation of constraint values,
/// the constraint Jacobian, the objective gradient, and the Hessian of the
/// Lagrangian.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub n: usize,
    pub m: usize,
    /// Jacobian pattern (rows = constraints, cols = variables) with the
    /// constant linear part in its values.
    pub jac_base: CscMatrix,
    jac_ops: Vec<(usize, usize, f64)>,
    /// Upper-triangular Hessian pattern.
    pub hess_pattern: CscMatrix,
    // (slot, constraint or usize::MAX for objective, coefficient)
    hess_ops: Vec<(usize, usize, f64)>,
    obj_grad_base: Vec<f64>,
    obj_quad: Vec<(usize, usize, f64)>,
}

pub const OBJECTIVE_ROW: usize = usize::MAX;

impl Compiled {
    pub fn new(p: &QcqpProblem) -> Self {
        let n = p.num_variables();
        let m = p.num_constraints();
        let mut entries = Vec::new();
        for (r, c) in p.constraints.iter().enumerate() {
            for &(i, _) in &c.body.linear {
                entries.push((r, i));
            }
            for &(i, j, _) in &c.body.quadratic {
                entries.push((r, i));
                entries.push((r, j));
            }
        }
        let (mut jac_base, slots) = CscMatrix::pattern_from_entries(m, n, entries);
        let mut jac_ops = Vec::new();
        let mut k = 0;
        for c in &p.constraints {
            for &(_, a) in &c.body.linear {
                jac_base.values[slots[k]] += a;
                k += 1;
            }
            for &(i, j, q) in &c.body.quadratic {
                // d/dx_i (q x_i x_j) = q x_j
                jac_ops.push((slots[k], j, q));
                jac_ops.push((slots[k + 1], i, q));
                k += 2;
            }
        }

        let mut hentries = Vec::new();
        let mut hsrc = Vec::new();
        let mut push_quad = |row: usize, i: usize, j: usize, q: f64| {
            let (a, b) = (i.min(j), i.max(j));
            hentries.push((a, b));
            hsrc.push((row, if i == j { 2.0 * q } else { q }));
        };
        for &(i, j, q) in &p.objective.quadratic {
            push_quad(OBJECTIVE_ROW, i, j, q);
        }
        for (r, c) in p.constraints.iter().enumerate() {
            for &(i, j, q) in &c.body.quadratic {
                push_quad(r, i, j, q);
            }
        }
        let (hess_pattern, hslots) = CscMatrix::pattern_from_entries(n, n, hentries);
        let hess_ops = hslots.iter().zip(&hsrc).map(|(&s, &(r, q))| (s, r, q)).collect();

        let mut obj_grad_base = vec![0.0; n];
        for &(i, a) in &p.objective.linear {
            obj_grad_base[i] += a;
        }
        Self {
            n,
            m,
            jac_base,
            jac_ops,
            hess_pattern,
            hess_ops,
            obj_grad_base,
            obj_quad: p.objective.quadratic.clone(),
        }
    }

    /// Jacobian values at `x`, in the storage order of `jac_base`.
    pub fn jacobian_values(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.jac_base.values);
        for &(slot, var, q) in &self.jac_ops {
            out[slot] += q * x[var];
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> CscMatrix {
        let mut j = self.jac_base.clone();
        let mut v = Vec::new();
        self.jacobian_values(x, &mut v);
        j.values = v;
        j
    }

    pub fn objective_gradient(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.obj_grad_base);
        for &(i, j, q) in &self.obj_quad {
            out[i] += q * x[j];
            out[j] += q * x[i];
        }
    }

    /// Hessian of `σ f(x) + Σ λᵢ gᵢ(x)` (upper triangle) in the storage
    /// order of `hess_pattern`.
    pub fn hessian_values(&self, obj_factor: f64, lambda: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.hess_pattern.nnz(), 0.0);
        for &(slot, row, q) in &self.hess_ops {
            let w = if row == OBJECTIVE_ROW { obj_factor } else { lambda[row] };
            out[slot] += w * q;
        }
    }
}
