//! Finite-difference checks of first derivatives.

use crate::problem::{Compiled, QcqpProblem};
use crate::sparse::CscMatrix;

/// Anything that exposes values and first derivatives of an objective and
/// a constraint vector.
pub trait Differentiable {
    fn num_variables(&self) -> usize;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn constraints(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> CscMatrix;
}

/// Analytic derivatives of a [`QcqpProblem`].
pub struct CompiledProblem<'a> {
    pub problem: &'a QcqpProblem,
    pub compiled: Compiled,
}

impl<'a> CompiledProblem<'a> {
    pub fn new(problem: &'a QcqpProblem) -> Self {
        Self { problem, compiled: Compiled::new(problem) }
    }
}

impl Differentiable for CompiledProblem<'_> {
    fn num_variables(&self) -> usize {
        self.problem.num_variables()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.problem.objective.eval(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.compiled.objective_gradient(x, &mut g);
        g
    }

    fn constraints(&self, x: &[f64]) -> Vec<f64> {
        self.problem.constraint_values(x)
    }

    fn jacobian(&self, x: &[f64]) -> CscMatrix {
        self.compiled.jacobian(x)
    }
}

/// Largest mismatch found by [`check_derivatives`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub max_gradient_error: f64,
    pub max_jacobian_error: f64,
    /// (constraint row, variable) of the worst Jacobian entry
    pub worst_entry: Option<(usize, usize)>,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.max_gradient_error.max(self.max_jacobian_error)
    }
}

/// Compares analytic derivatives with central differences at `x`.
/// Errors are relative to `max(1, |analytic|)`.
pub fn check_derivatives<D: Differentiable + ?Sized>(d: &D, x: &[f64], step: f64) -> DerivativeReport {
    let n = d.num_variables();
    let g = d.gradient(x);
    let jac = d.jacobian(x).to_dense();
    let mut report = DerivativeReport { max_gradient_error: 0.0, max_jacobian_error: 0.0, worst_entry: None };
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = d.objective(&xp);
        let cp = d.constraints(&xp);
        xp[j] = x[j] - h;
        let fm = d.objective(&xp);
        let cm = d.constraints(&xp);
        xp[j] = x[j];
        let fd = (fp - fm) / (2.0 * h);
        let e = (fd - g[j]).abs() / g[j].abs().max(1.0);
        report.max_gradient_error = report.max_gradient_error.max(e);
        for (r, row) in jac.iter().enumerate() {
            let fd = (cp[r] - cm[r]) / (2.0 * h);
            let e = (fd - row[j]).abs() / row[j].abs().max(1.0);
            if e > report.max_jacobian_error {
                report.max_jacobian_error = e;
                report.worst_entry = Some((r, j));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Constraint, Expr};

    fn problem() -> QcqpProblem {
        let mut p = QcqpProblem::default();
        let a = p.add_variable(-1.0, 1.0, 0.3);
        let b = p.add_variable(-1.0, 1.0, -0.7);
        let mut obj = Expr::new();
        obj.add_quadratic(a, b, 1.5).add_linear(a, 2.0);
        p.objective = obj;
        let mut c = Expr::new();
        c.add_quadratic(a, a, 1.0).add_quadratic(b, b, 1.0).add_constant(-1.0);
        p.add_constraint(Constraint::equal(c, 0.0));
        p
    }

    struct Corrupted<'a>(CompiledProblem<'a>);

    impl Differentiable for Corrupted<'_> {
        fn num_variables(&self) -> usize {
            self.0.num_variables()
        }
        fn objective(&self, x: &[f64]) -> f64 {
            self.0.objective(x)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            self.0.gradient(x)
        }
        fn constraints(&self, x: &[f64]) -> Vec<f64> {
            self.0.constraints(x)
        }
        fn jacobian(&self, x: &[f64]) -> CscMatrix {
            let mut j = self.0.jacobian(x);
            j.values[0] += 0.1;
            j
        }
    }

    #[test]
    fn analytic_derivatives_agree() {
        let p = problem();
        let d = CompiledProblem::new(&p);
        let r = check_derivatives(&d, &[0.3, -0.7], 1e-6);
        assert!(r.max_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn corrupted_jacobian_is_caught() {
        let p = problem();
        let d = Corrupted(CompiledProblem::new(&p));
        let r = check_derivatives(&d, &[0.3, -0.7], 1e-6);
        assert!(r.max_jacobian_error > 0.05);
        assert_eq!(r.worst_entry, Some((0, 0)));
    }
}
