//! Primal-dual interior-point method with a filter line search.
//!
//! The problem is reformulated as
//!
//! ```text
//!   min f(w)   s.t.  c(w) = 0,   l <= w <= u
//! ```
//!
//! where `w` stacks the non-fixed original variables and one slack per
//! inequality row. Barrier subproblems are solved approximately with Newton
//! steps on the primal-dual equations; the symmetric indefinite KKT system
//! is factorized with a sparse LDLᵀ whose inertia drives the Hessian
//! regularization. Step acceptance follows a filter on constraint violation
//! and barrier objective, with second-order corrections and a feasibility
//! restoration phase when the line search stalls.

use std::time::Instant;

use log::{debug, trace};
use serde::{Deserialize, Serialize};

use crate::ldl::Ldl;
use crate::problem::{Compiled, Constraint, Expr, ProblemError, QcqpProblem};
use crate::sparse::CscMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Start from `QcqpProblem::initial`.
    #[default]
    ProblemStart,
    /// Start from a caller-supplied point.
    WarmStart(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Wall-clock cutoff in seconds.
    pub time_limit: Option<f64>,
    pub initialization: Initialization,
    pub verbosity: u8,
    pub mu_init: f64,
    /// Termination also happens after `acceptable_iter` consecutive
    /// iterates whose optimality error is below this value and that are
    /// feasible within `tolerance`.
    pub acceptable_tolerance: f64,
    pub acceptable_iter: usize,
    pub bound_push: f64,
    /// Relative relaxation of variable bounds inside the barrier.
    pub bound_relax: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iter: 3000,
            time_limit: None,
            initialization: Initialization::ProblemStart,
            verbosity: 0,
            mu_init: 0.1,
            acceptable_tolerance: 1e-6,
            acceptable_iter: 15,
            bound_push: 1e-2,
            bound_relax: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    OptimalLocal,
    MaxIter,
    TimeLimit,
    InfeasibleDetected,
    NumericalFailure,
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub inf_pr: f64,
    pub inf_du: f64,
    pub mu: f64,
    pub step: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub point: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    /// Filled when verbosity >= 1.
    pub log: Vec<IterationRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    Problem(#[from] ProblemError),
    #[error("invalid option: {0}")]
    Options(String),
}

/// Writes the iteration log as CSV (`iter,objective,inf_pr,inf_du,mu,step,regularization`).
pub fn write_iteration_log<W: std::io::Write>(log: &[IterationRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iter,objective,inf_pr,inf_du,mu,step,regularization")?;
    for r in log {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iter, r.objective, r.inf_pr, r.inf_du, r.mu, r.step, r.regularization
        )?;
    }
    Ok(())
}

// filter and barrier parameters
const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const TAU_MIN: f64 = 0.99;
const KAPPA_SIGMA: f64 = 1e10;
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const DELTA_SWITCH: f64 = 1.0;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;
const ETA_PHI: f64 = 1e-8;
const GAMMA_ALPHA: f64 = 0.05;
const MAX_SOC: usize = 4;
const KAPPA_SOC: f64 = 0.99;
const S_MAX: f64 = 100.0;
const GRAD_MAX: f64 = 100.0;
// regularization
const DELTA_C: f64 = 1e-9;
const DYN_EPS: f64 = 1e-14;
const DYN_DELTA: f64 = 1e-6;
const DELTA_W_INIT: f64 = 1e-4;
const MAX_REFINE: usize = 10;
const REFINE_TOL: f64 = 1e-8;
const DELTA_W_MIN: f64 = 1e-20;
const DELTA_W_MAX: f64 = 1e40;

/// Problem after fixed-variable elimination, slack introduction and
/// scaling.
struct Reformulated {
    n_orig: usize,
    free: Vec<usize>,
    fixed_value: Vec<Option<f64>>,
    nx: usize,
    nw: usize,
    m: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    compiled: Compiled,
    internal: QcqpProblem,
}

fn reduce_expr(e: &Expr, map: &[Option<usize>], fixed: &[Option<f64>]) -> Expr {
    let mut out = Expr::constant(e.constant);
    for &(i, a) in &e.linear {
        match map[i] {
            Some(r) => {
                out.add_linear(r, a);
            }
            None => out.constant += a * fixed[i].unwrap_or(0.0),
        }
    }
    for &(i, j, q) in &e.quadratic {
        match (map[i], map[j]) {
            (Some(a), Some(b)) => {
                out.add_quadratic(a, b, q);
            }
            (Some(a), None) => {
                out.add_linear(a, q * fixed[j].unwrap_or(0.0));
            }
            (None, Some(b)) => {
                out.add_linear(b, q * fixed[i].unwrap_or(0.0));
            }
            (None, None) => out.constant += q * fixed[i].unwrap_or(0.0) * fixed[j].unwrap_or(0.0),
        }
    }
    out
}

fn scale_expr(e: &mut Expr, s: f64) {
    e.constant *= s;
    e.linear.iter_mut().for_each(|t| t.1 *= s);
    e.quadratic.iter_mut().for_each(|t| t.2 *= s);
}

fn push_into(v: f64, l: f64, u: f64, kappa: f64) -> f64 {
    match (l.is_finite(), u.is_finite()) {
        (true, true) => {
            let pl = (kappa * l.abs().max(1.0)).min(kappa * (u - l));
            let pu = (kappa * u.abs().max(1.0)).min(kappa * (u - l));
            v.max(l + pl).min(u - pu)
        }
        (true, false) => v.max(l + kappa * l.abs().max(1.0)),
        (false, true) => v.min(u - kappa * u.abs().max(1.0)),
        (false, false) => v,
    }
}

impl Reformulated {
    fn new(p: &QcqpProblem, x0: &[f64], opts: &SolverOptions) -> (Self, Vec<f64>) {
        let n = p.num_variables();
        let mut map = vec![None; n];
        let mut fixed_value = vec![None; n];
        let mut free = Vec::new();
        for i in 0..n {
            if p.lower[i] == p.upper[i] {
                fixed_value[i] = Some(p.lower[i]);
            } else {
                map[i] = Some(free.len());
                free.push(i);
            }
        }
        let nx = free.len();
        let mut internal = QcqpProblem::default();
        for &i in &free {
            internal.add_variable(p.lower[i], p.upper[i], push_into(x0[i], p.lower[i], p.upper[i], opts.bound_push));
        }
        internal.objective = reduce_expr(&p.objective, &map, &fixed_value);
        let xr: Vec<f64> = internal.initial.clone();
        let mut rows = Vec::new();
        for c in &p.constraints {
            let body = reduce_expr(&c.body, &map, &fixed_value);
            if body.linear.is_empty() && body.quadratic.is_empty() {
                // constant row: nothing to optimize
                continue;
            }
            rows.push((body, c.lower, c.upper));
        }
        for (mut body, lo, hi) in rows {
            if lo == hi {
                body.constant -= lo;
            } else {
                let v = body.eval(&xr);
                let s = internal.add_variable(lo, hi, push_into(v, lo, hi, opts.bound_push));
                body.add_linear(s, -1.0);
            }
            internal.add_constraint(Constraint::equal(body, 0.0));
        }
        let nw = internal.num_variables();
        let m = internal.num_constraints();

        // gradient-based scaling at the starting point
        let unscaled = Compiled::new(&internal);
        let w0 = internal.initial.clone();
        let jac = unscaled.jacobian(&w0);
        let mut row_max = vec![0.0f64; m];
        for j in 0..nw {
            for (i, v) in jac.col(j) {
                row_max[i] = row_max[i].max(v.abs());
            }
        }
        for (r, c) in internal.constraints.iter_mut().enumerate() {
            let s = if row_max[r] > GRAD_MAX { GRAD_MAX / row_max[r] } else { 1.0 };
            scale_expr(&mut c.body, s);
        }
        let mut g = vec![0.0; nw];
        unscaled.objective_gradient(&w0, &mut g);
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax > GRAD_MAX {
            scale_expr(&mut internal.objective, GRAD_MAX / gmax);
        }
        let compiled = Compiled::new(&internal);
        let relax = |b: f64, sgn: f64| {
            if b.is_finite() {
                b + sgn * opts.bound_relax * b.abs().max(1.0)
            } else {
                b
            }
        };
        let lo = internal.lower.iter().map(|&b| relax(b, -1.0)).collect();
        let hi = internal.upper.iter().map(|&b| relax(b, 1.0)).collect();
        (
            Self {
                n_orig: n,
                free,
                fixed_value,
                nx,
                nw,
                m,
                lo,
                hi,
                compiled,
                internal,
            },
            w0,
        )
    }

    fn to_original(&self, w: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_orig];
        for i in 0..self.n_orig {
            if let Some(v) = self.fixed_value[i] {
                x[i] = v;
            }
        }
        for (r, &i) in self.free.iter().enumerate() {
            x[i] = w[r];
        }
        x
    }

    fn constraints(&self, w: &[f64], c: &mut [f64]) {
        for (k, con) in self.internal.constraints.iter().enumerate() {
            c[k] = con.body.eval(w);
        }
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.internal.objective.eval(w)
    }
}

/// Sparse KKT matrix with fixed pattern.
struct Kkt {
    nw: usize,
    m: usize,
    pattern: CscMatrix,
    hess_slot: Vec<usize>,
    diag_w_slot: Vec<usize>,
    jac_slot: Vec<usize>,
    diag_c_slot: Vec<usize>,
    ldl: Ldl,
    values: Vec<f64>,
    expected: Vec<i8>,
    last_regularized: usize,
}

impl Kkt {
    fn new(rf: &Reformulated) -> Self {
        let nw = rf.nw;
        let m = rf.m;
        let h = &rf.compiled.hess_pattern;
        let j = &rf.compiled.jac_base;
        let mut entries = Vec::with_capacity(h.nnz() + nw + j.nnz() + m);
        for col in 0..nw {
            for (row, _) in h.col(col) {
                entries.push((row, col));
            }
        }
        for i in 0..nw {
            entries.push((i, i));
        }
        for col in 0..nw {
            for (row, _) in j.col(col) {
                entries.push((col, nw + row));
            }
        }
        for r in 0..m {
            entries.push((nw + r, nw + r));
        }
        let dim = nw + m;
        let (pattern, slots) = CscMatrix::pattern_from_entries(dim, dim, entries);
        let (a, b, c) = (h.nnz(), h.nnz() + nw, h.nnz() + nw + j.nnz());
        let hess_slot = slots[..a].to_vec();
        let diag_w_slot = slots[a..b].to_vec();
        let jac_slot = slots[b..c].to_vec();
        let diag_c_slot = slots[c..].to_vec();
        let ldl = Ldl::analyze(&pattern);
        debug!("KKT dimension {dim}, nnz {}, factor nnz {}", pattern.nnz(), ldl.factor_nnz());
        let mut expected = vec![1i8; dim];
        expected[nw..].iter_mut().for_each(|s| *s = -1);
        let nnz = pattern.nnz();
        Self {
            nw,
            m,
            pattern,
            hess_slot,
            diag_w_slot,
            jac_slot,
            diag_c_slot,
            ldl,
            values: vec![0.0; nnz],
            expected,
            last_regularized: 0,
        }
    }

    fn assemble(&mut self, hess: &[f64], diag_w: &[f64], jac: &[f64], delta_c: f64) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
        for (k, &s) in self.hess_slot.iter().enumerate() {
            self.values[s] += hess[k];
        }
        for (i, &s) in self.diag_w_slot.iter().enumerate() {
            self.values[s] += diag_w[i];
        }
        for (k, &s) in self.jac_slot.iter().enumerate() {
            self.values[s] += jac[k];
        }
        for &s in &self.diag_c_slot {
            self.values[s] -= delta_c;
        }
    }

    /// Factorizes; returns whether the inertia is `(nw, m, 0)`.
    fn factor(&mut self) -> bool {
        match self.ldl.factor_signed(&self.values, &self.expected, DYN_EPS, DYN_DELTA) {
            Ok(r) => {
                self.last_regularized = r.regularized;
                r.inertia.positive == self.nw && r.inertia.negative == self.m && r.inertia.zero == 0
            }
            Err(_) => false,
        }
    }

    /// Solves with iterative refinement against the assembled matrix.
    /// Returns the relative residual of the final solution.
    fn solve(&self, rhs: &[f64], sol: &mut [f64]) -> f64 {
        sol.copy_from_slice(rhs);
        self.ldl.solve(sol);
        let dim = rhs.len();
        let rhs_norm = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        let mut resid = vec![0.0; dim];
        let mut mat = self.pattern.clone();
        mat.values.copy_from_slice(&self.values);
        let mut rel = f64::INFINITY;
        for _ in 0..MAX_REFINE {
            resid.copy_from_slice(rhs);
            let mut ax = vec![0.0; dim];
            mat.sym_upper_mul_add(sol, &mut ax);
            for i in 0..dim {
                resid[i] -= ax[i];
            }
            let r = resid.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            rel = r / rhs_norm;
            if !rel.is_finite() || rel < 1e-13 {
                break;
            }
            self.ldl.solve(&mut resid);
            for i in 0..dim {
                sol[i] += resid[i];
            }
        }
        rel
    }
}

struct State {
    w: Vec<f64>,
    lam: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
    c: Vec<f64>,
    jac: Vec<f64>,
    grad: Vec<f64>,
}

struct Solver<'a> {
    rf: Reformulated,
    kkt: Kkt,
    opts: &'a SolverOptions,
    has_lo: Vec<bool>,
    has_hi: Vec<bool>,
    delta_w_last: f64,
    hess: Vec<f64>,
    /// Variables with second derivatives; only these get the inertia
    /// correction.
    curved: Vec<bool>,
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn norm_1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

impl<'a> Solver<'a> {
    fn eval(&self, st: &mut State) {
        self.rf.constraints(&st.w, &mut st.c);
        self.rf.compiled.jacobian_values(&st.w, &mut st.jac);
        self.rf.compiled.objective_gradient(&st.w, &mut st.grad);
    }

    fn jt_mul(&self, jac: &[f64], y: &[f64], out: &mut [f64]) {
        let j = &self.rf.compiled.jac_base;
        for col in 0..self.rf.nw {
            let mut acc = 0.0;
            for p in j.col_ptr[col]..j.col_ptr[col + 1] {
                acc += jac[p] * y[j.row_idx[p]];
            }
            out[col] += acc;
        }
    }

    fn barrier(&self, w: &[f64], mu: f64) -> f64 {
        let mut phi = self.rf.objective(w);
        for i in 0..self.rf.nw {
            if self.has_lo[i] {
                phi -= mu * (w[i] - self.rf.lo[i]).ln();
            }
            if self.has_hi[i] {
                phi -= mu * (self.rf.hi[i] - w[i]).ln();
            }
        }
        phi
    }

    /// Returns (scaled optimality error for barrier `mu`, dual infeasibility,
    /// primal infeasibility).
    fn optimality_error(&self, st: &State, mu: f64) -> (f64, f64, f64) {
        let nw = self.rf.nw;
        let mut dual = st.grad.clone();
        self.jt_mul(&st.jac, &st.lam, &mut dual);
        let mut compl: f64 = 0.0;
        for i in 0..nw {
            dual[i] += st.zu[i] - st.zl[i];
            if self.has_lo[i] {
                compl = compl.max(((st.w[i] - self.rf.lo[i]) * st.zl[i] - mu).abs());
            }
            if self.has_hi[i] {
                compl = compl.max(((self.rf.hi[i] - st.w[i]) * st.zu[i] - mu).abs());
            }
        }
        let zsum = norm_1(&st.zl) + norm_1(&st.zu);
        let nz = (self.has_lo.iter().filter(|b| **b).count() + self.has_hi.iter().filter(|b| **b).count()).max(1);
        let s_d = ((norm_1(&st.lam) + zsum) / (self.rf.m + nz) as f64).max(S_MAX) / S_MAX;
        let s_c = (zsum / nz as f64).max(S_MAX) / S_MAX;
        let du = norm_inf(&dual);
        let pr = norm_inf(&st.c);
        ((du / s_d).max(pr).max(compl / s_c), du, pr)
    }

    fn original_violation(&self, w: &[f64], problem: &QcqpProblem) -> f64 {
        let x = self.rf.to_original(w);
        problem.evaluate(&x).map(|r| r.1).unwrap_or(f64::INFINITY)
    }

    /// Builds and factorizes the Newton system with inertia correction.
    fn factorize(&mut self, st: &State, sigma: &[f64], min_delta: f64) -> Option<f64> {
        self.rf.compiled.hessian_values(1.0, &st.lam, &mut self.hess);
        let mut delta_w = min_delta;
        let mut diag = sigma.to_vec();
        loop {
            for i in 0..self.rf.nx {
                if self.curved[i] {
                    diag[i] = sigma[i] + delta_w;
                }
            }
            self.kkt.assemble(&self.hess, &diag, &st.jac, DELTA_C);
            if self.kkt.factor() {
                if delta_w > 0.0 {
                    self.delta_w_last = delta_w;
                }
                return Some(delta_w);
            }
            delta_w = if delta_w == 0.0 {
                if self.delta_w_last == 0.0 {
                    DELTA_W_INIT
                } else {
                    (self.delta_w_last / 3.0).max(DELTA_W_MIN)
                }
            } else if self.delta_w_last == 0.0 {
                delta_w * 100.0
            } else {
                delta_w * 8.0
            };
            if delta_w > DELTA_W_MAX {
                return None;
            }
        }
    }

    fn sigma(&self, st: &State) -> Vec<f64> {
        (0..self.rf.nw)
            .map(|i| {
                let mut s = 0.0;
                if self.has_lo[i] {
                    s += st.zl[i] / (st.w[i] - self.rf.lo[i]);
                }
                if self.has_hi[i] {
                    s += st.zu[i] / (self.rf.hi[i] - st.w[i]);
                }
                s
            })
            .collect()
    }

    fn barrier_gradient(&self, st: &State, mu: f64) -> Vec<f64> {
        let mut g = st.grad.clone();
        for i in 0..self.rf.nw {
            if self.has_lo[i] {
                g[i] -= mu / (st.w[i] - self.rf.lo[i]);
            }
            if self.has_hi[i] {
                g[i] += mu / (self.rf.hi[i] - st.w[i]);
            }
        }
        g
    }

    fn max_step(&self, w: &[f64], dw: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for i in 0..self.rf.nw {
            if self.has_lo[i] && dw[i] < 0.0 {
                alpha = alpha.min(-tau * (w[i] - self.rf.lo[i]) / dw[i]);
            }
            if self.has_hi[i] && dw[i] > 0.0 {
                alpha = alpha.min(tau * (self.rf.hi[i] - w[i]) / dw[i]);
            }
        }
        alpha.max(0.0)
    }

    fn max_dual_step(z: &[f64], dz: &[f64], active: &[bool], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for i in 0..z.len() {
            if active[i] && dz[i] < 0.0 {
                alpha = alpha.min(-tau * z[i] / dz[i]);
            }
        }
        alpha.max(0.0)
    }

    /// Least-squares estimate of the constraint multipliers.
    fn multiplier_estimate(&mut self, st: &State) -> Vec<f64> {
        let nw = self.rf.nw;
        let m = self.rf.m;
        if m == 0 {
            return Vec::new();
        }
        let zero_h = vec![0.0; self.hess.len()];
        let ones = vec![1.0; nw];
        self.kkt.assemble(&zero_h, &ones, &st.jac, DELTA_C);
        if !self.kkt.factor() {
            return vec![0.0; m];
        }
        let mut rhs = vec![0.0; nw + m];
        for i in 0..nw {
            rhs[i] = -(st.grad[i] - st.zl[i] + st.zu[i]);
        }
        let mut sol = vec![0.0; nw + m];
        self.kkt.solve(&rhs, &mut sol);
        let lam = sol[nw..].to_vec();
        if norm_inf(&lam) > 1e3 || lam.iter().any(|v| !v.is_finite()) {
            vec![0.0; m]
        } else {
            lam
        }
    }

    /// Levenberg-Marquardt steps on `||c(w)||²` that keep `w` interior.
    /// Returns true once the iterate is acceptable to the filter with a
    /// sufficiently reduced constraint violation.
    fn restore(
        &mut self,
        st: &mut State,
        mu: f64,
        filter: &[(f64, f64)],
        theta_entry: f64,
    ) -> bool {
        let nw = self.rf.nw;
        let m = self.rf.m;
        let tau = TAU_MIN.max(1.0 - mu);
        let mut zeta = 1e-4;
        let zero_h = vec![0.0; self.hess.len()];
        for it in 0..100 {
            self.eval(st);
            let theta = norm_1(&st.c);
            let phi = self.barrier(&st.w, mu);
            if theta <= 0.9 * theta_entry && acceptable(filter, theta, phi) {
                trace!("restoration succeeded after {it} steps");
                return true;
            }
            let sigma = self.sigma(st);
            let diag: Vec<f64> = sigma.iter().map(|s| zeta * (1.0 + s)).collect();
            self.kkt.assemble(&zero_h, &diag, &st.jac, 1.0);
            if !self.kkt.factor() {
                zeta *= 10.0;
                if zeta > 1e10 {
                    return false;
                }
                continue;
            }
            let mut rhs = vec![0.0; nw + m];
            for r in 0..m {
                rhs[nw + r] = -st.c[r];
            }
            let mut sol = vec![0.0; nw + m];
            self.kkt.solve(&rhs, &mut sol);
            let dw = &sol[..nw];
            let alpha_max = self.max_step(&st.w, dw, tau);
            let mut alpha = alpha_max;
            let norm2 = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>();
            let base = norm2(&st.c);
            let mut wt = vec![0.0; nw];
            let mut ct = vec![0.0; m];
            let mut accepted = false;
            while alpha > 1e-12 {
                for i in 0..nw {
                    wt[i] = st.w[i] + alpha * dw[i];
                }
                self.rf.constraints(&wt, &mut ct);
                if norm2(&ct) < (1.0 - 1e-4 * alpha) * base {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                zeta *= 10.0;
                if zeta > 1e10 {
                    return false;
                }
                continue;
            }
            st.w.copy_from_slice(&wt);
            // keep bound multipliers consistent with the moved iterate
            for i in 0..nw {
                if self.has_lo[i] {
                    st.zl[i] = st.zl[i].clamp(
                        mu / (KAPPA_SIGMA * (st.w[i] - self.rf.lo[i])),
                        KAPPA_SIGMA * mu / (st.w[i] - self.rf.lo[i]),
                    );
                }
                if self.has_hi[i] {
                    st.zu[i] = st.zu[i].clamp(
                        mu / (KAPPA_SIGMA * (self.rf.hi[i] - st.w[i])),
                        KAPPA_SIGMA * mu / (self.rf.hi[i] - st.w[i]),
                    );
                }
            }
            if alpha == alpha_max {
                zeta = (zeta / 10.0).max(1e-10);
            }
        }
        false
    }
}

fn acceptable(filter: &[(f64, f64)], theta: f64, phi: f64) -> bool {
    filter.iter().all(|&(tf, pf)| theta < tf || phi < pf)
}

/// Solves the program from the configured starting point.
pub fn solve(problem: &QcqpProblem, opts: &SolverOptions) -> Result<SolveOutcome, SolverError> {
    problem.validate()?;
    if !(opts.tolerance > 0.0) {
        return Err(SolverError::Options("tolerance must be positive".into()));
    }
    let start = Instant::now();
    let x0 = match &opts.initialization {
        Initialization::ProblemStart => problem.initial.clone(),
        Initialization::WarmStart(x) => {
            if x.len() != problem.num_variables() {
                return Err(ProblemError::Dimension { expected: problem.num_variables(), got: x.len() }.into());
            }
            x.clone()
        }
    };
    // a feasible warm start bounds the objective we are allowed to return
    let start_eval = problem.evaluate(&x0)?;
    let incumbent = if start_eval.1 <= opts.tolerance { Some((x0.clone(), start_eval.0)) } else { None };

    let (rf, w0) = Reformulated::new(problem, &x0, opts);
    let nw = rf.nw;
    let m = rf.m;
    let has_lo: Vec<bool> = rf.lo.iter().map(|v| v.is_finite()).collect();
    let has_hi: Vec<bool> = rf.hi.iter().map(|v| v.is_finite()).collect();
    let kkt = Kkt::new(&rf);
    let hess_nnz = rf.compiled.hess_pattern.nnz();
    let mut curved = vec![false; nw];
    for e in std::iter::once(&rf.internal.objective).chain(rf.internal.constraints.iter().map(|c| &c.body)) {
        for &(i, j, _) in &e.quadratic {
            curved[i] = true;
            curved[j] = true;
        }
    }
    let mut solver = Solver {
        rf,
        kkt,
        opts,
        has_lo,
        has_hi,
        delta_w_last: 0.0,
        hess: vec![0.0; hess_nnz],
        curved,
    };
    let mut st = State {
        w: w0,
        lam: vec![0.0; m],
        zl: solver.has_lo.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        zu: solver.has_hi.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        c: vec![0.0; m],
        jac: Vec::new(),
        grad: vec![0.0; nw],
    };
    solver.eval(&mut st);
    st.lam = solver.multiplier_estimate(&st);

    let mut mu = opts.mu_init;
    let mu_min = opts.tolerance / 10.0;
    let mut filter: Vec<(f64, f64)> = Vec::new();
    let theta0 = norm_1(&st.c);
    let theta_max = 1e4 * theta0.max(1.0);
    let theta_min = 1e-4 * theta0.max(1.0);
    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut acceptable_count = 0;
    let mut iterations = 0;
    let mut last_alpha = 0.0;
    let mut last_reg = 0.0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        if let Some(limit) = opts.time_limit {
            if start.elapsed().as_secs_f64() > limit {
                status = SolveStatus::TimeLimit;
                break;
            }
        }
        let (e0, du, pr) = solver.optimality_error(&st, 0.0);
        let viol = solver.original_violation(&st.w, problem);
        if opts.verbosity >= 1 {
            log.push(IterationRecord {
                iter,
                objective: problem.objective.eval(&solver.rf.to_original(&st.w)),
                inf_pr: pr,
                inf_du: du,
                mu,
                step: last_alpha,
                regularization: last_reg,
            });
        }
        trace!("iter {iter}: e0 {e0:.3e} du {du:.3e} pr {pr:.3e} mu {mu:.3e} alpha {last_alpha:.3e}");
        if !e0.is_finite() {
            status = SolveStatus::NumericalFailure;
            break;
        }
        if e0 <= opts.tolerance && viol <= opts.tolerance {
            status = SolveStatus::OptimalLocal;
            break;
        }
        if e0 <= opts.acceptable_tolerance && viol <= opts.tolerance {
            acceptable_count += 1;
            if acceptable_count >= opts.acceptable_iter {
                status = SolveStatus::OptimalLocal;
                break;
            }
        } else {
            acceptable_count = 0;
        }
        if iter == opts.max_iter {
            break;
        }

        // barrier parameter update
        loop {
            let (emu, _, _) = solver.optimality_error(&st, mu);
            if emu <= KAPPA_EPS * mu && mu > mu_min {
                mu = mu_min.max((KAPPA_MU * mu).min(mu.powf(THETA_MU)));
                filter.clear();
            } else {
                break;
            }
        }
        let tau = TAU_MIN.max(1.0 - mu);

        // Newton step
        let sigma = solver.sigma(&st);
        let Some(mut delta_w) = solver.factorize(&st, &sigma, 0.0) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let grad_phi = solver.barrier_gradient(&st, mu);
        let mut rhs = vec![0.0; nw + m];
        {
            let mut r1 = grad_phi.clone();
            solver.jt_mul(&st.jac, &st.lam, &mut r1);
            for i in 0..nw {
                rhs[i] = -r1[i];
            }
            for r in 0..m {
                rhs[nw + r] = -st.c[r];
            }
        }
        let mut sol = vec![0.0; nw + m];
        let mut rel = solver.kkt.solve(&rhs, &mut sol);
        // inaccurate solve: perturb the Hessian block until refinement converges
        let mut retries = 0;
        while !(rel <= REFINE_TOL) && retries < 6 {
            let floor = if delta_w == 0.0 { DELTA_W_INIT } else { delta_w * 10.0 };
            match solver.factorize(&st, &sigma, floor) {
                Some(d) => delta_w = d,
                None => break,
            }
            rel = solver.kkt.solve(&rhs, &mut sol);
            retries += 1;
        }
        last_reg = delta_w;
        if sol.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::NumericalFailure;
            break;
        }
        let dw: Vec<f64> = sol[..nw].to_vec();
        let dlam: Vec<f64> = sol[nw..].to_vec();
        let mut dzl = vec![0.0; nw];
        let mut dzu = vec![0.0; nw];
        for i in 0..nw {
            if solver.has_lo[i] {
                let s = st.w[i] - solver.rf.lo[i];
                dzl[i] = mu / s - st.zl[i] - st.zl[i] / s * dw[i];
            }
            if solver.has_hi[i] {
                let s = solver.rf.hi[i] - st.w[i];
                dzu[i] = mu / s - st.zu[i] + st.zu[i] / s * dw[i];
            }
        }
        let alpha_max = solver.max_step(&st.w, &dw, tau);
        let alpha_z = Solver::max_dual_step(&st.zl, &dzl, &solver.has_lo, tau)
            .min(Solver::max_dual_step(&st.zu, &dzu, &solver.has_hi, tau));

        // filter line search
        let theta = norm_1(&st.c);
        let phi = solver.barrier(&st.w, mu);
        let gpd: f64 = grad_phi.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let alpha_min = if gpd < 0.0 {
            GAMMA_ALPHA
                * GAMMA_THETA
                    .min(GAMMA_PHI * theta / -gpd)
                    .min(DELTA_SWITCH * theta.powf(S_THETA) / (-gpd).powf(S_PHI))
        } else {
            GAMMA_ALPHA * GAMMA_THETA
        };
        let mut alpha = alpha_max;
        let mut wt = vec![0.0; nw];
        let mut ct = vec![0.0; m];
        let mut accepted: Option<(f64, bool)> = None;
        let check = |theta_t: f64, phi_t: f64, alpha: f64, filter: &[(f64, f64)]| -> Option<bool> {
            if !theta_t.is_finite() || !phi_t.is_finite() || theta_t > theta_max {
                return None;
            }
            if !acceptable(filter, theta_t, phi_t) {
                return None;
            }
            let switching = gpd < 0.0 && alpha * (-gpd).powf(S_PHI) > DELTA_SWITCH * theta.powf(S_THETA);
            if theta <= theta_min && switching {
                if phi_t <= phi + ETA_PHI * alpha * gpd {
                    return Some(true);
                }
                None
            } else if theta_t <= (1.0 - GAMMA_THETA) * theta || phi_t <= phi - GAMMA_PHI * theta {
                Some(false)
            } else {
                None
            }
        };
        let mut first = true;
        while alpha >= alpha_min {
            for i in 0..nw {
                wt[i] = st.w[i] + alpha * dw[i];
            }
            solver.rf.constraints(&wt, &mut ct);
            let theta_t = norm_1(&ct);
            let phi_t = solver.barrier(&wt, mu);
            if let Some(ftype) = check(theta_t, phi_t, alpha, &filter) {
                accepted = Some((alpha, ftype));
                break;
            }
            if first && theta_t >= theta {
                // second-order correction
                let mut c_soc: Vec<f64> = (0..m).map(|r| alpha * st.c[r] + ct[r]).collect();
                let mut theta_old = theta;
                let mut theta_soc = theta_t;
                for _ in 0..MAX_SOC {
                    if theta_soc > KAPPA_SOC * theta_old && theta_old != theta {
                        break;
                    }
                    let mut rhs_soc = rhs.clone();
                    for r in 0..m {
                        rhs_soc[nw + r] = -c_soc[r];
                    }
                    let mut sol_soc = vec![0.0; nw + m];
                    solver.kkt.solve(&rhs_soc, &mut sol_soc);
                    let dsoc = &sol_soc[..nw];
                    let a_soc = solver.max_step(&st.w, dsoc, tau);
                    let mut ws = vec![0.0; nw];
                    for i in 0..nw {
                        ws[i] = st.w[i] + a_soc * dsoc[i];
                    }
                    let mut cs = vec![0.0; m];
                    solver.rf.constraints(&ws, &mut cs);
                    let th_s = norm_1(&cs);
                    let ph_s = solver.barrier(&ws, mu);
                    if let Some(ftype) = check(th_s, ph_s, alpha, &filter) {
                        wt.copy_from_slice(&ws);
                        accepted = Some((a_soc, ftype));
                        break;
                    }
                    theta_old = theta_soc;
                    theta_soc = th_s;
                    for r in 0..m {
                        c_soc[r] = a_soc * c_soc[r] + cs[r];
                    }
                }
                if accepted.is_some() {
                    break;
                }
            }
            first = false;
            alpha *= 0.5;
        }

        match accepted {
            Some((a, ftype)) => {
                if !ftype {
                    filter.push(((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta));
                }
                st.w.copy_from_slice(&wt);
                for r in 0..m {
                    st.lam[r] += a * dlam[r];
                }
                for i in 0..nw {
                    st.zl[i] += alpha_z * dzl[i];
                    st.zu[i] += alpha_z * dzu[i];
                }
                last_alpha = a;
            }
            None => {
                // soft restoration: accept the full step if it reduces the
                // primal-dual error
                let (e_cur, _, _) = solver.optimality_error(&st, mu);
                let mut trial = State {
                    w: st.w.iter().zip(&dw).map(|(w, d)| w + alpha_max * d).collect(),
                    lam: st.lam.iter().zip(&dlam).map(|(l, d)| l + alpha_max * d).collect(),
                    zl: st.zl.iter().zip(&dzl).map(|(z, d)| z + alpha_z * d).collect(),
                    zu: st.zu.iter().zip(&dzu).map(|(z, d)| z + alpha_z * d).collect(),
                    c: vec![0.0; m],
                    jac: Vec::new(),
                    grad: vec![0.0; nw],
                };
                solver.eval(&mut trial);
                let (e_trial, _, _) = solver.optimality_error(&trial, mu);
                let theta_t = norm_1(&trial.c);
                if e_trial.is_finite() && e_trial <= 0.9999 * e_cur && theta_t <= theta_max {
                    filter.push(((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta));
                    st = trial;
                    last_alpha = alpha_max;
                } else {
                    debug!("iter {iter}: line search failed, entering restoration (theta {theta:.3e})");
                    filter.push((theta, phi));
                    if !solver.restore(&mut st, mu, &filter, theta) {
                        solver.eval(&mut st);
                        let th = norm_1(&st.c);
                        status = if th > 1e-4 { SolveStatus::InfeasibleDetected } else { SolveStatus::NumericalFailure };
                        break;
                    }
                    st.lam = solver.multiplier_estimate(&st);
                    last_alpha = 0.0;
                }
            }
        }
        // bound multiplier safeguard
        for i in 0..nw {
            if solver.has_lo[i] {
                let s = st.w[i] - solver.rf.lo[i];
                st.zl[i] = st.zl[i].clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
            }
            if solver.has_hi[i] {
                let s = solver.rf.hi[i] - st.w[i];
                st.zu[i] = st.zu[i].clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
            }
        }
        solver.eval(&mut st);
    }

    let mut point = solver.rf.to_original(&st.w);
    for (i, v) in point.iter_mut().enumerate() {
        *v = v.clamp(problem.lower[i], problem.upper[i]);
    }
    let (mut objective, mut max_violation) = problem.evaluate(&point)?;
    if let Some((x_inc, f_inc)) = incumbent {
        if objective > f_inc + opts.tolerance || max_violation > opts.tolerance {
            point = x_inc;
            objective = f_inc;
            max_violation = start_eval.1;
        }
    }
    if status == SolveStatus::OptimalLocal && max_violation > opts.tolerance {
        status = SolveStatus::NumericalFailure;
    }
    debug!("{status:?} after {iterations} iterations, objective {objective:.6e}, violation {max_violation:.3e}");
    let _ = solver.opts;
    let _ = solver.rf.nx;
    Ok(SolveOutcome {
        status,
        point,
        objective,
        max_violation,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SolverOptions {
        SolverOptions { verbosity: 1, ..SolverOptions::default() }
    }

    #[test]
    fn absolute_deviation_epigraph() {
        // min |x - 1| + |x - 3| + |y - 2|/0.5 with y = x - 1
        let mut p = QcqpProblem::default();
        let x = p.add_variable(-10.0, 10.0, 0.0);
        let y = p.add_variable(f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let mut obj = Expr::new();
        for (v, z, s) in [(x, 1.0, 1.0), (x, 3.0, 1.0), (y, 2.0, 0.5)] {
            let r = p.add_variable(f64::NEG_INFINITY, f64::INFINITY, 0.0);
            obj.add_linear(r, 1.0);
            let mut up = Expr::var(r);
            up.add_linear(v, -1.0 / s).add_constant(z / s);
            p.add_constraint(Constraint::at_least(up, 0.0));
            let mut lo = Expr::var(r);
            lo.add_linear(v, 1.0 / s).add_constant(-z / s);
            p.add_constraint(Constraint::at_least(lo, 0.0));
        }
        let mut link = Expr::var(y);
        link.add_linear(x, -1.0).add_constant(1.0);
        p.add_constraint(Constraint::equal(link, 0.0));
        p.objective = obj;
        let out = solve(&p, &quiet()).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        // x = 3 gives 2 + 0; anything else is worse
        assert!((out.objective - 2.0).abs() < 1e-6, "{}", out.objective);
        assert!((out.point[x] - 3.0).abs() < 1e-4, "{:?}", out.point);
        assert!(out.max_violation <= 1e-7);
        assert!(!out.log.is_empty());
    }

    #[test]
    fn bilinear_objective_with_equality() {
        let mut p = QcqpProblem::default();
        let x = p.add_variable(0.0, 2.0, 0.7);
        let y = p.add_variable(0.0, 2.0, 0.4);
        let mut obj = Expr::new();
        obj.add_quadratic(x, y, 1.0);
        p.objective = obj;
        let mut c = Expr::var(x);
        c.add_linear(y, 1.0);
        p.add_constraint(Constraint::equal(c, 2.0));
        let out = solve(&p, &quiet()).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        let (a, b) = (out.point[x], out.point[y]);
        assert!((a + b - 2.0).abs() < 1e-7);
        let corner = a.min(b) < 1e-5;
        let centre = (a - 1.0).abs() < 1e-4;
        assert!(corner || centre, "{a} {b}");
    }

    #[test]
    fn nonconvex_quadratic_constraint() {
        // min x² + y²  s.t. x y >= 1, x, y >= 0
        let mut p = QcqpProblem::default();
        let x = p.add_variable(0.0, f64::INFINITY, 3.0);
        let y = p.add_variable(0.0, f64::INFINITY, 0.2);
        let mut obj = Expr::new();
        obj.add_quadratic(x, x, 1.0).add_quadratic(y, y, 1.0);
        p.objective = obj;
        let mut c = Expr::new();
        c.add_quadratic(x, y, 1.0);
        p.add_constraint(Constraint::at_least(c, 1.0));
        let out = solve(&p, &quiet()).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        assert!((out.objective - 2.0).abs() < 1e-6);
        assert!((out.point[x] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn fixed_variables_are_eliminated() {
        let mut p = QcqpProblem::default();
        let x = p.add_variable(1.5, 1.5, 0.0);
        let y = p.add_variable(-5.0, 5.0, 0.0);
        let mut obj = Expr::new();
        obj.add_quadratic(y, y, 1.0).add_quadratic(x, y, -2.0);
        p.objective = obj;
        let out = solve(&p, &quiet()).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        assert_eq!(out.point[x], 1.5);
        assert!((out.point[y] - 1.5).abs() < 1e-5);
    }

    #[test]
    fn detects_infeasibility() {
        let mut p = QcqpProblem::default();
        let x = p.add_variable(f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let y = p.add_variable(f64::NEG_INFINITY, f64::INFINITY, 0.0);
        p.objective = Expr::var(x);
        let mut disc = Expr::new();
        disc.add_quadratic(x, x, 1.0).add_quadratic(y, y, 1.0);
        p.add_constraint(Constraint::at_most(disc, 1.0));
        let mut line = Expr::var(x);
        line.add_linear(y, 1.0);
        p.add_constraint(Constraint::at_least(line, 3.0));
        let out = solve(&p, &SolverOptions { max_iter: 500, ..quiet() }).unwrap();
        assert_ne!(out.status, SolveStatus::OptimalLocal);
        assert!(out.max_violation > 1e-3);
    }

    #[test]
    fn warm_start_at_optimum_is_kept() {
        let mut p = QcqpProblem::default();
        let x = p.add_variable(0.0, 4.0, 0.5);
        let mut obj = Expr::new();
        obj.add_quadratic(x, x, 1.0).add_linear(x, -4.0);
        p.objective = obj;
        let opts = SolverOptions { initialization: Initialization::WarmStart(vec![2.0]), ..quiet() };
        let out = solve(&p, &opts).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        assert!(out.objective <= -4.0 + 1e-7);
    }

    #[test]
    fn iteration_log_csv_has_header() {
        let rec = IterationRecord { iter: 0, objective: 1.0, inf_pr: 0.0, inf_du: 0.5, mu: 0.1, step: 0.0, regularization: 0.0 };
        let mut buf = Vec::new();
        write_iteration_log(&[rec], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iter,objective,inf_pr,inf_du,mu,step,regularization\n0,"));
    }

    #[test]
    fn rejects_bad_warm_start_dimension() {
        let mut p = QcqpProblem::default();
        p.add_variable(0.0, 1.0, 0.5);
        let opts = SolverOptions { initialization: Initialization::WarmStart(vec![]), ..quiet() };
        assert!(matches!(solve(&p, &opts), Err(SolverError::Problem(ProblemError::Dimension { .. }))));
    }
}
