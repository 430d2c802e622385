//! Impedance parameterizations: length scaling of known per-length
//! matrices, and free matrix entries with linear structural constraints.

use impest_nlp::{Constraint, Expr, QcqpProblem};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImpedanceError {
    #[error("alpha bounds out of order: {0}")]
    AlphaOrder(String),
    #[error("branch {0}: length bounds invalid")]
    LengthBounds(String),
    #[error("branch {0}: no per-length impedance")]
    MissingLinecode(String),
}

/// `alpha2 · X ≤ R ≤ alpha1 · X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XrBounds {
    pub alpha1: f64,
    pub alpha2: f64,
}

/// `alpha4 · Z_pq ≤ Z_pp ≤ alpha3 · Z_pq`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfMutualBounds {
    pub alpha3: f64,
    pub alpha4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBounds {
    /// single-phase (service) branches
    pub service: XrBounds,
    /// diagonal entries of multi-phase branches
    pub self_entries: XrBounds,
    /// off-diagonal entries of multi-phase branches
    pub mutual_entries: XrBounds,
    pub ratio_x: SelfMutualBounds,
    pub ratio_r: SelfMutualBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScope {
    TransposedDefaults,
    LooseUntransposed,
}

impl AlphaBounds {
    pub fn check(&self) -> Result<(), ImpedanceError> {
        let xr = [("service", self.service), ("self", self.self_entries), ("mutual", self.mutual_entries)];
        for (name, b) in xr {
            if !(b.alpha1 >= b.alpha2 && b.alpha2 >= 1.0) {
                return Err(ImpedanceError::AlphaOrder(format!("{name}: alpha1 {} alpha2 {}", b.alpha1, b.alpha2)));
            }
        }
        for (name, b) in [("x", self.ratio_x), ("r", self.ratio_r)] {
            if !(b.alpha3 >= b.alpha4 && b.alpha4 >= 1.0) {
                return Err(ImpedanceError::AlphaOrder(format!("ratio {name}: alpha3 {} alpha4 {}", b.alpha3, b.alpha4)));
            }
        }
        Ok(())
    }

    /// True when every ratio interval of `self` contains the one of `other`.
    pub fn envelops(&self, other: &AlphaBounds) -> bool {
        let xr = |a: XrBounds, b: XrBounds| a.alpha1 >= b.alpha1 && a.alpha2 <= b.alpha2;
        let sm = |a: SelfMutualBounds, b: SelfMutualBounds| a.alpha3 >= b.alpha3 && a.alpha4 <= b.alpha4;
        xr(self.service, other.service)
            && xr(self.self_entries, other.self_entries)
            && xr(self.mutual_entries, other.mutual_entries)
            && sm(self.ratio_x, other.ratio_x)
            && sm(self.ratio_r, other.ratio_r)
    }
}

/// Ratio bounds for transposed cable data, or the widened bounds used for
/// untransposed matrices (upper ratios ×100, lower ×0.01, floored at 1).
pub fn default_alphas(scope: AlphaScope) -> AlphaBounds {
    let transposed = AlphaBounds {
        service: XrBounds { alpha1: 16.0, alpha2: 8.96 },
        self_entries: XrBounds { alpha1: 35.0, alpha2: 1.1 },
        mutual_entries: XrBounds { alpha1: 130.0, alpha2: 2.0 },
        // self/mutual ratio ranges: X in [14, 50], R in [2, 70]
        ratio_x: SelfMutualBounds { alpha3: 50.0, alpha4: 14.0 },
        ratio_r: SelfMutualBounds { alpha3: 70.0, alpha4: 2.0 },
    };
    match scope {
        AlphaScope::TransposedDefaults => transposed,
        AlphaScope::LooseUntransposed => {
            let t = transposed;
            let hi_xr = [t.service.alpha1, t.self_entries.alpha1, t.mutual_entries.alpha1].into_iter().fold(0.0, f64::max);
            let lo_xr = [t.service.alpha2, t.self_entries.alpha2, t.mutual_entries.alpha2].into_iter().fold(f64::INFINITY, f64::min);
            let hi_sm = t.ratio_x.alpha3.max(t.ratio_r.alpha3);
            let lo_sm = t.ratio_x.alpha4.min(t.ratio_r.alpha4);
            let xr = XrBounds { alpha1: 100.0 * hi_xr, alpha2: (0.01 * lo_xr).max(1.0) };
            let sm = SelfMutualBounds { alpha3: 100.0 * hi_sm, alpha4: (0.01 * lo_sm).max(1.0) };
            AlphaBounds { service: xr, self_entries: xr, mutual_entries: xr, ratio_x: sm, ratio_r: sm }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImeVariant {
    Transposed,
    Untransposed,
    Diagonal,
}

impl ImeVariant {
    /// Free scalars for a branch with `n` phases.
    pub fn free_scalars(self, n: usize) -> usize {
        if n == 1 {
            return 2;
        }
        match self {
            ImeVariant::Transposed => 4,
            ImeVariant::Untransposed => n * (n + 1),
            ImeVariant::Diagonal => 2 * n,
        }
    }
}

/// Which structural constraint families are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImeToggles {
    pub xr_ratio: bool,
    pub diagonal_dominance: bool,
    pub mutual_ratio: bool,
    /// Strictly positive lower bound on every free entry (p.u.) instead of
    /// plain nonnegativity.
    pub strict_lower: Option<f64>,
}

impl Default for ImeToggles {
    fn default() -> Self {
        Self { xr_ratio: true, diagonal_dominance: true, mutual_ratio: true, strict_lower: None }
    }
}

/// An affine function of problem variables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Affine {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn var(v: usize) -> Self {
        Self { constant: 0.0, terms: vec![(v, 1.0)] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, a)| a * x[v]).sum::<f64>()
    }

    /// Adds `coef · self · x[var]` to `e`.
    pub fn add_product(&self, e: &mut Expr, var: usize, coef: f64) {
        e.add_linear(var, coef * self.constant);
        for &(v, a) in &self.terms {
            e.add_quadratic(v, var, coef * a);
        }
    }
}

/// Impedance of one branch (p.u.) as affine functions of the decision
/// variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParam {
    pub r: Vec<Vec<Affine>>,
    pub x: Vec<Vec<Affine>>,
    /// Variables owned by this branch, with a label such as `r_ab`.
    pub vars: Vec<(String, usize)>,
    pub length_var: Option<usize>,
    /// Number of structural constraint rows emitted.
    pub rows: usize,
}

impl BranchParam {
    pub fn fixed(r: &[Vec<f64>], x: &[Vec<f64>]) -> Self {
        let m = |a: &[Vec<f64>]| a.iter().map(|row| row.iter().map(|&v| Affine::constant(v)).collect()).collect();
        Self { r: m(r), x: m(x), vars: Vec::new(), length_var: None, rows: 0 }
    }

    pub fn values(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = |a: &Vec<Vec<Affine>>| a.iter().map(|row| row.iter().map(|e| e.eval(x)).collect()).collect();
        (m(&self.r), m(&self.x))
    }
}

/// Length-estimation data of one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LleParams {
    /// per-unit-length matrices, p.u. per metre
    pub r_per_m: Vec<Vec<f64>>,
    pub x_per_m: Vec<Vec<f64>>,
    pub guess_m: f64,
    pub lower_m: f64,
    pub upper_m: f64,
}

impl LleParams {
    pub fn check(&self, branch: &str) -> Result<(), ImpedanceError> {
        let ok = self.lower_m >= 0.0 && self.lower_m <= self.guess_m && self.guess_m <= self.upper_m && self.guess_m > 0.0;
        if !ok {
            return Err(ImpedanceError::LengthBounds(branch.to_string()));
        }
        Ok(())
    }

    /// Normalized prior residual `3 (ℓ - ℓ̂) / (ℓ_hi - ℓ_lo)` as an affine
    /// function of the length ratio variable `ℓ / ℓ̂`.
    pub fn residual(&self, ratio_var: usize) -> Affine {
        let w = 3.0 * self.guess_m / (self.upper_m - self.lower_m);
        Affine { constant: -w, terms: vec![(ratio_var, w)] }
    }
}

/// Adds the length-ratio variable `ℓ / ℓ̂` and returns the branch
/// impedance as `ratio · ℓ̂ · Z_nom`.
pub fn parameterize_lle(p: &mut QcqpProblem, params: &LleParams, branch: &str) -> Result<BranchParam, ImpedanceError> {
    params.check(branch)?;
    let g = params.guess_m;
    let v = p.add_variable(params.lower_m / g, params.upper_m / g, 1.0);
    let m = |a: &Vec<Vec<f64>>| {
        a.iter().map(|row| row.iter().map(|&z| Affine { constant: 0.0, terms: vec![(v, z * g)] }).collect()).collect()
    };
    Ok(BranchParam { r: m(&params.r_per_m), x: m(&params.x_per_m), vars: vec![("length_ratio".into(), v)], length_var: Some(v), rows: 0 })
}

/// Entry bounds (p.u.) for free impedance variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryBounds {
    pub r_max: f64,
    pub x_max: f64,
}

const LABEL: [char; 3] = ['a', 'b', 'c'];

/// Adds the free entries of one branch for an IME variant and emits its
/// structural constraints.
pub fn parameterize_ime(
    p: &mut QcqpProblem,
    n: usize,
    variant: ImeVariant,
    alphas: &AlphaBounds,
    toggles: &ImeToggles,
    bounds: EntryBounds,
) -> Result<BranchParam, ImpedanceError> {
    alphas.check()?;
    let lo = toggles.strict_lower.unwrap_or(0.0).max(0.0);
    let offset = |hi: f64| 1e-4 * (hi - lo);
    let mut vars = Vec::new();
    let mut new_var = |p: &mut QcqpProblem, name: String, hi: f64| {
        let v = p.add_variable(lo, hi, 0.5 * (lo + hi) + offset(hi));
        vars.push((name, v));
        v
    };
    let mut rv = vec![vec![None; n]; n];
    let mut xv = vec![vec![None; n]; n];
    let mut fixed_zero = Vec::new();
    for pi in 0..n {
        for qi in pi..n {
            let tag = format!("{}{}", LABEL[pi], LABEL[qi]);
            let (r, x) = match variant {
                _ if n == 1 => (new_var(p, format!("r_{tag}"), bounds.r_max), new_var(p, format!("x_{tag}"), bounds.x_max)),
                ImeVariant::Transposed => {
                    if pi == 0 && qi <= 1 {
                        (new_var(p, format!("r_{tag}"), bounds.r_max), new_var(p, format!("x_{tag}"), bounds.x_max))
                    } else if pi == qi {
                        (rv[0][0].unwrap(), xv[0][0].unwrap())
                    } else {
                        (rv[0][1].unwrap(), xv[0][1].unwrap())
                    }
                }
                ImeVariant::Untransposed => {
                    (new_var(p, format!("r_{tag}"), bounds.r_max), new_var(p, format!("x_{tag}"), bounds.x_max))
                }
                ImeVariant::Diagonal => {
                    if pi == qi {
                        (new_var(p, format!("r_{tag}"), bounds.r_max), new_var(p, format!("x_{tag}"), bounds.x_max))
                    } else {
                        let r = p.add_variable(0.0, 0.0, 0.0);
                        let x = p.add_variable(0.0, 0.0, 0.0);
                        fixed_zero.push((format!("r_{tag}"), r));
                        fixed_zero.push((format!("x_{tag}"), x));
                        (r, x)
                    }
                }
            };
            rv[pi][qi] = Some(r);
            rv[qi][pi] = Some(r);
            xv[pi][qi] = Some(x);
            xv[qi][pi] = Some(x);
        }
    }
    let rv: Vec<Vec<usize>> = rv.into_iter().map(|row| row.into_iter().map(Option::unwrap).collect()).collect();
    let xv: Vec<Vec<usize>> = xv.into_iter().map(|row| row.into_iter().map(Option::unwrap).collect()).collect();
    vars.extend(fixed_zero);

    // distinct free (p, q) pairs with p <= q
    let mut distinct: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for pi in 0..n {
        for qi in pi..n {
            if variant == ImeVariant::Diagonal && pi != qi {
                continue;
            }
            if seen.insert(rv[pi][qi]) {
                distinct.push((pi, qi));
            }
        }
    }
    let start = p.num_constraints();
    let ge0 = |p: &mut QcqpProblem, terms: &[(usize, f64)]| {
        let mut e = Expr::new();
        for &(v, a) in terms {
            e.add_linear(v, a);
        }
        p.add_constraint(Constraint::at_least(e, 0.0));
    };
    if toggles.xr_ratio {
        for &(pi, qi) in &distinct {
            let b = if n == 1 {
                alphas.service
            } else if pi == qi {
                alphas.self_entries
            } else {
                alphas.mutual_entries
            };
            let (r, x) = (rv[pi][qi], xv[pi][qi]);
            ge0(p, &[(r, 1.0), (x, -b.alpha2)]);
            ge0(p, &[(x, b.alpha1), (r, -1.0)]);
        }
    }
    if n > 1 && variant != ImeVariant::Diagonal {
        let rows: Vec<usize> = if variant == ImeVariant::Transposed { vec![0] } else { (0..n).collect() };
        if toggles.diagonal_dominance {
            for m in [&rv, &xv] {
                for &pi in &rows {
                    let mut terms = vec![(m[pi][pi], 1.0)];
                    for qi in (0..n).filter(|&q| q != pi) {
                        terms.push((m[pi][qi], -1.0));
                    }
                    // aliased entries are summed by the solver's compiler
                    ge0(p, &terms);
                }
            }
        }
        if toggles.mutual_ratio {
            for (m, b) in [(&rv, alphas.ratio_r), (&xv, alphas.ratio_x)] {
                let pairs: Vec<(usize, usize)> = if variant == ImeVariant::Transposed {
                    vec![(0, 1)]
                } else {
                    (0..n).flat_map(|pi| (0..n).filter(move |&qi| qi != pi).map(move |qi| (pi, qi))).collect()
                };
                for (pi, qi) in pairs {
                    ge0(p, &[(m[pi][pi], 1.0), (m[pi][qi], -b.alpha4)]);
                    ge0(p, &[(m[pi][qi], b.alpha3), (m[pi][pi], -1.0)]);
                }
            }
        }
    }
    let rows = p.num_constraints() - start;
    let m = |a: &Vec<Vec<usize>>| a.iter().map(|row| row.iter().map(|&v| Affine::var(v)).collect()).collect();
    Ok(BranchParam { r: m(&rv), x: m(&xv), vars, length_var: None, rows })
}

/// Largest violation of the structural constraints of `variant` by the
/// given matrices (absolute, in the matrices' unit).
pub fn structural_violation(r: &[Vec<f64>], x: &[Vec<f64>], variant: ImeVariant, alphas: &AlphaBounds, toggles: &ImeToggles) -> f64 {
    let n = r.len();
    let mut worst: f64 = 0.0;
    let mut v = |amount: f64| worst = worst.max(amount);
    for pi in 0..n {
        for qi in 0..n {
            v(-r[pi][qi]);
            v(-x[pi][qi]);
            v((r[pi][qi] - r[qi][pi]).abs());
            v((x[pi][qi] - x[qi][pi]).abs());
            let off = pi != qi;
            if off && variant == ImeVariant::Diagonal {
                v(r[pi][qi].abs());
                v(x[pi][qi].abs());
                continue;
            }
            if toggles.xr_ratio {
                let b = if n == 1 {
                    alphas.service
                } else if off {
                    alphas.mutual_entries
                } else {
                    alphas.self_entries
                };
                v(b.alpha2 * x[pi][qi] - r[pi][qi]);
                v(r[pi][qi] - b.alpha1 * x[pi][qi]);
            }
            if off && toggles.mutual_ratio {
                for (m, b) in [(r, alphas.ratio_r), (x, alphas.ratio_x)] {
                    v(b.alpha4 * m[pi][qi] - m[pi][pi]);
                    v(m[pi][pi] - b.alpha3 * m[pi][qi]);
                }
            }
        }
        if n > 1 && variant != ImeVariant::Diagonal && toggles.diagonal_dominance {
            for m in [r, x] {
                let off: f64 = (0..n).filter(|&q| q != pi).map(|q| m[pi][q].abs()).sum();
                v(off - m[pi][pi].abs());
            }
        }
    }
    if variant == ImeVariant::Transposed && n > 1 {
        for m in [r, x] {
            for pi in 0..n {
                v((m[pi][pi] - m[0][0]).abs());
                for qi in 0..n {
                    if qi != pi {
                        v((m[pi][qi] - m[0][1]).abs());
                    }
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> EntryBounds {
        EntryBounds { r_max: 1.0, x_max: 0.5 }
    }

    #[test]
    fn transposed_service_alpha() {
        let a = default_alphas(AlphaScope::TransposedDefaults);
        assert_eq!(a.service.alpha2, 8.96);
        assert_eq!(a.service.alpha1, 16.0);
        assert_eq!((a.self_entries.alpha1, a.mutual_entries.alpha1), (35.0, 130.0));
        assert_eq!((a.self_entries.alpha2, a.mutual_entries.alpha2), (1.1, 2.0));
        a.check().unwrap();
    }

    #[test]
    fn loose_envelops_transposed() {
        let loose = default_alphas(AlphaScope::LooseUntransposed);
        loose.check().unwrap();
        assert!(loose.envelops(&default_alphas(AlphaScope::TransposedDefaults)));
    }

    #[test]
    fn alpha_order_is_checked() {
        let mut a = default_alphas(AlphaScope::TransposedDefaults);
        a.service.alpha2 = 20.0;
        assert!(a.check().is_err());
        let mut p = QcqpProblem::default();
        assert!(parameterize_ime(&mut p, 3, ImeVariant::Transposed, &a, &ImeToggles::default(), bounds()).is_err());
    }

    #[test]
    fn scalar_counts_per_variant() {
        let a = default_alphas(AlphaScope::TransposedDefaults);
        for (variant, free) in [(ImeVariant::Transposed, 4), (ImeVariant::Untransposed, 12), (ImeVariant::Diagonal, 6)] {
            let mut p = QcqpProblem::default();
            let bp = parameterize_ime(&mut p, 3, variant, &a, &ImeToggles::default(), bounds()).unwrap();
            let n_free = (0..p.num_variables()).filter(|&i| p.lower[i] < p.upper[i]).count();
            assert_eq!(n_free, free, "{variant:?}");
            assert_eq!(variant.free_scalars(3), free);
            assert_eq!(bp.r[0][1], bp.r[1][0]);
        }
        let mut p = QcqpProblem::default();
        parameterize_ime(&mut p, 1, ImeVariant::Untransposed, &a, &ImeToggles::default(), bounds()).unwrap();
        assert_eq!(p.num_variables(), 2);
    }

    #[test]
    fn untransposed_row_count_matches_enumeration() {
        // xr: 6 entries x 2, dominance: 3 rows x {R, X}, ratio: 6 ordered pairs x 2 x {R, X}
        let a = default_alphas(AlphaScope::LooseUntransposed);
        let mut p = QcqpProblem::default();
        let bp = parameterize_ime(&mut p, 3, ImeVariant::Untransposed, &a, &ImeToggles::default(), bounds()).unwrap();
        assert_eq!(bp.rows, 12 + 6 + 24);
        assert_eq!(p.num_constraints(), bp.rows);
    }

    #[test]
    fn diagonal_mutuals_are_exact_zero() {
        let a = default_alphas(AlphaScope::TransposedDefaults);
        let mut p = QcqpProblem::default();
        let bp = parameterize_ime(&mut p, 3, ImeVariant::Diagonal, &a, &ImeToggles::default(), bounds()).unwrap();
        let (r, x) = bp.values(&p.initial);
        assert_eq!(r[0][1], 0.0);
        assert_eq!(x[2][1], 0.0);
        assert!(r[0][0] > 0.0);
    }

    #[test]
    fn lle_scales_nominal() {
        let params = LleParams { r_per_m: vec![vec![0.1e-3]], x_per_m: vec![vec![0.0]], guess_m: 2000.0, lower_m: 1000.0, upper_m: 3000.0 };
        let mut p = QcqpProblem::default();
        let bp = parameterize_lle(&mut p, &params, "l").unwrap();
        let (r, _) = bp.values(&[1.0]);
        assert!((r[0][0] - 0.2).abs() < 1e-15);
        let res = params.residual(bp.length_var.unwrap());
        assert_eq!(res.eval(&[1.0]), 0.0);
        assert!((res.eval(&[1.5]) - 1.5).abs() < 1e-12);
        let bad = LleParams { guess_m: 5000.0, ..params };
        assert!(parameterize_lle(&mut p, &bad, "l").is_err());
    }

    #[test]
    fn transposed_cable_satisfies_defaults() {
        let a = default_alphas(AlphaScope::TransposedDefaults);
        let (rs, rm, xs, xm) = (0.3667, 0.1667, 0.0733, 0.00333);
        let r = vec![vec![rs, rm, rm], vec![rm, rs, rm], vec![rm, rm, rs]];
        let x = vec![vec![xs, xm, xm], vec![xm, xs, xm], vec![xm, xm, xs]];
        let t = ImeToggles::default();
        assert!(structural_violation(&r, &x, ImeVariant::Transposed, &a, &t) <= 0.0);
        let loose = default_alphas(AlphaScope::LooseUntransposed);
        assert!(structural_violation(&r, &x, ImeVariant::Untransposed, &loose, &t) <= 0.0);
    }
}
