//! Unbalanced power flow in rectangular current-voltage coordinates,
//! solved with Newton's method and a sparse LU factorization.

use impest_nlp::{CscMatrix, SparseLu};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::network::{validate, Feeder, Phase, Topology};

#[derive(Debug, thiserror::Error)]
pub enum PowerFlowError {
    #[error("invalid feeder: {0}")]
    Invalid(String),
    #[error("injection data does not match the feeder: {0}")]
    Dimension(String),
    #[error("timestep {step}: no convergence after {iterations} iterations (residual {residual:.3e} p.u.)")]
    NonConvergence { step: usize, iterations: usize, residual: f64 },
    #[error("timestep {step}: singular Jacobian at iteration {iteration}, weakest near bus {bus}")]
    Singular { step: usize, iteration: usize, bus: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModel {
    #[default]
    ConstantPower,
    /// Current fixed at `conj(S / V_nom)` with the nominal phasor of the
    /// phase.
    ConstantCurrent,
}

/// Complex power drawn by every user, per timestep and user phase (VA,
/// consumption positive), indexed `[t][user][phase position]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub model: LoadModel,
    pub steps: Vec<Vec<Vec<Complex64>>>,
}

impl InjectionSpec {
    pub fn zeros(f: &Feeder, n_steps: usize, model: LoadModel) -> Self {
        let step: Vec<Vec<Complex64>> = f.users.iter().map(|u| vec![Complex64::new(0.0, 0.0); u.phases.len()]).collect();
        Self { model, steps: vec![step; n_steps] }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn check(&self, f: &Feeder) -> Result<(), PowerFlowError> {
        for (t, step) in self.steps.iter().enumerate() {
            if step.len() != f.users.len() {
                return Err(PowerFlowError::Dimension(format!("timestep {t} has {} users, feeder {}", step.len(), f.users.len())));
            }
            for (u, s) in step.iter().enumerate() {
                if s.len() != f.users[u].phases.len() {
                    return Err(PowerFlowError::Dimension(format!("user {} at timestep {t}", f.users[u].id)));
                }
                if s.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                    return Err(PowerFlowError::Dimension(format!("non-finite power for user {}", f.users[u].id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfOptions {
    /// Source phasors in volt, one per source phase; balanced nominal when
    /// absent.
    pub source_voltage: Option<Vec<Complex64>>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { source_voltage: None, tol: 1e-8, max_iter: 50 }
    }
}

/// Solution of one timestep in SI units. Branch currents flow from the
/// `from` bus to the `to` bus; user currents flow into the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    pub bus_voltage: Vec<Vec<Complex64>>,
    pub branch_current: Vec<Vec<Complex64>>,
    pub user_current: Vec<Vec<Complex64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSolution {
    pub steps: Vec<PfState>,
}

/// Index tables shared by the residual and Jacobian assembly.
pub(crate) struct PfModel {
    pub topo: Topology,
    // per bus: first global bus-phase index
    bus_off: Vec<usize>,
    // per global bus-phase: unknown index, None at the source
    bus_unknown: Vec<Option<usize>>,
    br_off: Vec<usize>,
    user_off: Vec<usize>,
    n_bus_unknown: usize,
    n_br: usize,
    n_user: usize,
    z_base: f64,
    v_base: f64,
    s_base: f64,
    /// per branch phase: (from bus-phase, to bus-phase)
    br_ends: Vec<(usize, usize)>,
    /// per user phase: bus-phase
    user_bus: Vec<usize>,
    /// per user phase: nominal phasor in p.u.
    user_nominal: Vec<Complex64>,
    source_phases: Vec<(usize, Phase)>,
}

impl PfModel {
    pub fn new(f: &Feeder) -> Result<Self, PowerFlowError> {
        let v = validate(f);
        if let Some(first) = v.first() {
            return Err(PowerFlowError::Invalid(first.to_string()));
        }
        let topo = f.topology();
        let source = topo.source.expect("validated feeder has a source");
        let mut bus_off = Vec::with_capacity(f.buses.len());
        let mut bus_unknown = Vec::new();
        let mut n_bus_unknown = 0;
        let mut source_phases = Vec::new();
        for (i, b) in f.buses.iter().enumerate() {
            bus_off.push(bus_unknown.len());
            for p in b.phases.iter() {
                if i == source {
                    source_phases.push((bus_unknown.len(), p));
                    bus_unknown.push(None);
                } else {
                    bus_unknown.push(Some(n_bus_unknown));
                    n_bus_unknown += 1;
                }
            }
        }
        let bp = |bus: usize, p: Phase| bus_off[bus] + f.buses[bus].phases.position(p).unwrap();
        let mut br_off = Vec::new();
        let mut br_ends = Vec::new();
        for br in &f.branches {
            br_off.push(br_ends.len());
            let (a, b) = (topo.bus_index[&br.from], topo.bus_index[&br.to]);
            for p in br.phases.iter() {
                br_ends.push((bp(a, p), bp(b, p)));
            }
        }
        let mut user_off = Vec::new();
        let mut user_bus = Vec::new();
        let mut user_nominal = Vec::new();
        for u in &f.users {
            user_off.push(user_bus.len());
            let b = topo.bus_index[&u.bus];
            let vn = f.buses[b].base_voltage_v / f.base_voltage_v;
            for p in u.phases.iter() {
                user_bus.push(bp(b, p));
                user_nominal.push(Complex64::from_polar(vn, p.nominal_angle()));
            }
        }
        let z_base = f.z_base().map_err(|e| PowerFlowError::Invalid(e.to_string()))?;
        Ok(Self {
            n_br: br_ends.len(),
            n_user: user_bus.len(),
            topo,
            bus_off,
            bus_unknown,
            br_off,
            user_off,
            n_bus_unknown,
            z_base,
            v_base: f.base_voltage_v,
            s_base: f.base_power_va / 3.0,
            br_ends,
            user_bus,
            user_nominal,
            source_phases,
        })
    }

    fn dim(&self) -> usize {
        2 * (self.n_bus_unknown + self.n_br + self.n_user)
    }

    fn br_var(&self, j: usize) -> usize {
        2 * (self.n_bus_unknown + j)
    }

    fn user_var(&self, j: usize) -> usize {
        2 * (self.n_bus_unknown + self.n_br + j)
    }

    fn source_pu(&self, f: &Feeder, opts: &PfOptions) -> Result<Vec<Complex64>, PowerFlowError> {
        match &opts.source_voltage {
            Some(v) => {
                if v.len() != self.source_phases.len() {
                    return Err(PowerFlowError::Dimension(format!(
                        "{} source phasors for {} source phases",
                        v.len(),
                        self.source_phases.len()
                    )));
                }
                if v.iter().any(|z| !(z.norm() > 0.0)) {
                    return Err(PowerFlowError::Dimension("source voltage magnitude must be positive".into()));
                }
                Ok(v.iter().map(|z| z / self.v_base).collect())
            }
            None => {
                let src = &f.buses[self.topo.source.unwrap()];
                let vn = src.base_voltage_v / self.v_base;
                Ok(self.source_phases.iter().map(|&(_, p)| Complex64::from_polar(vn, p.nominal_angle())).collect())
            }
        }
    }

    /// Bus voltage of a global bus-phase from the unknown vector.
    fn voltage(&self, y: &[f64], source: &[Complex64], k: usize) -> Complex64 {
        match self.bus_unknown[k] {
            Some(u) => Complex64::new(y[2 * u], y[2 * u + 1]),
            None => source[self.source_phases.iter().position(|&(g, _)| g == k).unwrap()],
        }
    }

    /// Residuals and (optionally) Jacobian triplets. `loads` holds the
    /// per-user-phase power in p.u.
    fn assemble(
        &self,
        f: &Feeder,
        y: &[f64],
        source: &[Complex64],
        loads: &[Complex64],
        model: LoadModel,
        res: &mut [f64],
        jac: Option<&mut Vec<(usize, usize, f64)>>,
    ) {
        let mut trip = Vec::new();
        res.iter_mut().for_each(|r| *r = 0.0);
        // KCL rows share the bus unknown numbering
        for (j, &(a, b)) in self.br_ends.iter().enumerate() {
            let v = self.br_var(j);
            for (bus_k, sign) in [(a, -1.0), (b, 1.0)] {
                if let Some(u) = self.bus_unknown[bus_k] {
                    res[2 * u] += sign * y[v];
                    res[2 * u + 1] += sign * y[v + 1];
                    trip.push((2 * u, v, sign));
                    trip.push((2 * u + 1, v + 1, sign));
                }
            }
        }
        for (j, &k) in self.user_bus.iter().enumerate() {
            let v = self.user_var(j);
            if let Some(u) = self.bus_unknown[k] {
                res[2 * u] -= y[v];
                res[2 * u + 1] -= y[v + 1];
                trip.push((2 * u, v, -1.0));
                trip.push((2 * u + 1, v + 1, -1.0));
            }
        }
        // Ohm rows
        for (l, br) in f.branches.iter().enumerate() {
            let n = br.phases.len();
            for k in 0..n {
                let j = self.br_off[l] + k;
                let row = self.br_var(j);
                let (a, b) = self.br_ends[j];
                let d = self.voltage(y, source, a) - self.voltage(y, source, b);
                let mut re = d.re;
                let mut im = d.im;
                for (bus_k, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(u) = self.bus_unknown[bus_k] {
                        trip.push((row, 2 * u, sign));
                        trip.push((row + 1, 2 * u + 1, sign));
                    }
                }
                for q in 0..n {
                    let r = br.impedance.r[k][q] / self.z_base;
                    let x = br.impedance.x[k][q] / self.z_base;
                    let v = self.br_var(self.br_off[l] + q);
                    let (ire, iim) = (y[v], y[v + 1]);
                    re -= r * ire - x * iim;
                    im -= r * iim + x * ire;
                    trip.push((row, v, -r));
                    trip.push((row, v + 1, x));
                    trip.push((row + 1, v, -x));
                    trip.push((row + 1, v + 1, -r));
                }
                res[row] = re;
                res[row + 1] = im;
            }
        }
        // load rows
        for (j, &k) in self.user_bus.iter().enumerate() {
            let row = self.user_var(j);
            let v = row;
            let (ire, iim) = (y[v], y[v + 1]);
            let s = loads[j];
            match model {
                LoadModel::ConstantPower => {
                    let u = self.voltage(y, source, k);
                    res[row] = u.re * ire + u.im * iim - s.re;
                    res[row + 1] = u.im * ire - u.re * iim - s.im;
                    trip.push((row, v, u.re));
                    trip.push((row, v + 1, u.im));
                    trip.push((row + 1, v, u.im));
                    trip.push((row + 1, v + 1, -u.re));
                    if let Some(bu) = self.bus_unknown[k] {
                        trip.push((row, 2 * bu, ire));
                        trip.push((row, 2 * bu + 1, iim));
                        trip.push((row + 1, 2 * bu, -iim));
                        trip.push((row + 1, 2 * bu + 1, ire));
                    }
                }
                LoadModel::ConstantCurrent => {
                    let i0 = (s / self.user_nominal[j]).conj();
                    res[row] = ire - i0.re;
                    res[row + 1] = iim - i0.im;
                    trip.push((row, v, 1.0));
                    trip.push((row + 1, v + 1, 1.0));
                }
            }
        }
        if let Some(j) = jac {
            *j = trip;
        }
    }

    fn loads_pu(&self, step: &[Vec<Complex64>]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.n_user);
        for s in step {
            for v in s {
                out.push(v / self.s_base);
            }
        }
        out
    }

    fn bus_of_unknown(&self, f: &Feeder, col: usize) -> String {
        let bus_unknowns = 2 * self.n_bus_unknown;
        if col < bus_unknowns {
            let u = col / 2;
            let k = self.bus_unknown.iter().position(|&x| x == Some(u)).unwrap_or(0);
            let b = self.bus_off.iter().rposition(|&o| o <= k).unwrap_or(0);
            return f.buses[b].id.clone();
        }
        let j = (col - bus_unknowns) / 2;
        if j < self.n_br {
            let l = self.br_off.iter().rposition(|&o| o <= j).unwrap_or(0);
            return f.branches[l].to.clone();
        }
        let j = j - self.n_br;
        let u = self.user_off.iter().rposition(|&o| o <= j).unwrap_or(0);
        f.users[u].bus.clone()
    }

    fn to_state(&self, f: &Feeder, y: &[f64], source: &[Complex64], iterations: usize) -> PfState {
        let i_base = self.s_base / self.v_base;
        let bus_voltage = f
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (0..b.phases.len()).map(|k| self.voltage(y, source, self.bus_off[i] + k) * self.v_base).collect())
            .collect();
        let branch_current = f
            .branches
            .iter()
            .enumerate()
            .map(|(l, br)| {
                (0..br.phases.len())
                    .map(|k| {
                        let v = self.br_var(self.br_off[l] + k);
                        Complex64::new(y[v], y[v + 1]) * i_base
                    })
                    .collect()
            })
            .collect();
        let user_current = f
            .users
            .iter()
            .enumerate()
            .map(|(u, user)| {
                (0..user.phases.len())
                    .map(|k| {
                        let v = self.user_var(self.user_off[u] + k);
                        Complex64::new(y[v], y[v + 1]) * i_base
                    })
                    .collect()
            })
            .collect();
        PfState { bus_voltage, branch_current, user_current, iterations }
    }

    fn from_state(&self, state: &PfState) -> (Vec<f64>, Vec<Complex64>) {
        let i_base = self.s_base / self.v_base;
        let mut y = vec![0.0; self.dim()];
        let mut source = vec![Complex64::new(0.0, 0.0); self.source_phases.len()];
        for (i, vs) in state.bus_voltage.iter().enumerate() {
            for (k, v) in vs.iter().enumerate() {
                let g = self.bus_off[i] + k;
                let v = v / self.v_base;
                match self.bus_unknown[g] {
                    Some(u) => {
                        y[2 * u] = v.re;
                        y[2 * u + 1] = v.im;
                    }
                    None => {
                        let s = self.source_phases.iter().position(|&(gg, _)| gg == g).unwrap();
                        source[s] = v;
                    }
                }
            }
        }
        for (l, cs) in state.branch_current.iter().enumerate() {
            for (k, c) in cs.iter().enumerate() {
                let v = self.br_var(self.br_off[l] + k);
                y[v] = c.re / i_base;
                y[v + 1] = c.im / i_base;
            }
        }
        for (u, cs) in state.user_current.iter().enumerate() {
            for (k, c) in cs.iter().enumerate() {
                let v = self.user_var(self.user_off[u] + k);
                y[v] = c.re / i_base;
                y[v + 1] = c.im / i_base;
            }
        }
        (y, source)
    }

    fn solve_step(
        &self,
        f: &Feeder,
        step: usize,
        loads: &[Vec<Complex64>],
        model: LoadModel,
        source: &[Complex64],
        opts: &PfOptions,
        ordering: &mut Option<Vec<usize>>,
    ) -> Result<PfState, PowerFlowError> {
        let n = self.dim();
        let loads = self.loads_pu(loads);
        let mut y = vec![0.0; n];
        // flat start: every bus at the source phasor of its phase
        for (g, u) in self.bus_unknown.iter().enumerate() {
            if let Some(u) = u {
                let b = self.bus_off.iter().rposition(|&o| o <= g).unwrap();
                let p = f.buses[b].phases.as_slice()[g - self.bus_off[b]];
                let v = self
                    .source_phases
                    .iter()
                    .position(|&(_, sp)| sp == p)
                    .map(|s| source[s])
                    .unwrap_or_else(|| Complex64::from_polar(1.0, p.nominal_angle()));
                y[2 * u] = v.re;
                y[2 * u + 1] = v.im;
            }
        }
        let mut res = vec![0.0; n];
        let mut trip = Vec::new();
        for it in 0..=opts.max_iter {
            self.assemble(f, &y, source, &loads, model, &mut res, Some(&mut trip));
            let norm = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            if !norm.is_finite() {
                return Err(PowerFlowError::NonConvergence { step, iterations: it, residual: norm });
            }
            if norm <= opts.tol {
                return Ok(self.to_state(f, &y, source, it));
            }
            if it == opts.max_iter {
                return Err(PowerFlowError::NonConvergence { step, iterations: it, residual: norm });
            }
            let jac = CscMatrix::from_triplets(n, n, &trip);
            let q = ordering.get_or_insert_with(|| SparseLu::ordering(&jac)).clone();
            let lu = SparseLu::factor_with_ordering(&jac, q, 0.1).map_err(|e| {
                let col = match e {
                    impest_nlp::LuError::Singular { column } => ordering.as_ref().unwrap()[column.min(n - 1)],
                    _ => 0,
                };
                PowerFlowError::Singular { step, iteration: it, bus: self.bus_of_unknown(f, col) }
            })?;
            let (lo, _) = lu.pivot_range();
            if lo < 1e-14 {
                return Err(PowerFlowError::Singular { step, iteration: it, bus: self.bus_of_unknown(f, lu.weakest_column()) });
            }
            lu.solve(&mut res);
            for i in 0..n {
                y[i] -= res[i];
            }
        }
        unreachable!()
    }
}

/// Solves every timestep of `injections`.
pub fn solve(f: &Feeder, injections: &InjectionSpec, opts: &PfOptions) -> Result<StateSolution, PowerFlowError> {
    let model = PfModel::new(f)?;
    injections.check(f)?;
    let source = model.source_pu(f, opts)?;
    let mut ordering = None;
    let steps = injections
        .steps
        .iter()
        .enumerate()
        .map(|(t, loads)| model.solve_step(f, t, loads, injections.model, &source, opts, &mut ordering))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StateSolution { steps })
}

/// Largest KCL, Ohm or load-model residual over all timesteps, in p.u.
pub fn residual_norm(f: &Feeder, state: &StateSolution, injections: &InjectionSpec) -> Result<f64, PowerFlowError> {
    let model = PfModel::new(f)?;
    injections.check(f)?;
    if state.steps.len() != injections.steps.len() {
        return Err(PowerFlowError::Dimension("state and injections differ in timestep count".into()));
    }
    let mut worst: f64 = 0.0;
    let mut res = vec![0.0; model.dim()];
    for (st, inj) in state.steps.iter().zip(&injections.steps) {
        if st.bus_voltage.len() != f.buses.len() || st.branch_current.len() != f.branches.len() || st.user_current.len() != f.users.len() {
            return Err(PowerFlowError::Dimension("state does not match the feeder".into()));
        }
        let (y, source) = model.from_state(st);
        model.assemble(f, &y, &source, &model.loads_pu(inj), injections.model, &mut res, None);
        worst = res.iter().fold(worst, |m, r| m.max(r.abs()));
    }
    Ok(worst)
}

impl PfState {
    /// Complex power drawn by each user phase, `U · conj(I)`, in VA.
    pub fn user_power(&self, f: &Feeder, topo: &Topology) -> Vec<Vec<Complex64>> {
        f.users
            .iter()
            .enumerate()
            .map(|(u, user)| {
                let b = topo.bus_index[&user.bus];
                user.phases
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let v = self.bus_voltage[b][f.buses[b].phases.position(p).unwrap()];
                        v * self.user_current[u][k].conj()
                    })
                    .collect()
            })
            .collect()
    }

    /// Voltage magnitude at each user phase, in volt.
    pub fn user_voltage(&self, f: &Feeder, topo: &Topology) -> Vec<Vec<f64>> {
        f.users
            .iter()
            .map(|user| {
                let b = topo.bus_index[&user.bus];
                user.phases.iter().map(|p| self.bus_voltage[b][f.buses[b].phases.position(p).unwrap()].norm()).collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, Bus, BusKind, ImpedanceMatrix, PhaseSet, Units, User};
    use std::collections::BTreeMap;

    fn two_bus(r: f64) -> Feeder {
        Feeder {
            buses: vec![
                Bus { id: "s".into(), phases: PhaseSet::single(Phase::A), kind: BusKind::Source, base_voltage_v: 230.0 },
                Bus { id: "u".into(), phases: PhaseSet::single(Phase::A), kind: BusKind::UserConnection, base_voltage_v: 230.0 },
            ],
            branches: vec![Branch {
                id: "l".into(),
                from: "s".into(),
                to: "u".into(),
                phases: PhaseSet::single(Phase::A),
                impedance: ImpedanceMatrix::scalar(r, 0.0),
                length_m: None,
                linecode: None,
            }],
            users: vec![User { id: "u1".into(), bus: "u".into(), phases: PhaseSet::single(Phase::A), metered: true }],
            base_power_va: 3000.0,
            base_voltage_v: 230.0,
            linecodes: BTreeMap::new(),
            units: Units::Si,
        }
    }

    #[test]
    fn zero_load_keeps_source_voltage() {
        let f = two_bus(1.0);
        let inj = InjectionSpec::zeros(&f, 1, LoadModel::ConstantPower);
        let s = solve(&f, &inj, &PfOptions::default()).unwrap();
        assert_eq!(s.steps[0].bus_voltage[1][0], Complex64::new(230.0, 0.0));
    }

    #[test]
    fn constant_current_ohms_law() {
        let f = two_bus(1.0);
        let mut inj = InjectionSpec::zeros(&f, 1, LoadModel::ConstantCurrent);
        inj.steps[0][0][0] = Complex64::new(230.0, 0.0);
        let s = solve(&f, &inj, &PfOptions::default()).unwrap();
        assert!((s.steps[0].bus_voltage[1][0] - Complex64::new(229.0, 0.0)).norm() < 1e-9);
        assert!(residual_norm(&f, &s, &inj).unwrap() <= 1e-8);
    }

    #[test]
    fn constant_power_matches_quadratic_formula() {
        // V (230 - V) / R = P  ->  V = (230 + sqrt(230² - 4 R P)) / 2
        let r = 2.0;
        let p = 2000.0;
        let f = two_bus(r);
        let mut inj = InjectionSpec::zeros(&f, 1, LoadModel::ConstantPower);
        inj.steps[0][0][0] = Complex64::new(p, 0.0);
        let s = solve(&f, &inj, &PfOptions::default()).unwrap();
        let v = (230.0 + (230.0f64.powi(2) - 4.0 * r * p).sqrt()) / 2.0;
        assert!((s.steps[0].bus_voltage[1][0].re - v).abs() < 1e-6);
        let got = s.steps[0].user_power(&f, &f.topology())[0][0];
        assert!((got.re - p).abs() < 1e-4 && got.im.abs() < 1e-4);
    }

    #[test]
    fn perturbed_voltage_raises_residual() {
        let f = two_bus(1.0);
        let mut inj = InjectionSpec::zeros(&f, 1, LoadModel::ConstantCurrent);
        inj.steps[0][0][0] = Complex64::new(230.0, 0.0);
        let mut s = solve(&f, &inj, &PfOptions::default()).unwrap();
        // Ohm row residual in p.u. equals the voltage perturbation
        s.steps[0].bus_voltage[1][0] += Complex64::new(1e-3 * 230.0, 0.0);
        let r = residual_norm(&f, &s, &inj).unwrap();
        assert!((r - 1e-3).abs() < 1e-9, "{r}");
    }

    #[test]
    fn zero_currents_leave_load_current_residual() {
        let f = two_bus(1.0);
        let mut inj = InjectionSpec::zeros(&f, 1, LoadModel::ConstantCurrent);
        inj.steps[0][0][0] = Complex64::new(230.0, 0.0);
        let mut s = solve(&f, &inj, &PfOptions::default()).unwrap();
        s.steps[0].branch_current[0][0] = Complex64::new(0.0, 0.0);
        s.steps[0].user_current[0][0] = Complex64::new(0.0, 0.0);
        s.steps[0].bus_voltage[1][0] = Complex64::new(230.0, 0.0);
        let r = residual_norm(&f, &s, &inj).unwrap();
        // 1 A at a 3000/3/230 A base
        assert!((r - 230.0 / 1000.0).abs() < 1e-12, "{r}");
    }
}
