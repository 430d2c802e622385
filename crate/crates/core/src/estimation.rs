//! Joint state and impedance estimation as a weighted-least-absolute-value
//! program in rectangular current-voltage form.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use impest_nlp::{solve, Constraint, Expr, QcqpProblem, SolveOutcome, SolveStatus, SolverError, SolverOptions};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::impedance::{
    default_alphas, parameterize_ime, parameterize_lle, Affine, AlphaBounds, AlphaScope, BranchParam, EntryBounds,
    ImeToggles, ImeVariant, ImpedanceError, LleParams,
};
use crate::measurements::{Kind, MeasurementSet, Sample};
use crate::network::{cumulative_impedance_with, validate, Feeder, ImpedanceMatrix, NetworkError, Phase, Units};
use crate::powerflow::PfState;

#[derive(Debug, thiserror::Error)]
pub enum EstimationError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid feeder: {0}")]
    Invalid(String),
    #[error("measurement for unknown user {0}")]
    UnknownUser(String),
    #[error("user {user} has no phase {phase}")]
    PhaseMismatch { user: String, phase: Phase },
    #[error("training set is empty")]
    NoMeasurements,
    #[error("unobservable: {0}")]
    Unobservable(String),
    #[error("duplicate measurement {0}")]
    Duplicate(String),
    #[error(transparent)]
    Impedance(#[from] ImpedanceError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("state does not match the problem: {0}")]
    StateMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SeFixedZ,
    Lle,
    ImeTransposed,
    ImeUntransposed,
    ImeDiagonal,
}

impl Mode {
    pub fn ime_variant(self) -> Option<ImeVariant> {
        match self {
            Mode::ImeTransposed => Some(ImeVariant::Transposed),
            Mode::ImeUntransposed => Some(ImeVariant::Untransposed),
            Mode::ImeDiagonal => Some(ImeVariant::Diagonal),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Some(match s {
            "se_fixed_z" | "se" => Mode::SeFixedZ,
            "lle" => Mode::Lle,
            "ime_transposed" => Mode::ImeTransposed,
            "ime_untransposed" => Mode::ImeUntransposed,
            "ime_diagonal" => Mode::ImeDiagonal,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::SeFixedZ => "se_fixed_z",
            Mode::Lle => "lle",
            Mode::ImeTransposed => "ime_transposed",
            Mode::ImeUntransposed => "ime_untransposed",
            Mode::ImeDiagonal => "ime_diagonal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    /// Length bounds as multiples of the prior length.
    pub length_range: (f64, f64),
    /// Penalize deviation from the prior length.
    pub length_prior: bool,
    /// One prior residual per branch instead of one per timestep.
    pub single_length_residual: bool,
    /// Defaults depend on the IME variant.
    pub alphas: Option<AlphaBounds>,
    pub toggles: ImeToggles,
    /// Upper bound of free entries as a multiple of the largest
    /// cumulative impedance of the input feeder. Defaults: 100, diagonal 10.
    pub bound_multiplier: Option<f64>,
    /// Branches whose impedance stays at the input value.
    pub pinned: BTreeSet<String>,
    pub impedance_start: ImpedanceStart,
}

/// Starting value of free impedance entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpedanceStart {
    /// Midpoint of the bounds plus a small offset.
    #[default]
    Midpoint,
    /// The input feeder's impedance, moved inside the bounds.
    Input,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            length_range: (0.01, 2.0),
            length_prior: true,
            single_length_residual: false,
            alphas: None,
            toggles: ImeToggles::default(),
            bound_multiplier: None,
            pinned: BTreeSet::new(),
            impedance_start: ImpedanceStart::Midpoint,
        }
    }
}

fn start_from_input(p: &mut QcqpProblem, bp: &BranchParam, z: &ImpedanceMatrix) {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (mat, given) in [(&bp.r, &z.r), (&bp.x, &z.x)] {
        for (row, grow) in mat.iter().zip(given) {
            for (e, &g) in row.iter().zip(grow) {
                if let [(v, a)] = e.terms[..] {
                    let slot = acc.entry(v).or_insert((0.0, 0));
                    slot.0 += (g - e.constant) / a;
                    slot.1 += 1;
                }
            }
        }
    }
    for (v, (sum, n)) in acc {
        let (lo, hi) = (p.lower[v], p.upper[v]);
        if lo < hi {
            let margin = 1e-4 * (hi - lo);
            p.initial[v] = (sum / n as f64).clamp(lo + margin, hi - margin);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BusRe,
    BusIm,
    BranchRe,
    BranchIm,
    UserRe,
    UserIm,
    Vmag,
    P,
    Q,
    Rho,
    LengthRatio,
    Impedance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarInfo {
    pub role: Role,
    pub owner: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// One epigraph pair `ρ ≥ ±(x - z)/σ` in per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasRow {
    pub sample: Sample,
    pub value_var: usize,
    pub rho_var: usize,
    pub z_pu: f64,
    pub sigma_pu: f64,
    /// SI value of one per-unit
    pub scale: f64,
}

/// Prior rows `ρ ≥ ±residual(ℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRow {
    pub branch: usize,
    pub residual: Affine,
    pub rho_var: usize,
}

/// Variable indices of one timestep.
#[derive(Debug, Clone, PartialEq)]
struct StepVars {
    bus: Vec<(usize, usize)>,
    branch: Vec<(usize, usize)>,
    user: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub mode: Mode,
    pub nlp: QcqpProblem,
    pub vars: Vec<VarInfo>,
    pub timesteps: Vec<usize>,
    pub feeder: Feeder,
    pub branch_params: Vec<BranchParam>,
    pub lle: BTreeMap<usize, LleParams>,
    pub measurements: Vec<MeasRow>,
    pub priors: Vec<PriorRow>,
    pub alphas: Option<AlphaBounds>,
    pub toggles: ImeToggles,
    steps: Vec<StepVars>,
    bus_off: Vec<usize>,
    br_off: Vec<usize>,
    user_off: Vec<usize>,
    z_base: f64,
    v_base: f64,
    i_base: f64,
}

struct Builder {
    p: QcqpProblem,
    vars: Vec<VarInfo>,
}

impl Builder {
    fn var(&mut self, lo: f64, hi: f64, init: f64, role: Role, owner: &str, phase: Option<Phase>, t: Option<usize>) -> usize {
        self.vars.push(VarInfo { role, owner: owner.to_string(), phase, timestep: t, label: None });
        self.p.add_variable(lo, hi, init)
    }

    fn sync_labels(&mut self, role: Role, owner: &str, bp: &BranchParam) {
        while self.vars.len() < self.p.num_variables() {
            self.vars.push(VarInfo { role, owner: owner.to_string(), phase: None, timestep: None, label: None });
        }
        for (label, v) in &bp.vars {
            self.vars[*v].label = Some(label.clone());
        }
    }

    fn epigraph(&mut self, rho: usize, body: &Affine, scale: f64) {
        // ρ - body·scale ≥ 0 and ρ + body·scale ≥ 0
        for sign in [-1.0, 1.0] {
            let mut e = Expr::var(rho);
            e.add_constant(sign * scale * body.constant);
            for &(v, a) in &body.terms {
                e.add_linear(v, sign * scale * a);
            }
            self.p.add_constraint(Constraint::at_least(e, 0.0));
        }
    }
}

fn si_feeder(f: &Feeder) -> Result<Feeder, EstimationError> {
    Ok(match f.units {
        Units::Si => f.clone(),
        Units::PerUnit => crate::network::from_per_unit(f)?,
    })
}

/// Assembles the estimation program for `mode` over the timesteps of
/// `train`.
pub fn build(feeder: &Feeder, train: &MeasurementSet, mode: Mode, opts: &BuildOptions) -> Result<EstimationProblem, EstimationError> {
    let f = si_feeder(feeder)?;
    if let Some(v) = validate(&f).first() {
        return Err(EstimationError::Invalid(v.to_string()));
    }
    if train.is_empty() {
        return Err(EstimationError::NoMeasurements);
    }
    let topo = f.topology();
    let source = topo.source.ok_or_else(|| EstimationError::Invalid("no source".into()))?;
    let z_base = f.z_base()?;
    let v_base = f.base_voltage_v;
    let i_base = f.i_base();
    let s_base = f.base_power_va / 3.0;
    let timesteps = train.timesteps();

    let mut seen = BTreeSet::new();
    let user_index: HashMap<&str, usize> = f.users.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    for s in &train.samples {
        let &u = user_index.get(s.user_id.as_str()).ok_or_else(|| EstimationError::UnknownUser(s.user_id.clone()))?;
        if !f.users[u].phases.contains(s.phase) {
            return Err(EstimationError::PhaseMismatch { user: s.user_id.clone(), phase: s.phase });
        }
        if !(s.sigma > 0.0) || !s.value.is_finite() {
            return Err(EstimationError::Invalid(format!("sample of {} at step {} has invalid value or sigma", s.user_id, s.timestep)));
        }
        if !seen.insert((s.user_id.clone(), s.timestep, s.kind, s.phase)) {
            return Err(EstimationError::Duplicate(format!("{} {:?} {} at step {}", s.user_id, s.kind, s.phase, s.timestep)));
        }
    }
    for &t in &timesteps {
        if !train.samples.iter().any(|s| s.timestep == t && s.kind == Kind::Vm) {
            return Err(EstimationError::Unobservable(format!("no voltage magnitude measured at step {t}")));
        }
    }

    let mut b = Builder { p: QcqpProblem::default(), vars: Vec::new() };

    // impedance parameterization
    let variant = mode.ime_variant();
    let alphas = match (opts.alphas, variant) {
        (Some(a), _) => Some(a),
        (None, Some(ImeVariant::Untransposed)) => Some(default_alphas(AlphaScope::LooseUntransposed)),
        (None, Some(_)) => Some(default_alphas(AlphaScope::TransposedDefaults)),
        (None, None) => None,
    };
    let entry_bounds = if let Some(v) = variant {
        let k = opts.bound_multiplier.unwrap_or(if v == ImeVariant::Diagonal { 10.0 } else { 100.0 });
        let (mut rmax, mut xmax) = (0.0f64, 0.0f64);
        for u in &f.users {
            for (_, r, x) in cumulative_impedance_with(&f, &topo, &u.id)? {
                rmax = rmax.max(r);
                xmax = xmax.max(x);
            }
        }
        if !(rmax > 0.0) {
            return Err(EstimationError::Invalid("input feeder has no resistance to derive entry bounds from".into()));
        }
        if !(xmax > 0.0) {
            xmax = rmax;
        }
        Some(EntryBounds { r_max: k * rmax / z_base, x_max: k * xmax / z_base })
    } else {
        None
    };
    let mut branch_params = Vec::with_capacity(f.branches.len());
    let mut lle = BTreeMap::new();
    for (l, br) in f.branches.iter().enumerate() {
        let pinned = opts.pinned.contains(&br.id);
        let fixed = || BranchParam::fixed(&br.impedance.map(|z| z / z_base).r, &br.impedance.map(|z| z / z_base).x);
        let bp = match mode {
            _ if pinned => fixed(),
            Mode::SeFixedZ => fixed(),
            Mode::Lle => {
                let code = br
                    .linecode
                    .as_ref()
                    .and_then(|c| f.linecodes.get(c))
                    .ok_or_else(|| ImpedanceError::MissingLinecode(br.id.clone()))?;
                let len = br.length_m.ok_or_else(|| ImpedanceError::MissingLinecode(br.id.clone()))?;
                let per_m = |m: &Vec<Vec<f64>>| m.iter().map(|row| row.iter().map(|z| z / 1000.0 / z_base).collect()).collect();
                let params = LleParams {
                    r_per_m: per_m(&code.r_ohm_per_km),
                    x_per_m: per_m(&code.x_ohm_per_km),
                    guess_m: len,
                    lower_m: opts.length_range.0 * len,
                    upper_m: opts.length_range.1 * len,
                };
                if params.r_per_m.len() != br.phases.len() {
                    return Err(EstimationError::Invalid(format!("linecode of branch {} does not match its phases", br.id)));
                }
                let bp = parameterize_lle(&mut b.p, &params, &br.id)?;
                b.sync_labels(Role::LengthRatio, &br.id, &bp);
                lle.insert(l, params);
                bp
            }
            _ => {
                let bp = parameterize_ime(
                    &mut b.p,
                    br.phases.len(),
                    variant.unwrap(),
                    alphas.as_ref().unwrap(),
                    &opts.toggles,
                    entry_bounds.unwrap(),
                )?;
                b.sync_labels(Role::Impedance, &br.id, &bp);
                if opts.impedance_start == ImpedanceStart::Input {
                    start_from_input(&mut b.p, &bp, &br.impedance.map(|z| z / z_base));
                }
                bp
            }
        };
        branch_params.push(bp);
    }

    // per-timestep state variables
    let mut bus_off = Vec::new();
    let mut acc = 0;
    for bus in &f.buses {
        bus_off.push(acc);
        acc += bus.phases.len();
    }
    let mut br_off = Vec::new();
    acc = 0;
    for br in &f.branches {
        br_off.push(acc);
        acc += br.phases.len();
    }
    let mut user_off = Vec::new();
    acc = 0;
    for u in &f.users {
        user_off.push(acc);
        acc += u.phases.len();
    }

    let mut steps = Vec::with_capacity(timesteps.len());
    for &t in &timesteps {
        let mut sv = StepVars { bus: Vec::new(), branch: Vec::new(), user: Vec::new() };
        for (bi, bus) in f.buses.iter().enumerate() {
            let mag = bus.base_voltage_v / v_base;
            for ph in bus.phases.iter() {
                let nominal = Complex64::from_polar(mag, ph.nominal_angle());
                let re = b.var(f64::NEG_INFINITY, f64::INFINITY, nominal.re, Role::BusRe, &bus.id, Some(ph), Some(t));
                let (lo, hi) = if bi == source && ph == Phase::A { (0.0, 0.0) } else { (f64::NEG_INFINITY, f64::INFINITY) };
                let im = b.var(lo, hi, if lo == hi { 0.0 } else { nominal.im }, Role::BusIm, &bus.id, Some(ph), Some(t));
                sv.bus.push((re, im));
            }
        }
        if !f.buses[source].phases.contains(Phase::A) {
            // fix the angle of the first source phase to its nominal value
            let ph = f.buses[source].phases.as_slice()[0];
            let (re, im) = sv.bus[bus_off[source]];
            let th = ph.nominal_angle();
            let mut e = Expr::new();
            e.add_linear(re, th.sin()).add_linear(im, -th.cos());
            b.p.add_constraint(Constraint::equal(e, 0.0));
        }
        for br in &f.branches {
            for ph in br.phases.iter() {
                let re = b.var(f64::NEG_INFINITY, f64::INFINITY, 0.0, Role::BranchRe, &br.id, Some(ph), Some(t));
                let im = b.var(f64::NEG_INFINITY, f64::INFINITY, 0.0, Role::BranchIm, &br.id, Some(ph), Some(t));
                sv.branch.push((re, im));
            }
        }
        for u in &f.users {
            for ph in u.phases.iter() {
                let re = b.var(f64::NEG_INFINITY, f64::INFINITY, 0.0, Role::UserRe, &u.id, Some(ph), Some(t));
                let im = b.var(f64::NEG_INFINITY, f64::INFINITY, 0.0, Role::UserIm, &u.id, Some(ph), Some(t));
                sv.user.push((re, im));
            }
        }
        steps.push(sv);
    }

    let bus_phase = |bi: usize, ph: Phase| bus_off[bi] + f.buses[bi].phases.position(ph).unwrap();

    for sv in &steps {
        // current balance at every non-source bus
        for (bi, bus) in f.buses.iter().enumerate() {
            if bi == source {
                continue;
            }
            for ph in bus.phases.iter() {
                let mut er = Expr::new();
                let mut ei = Expr::new();
                for &(l, _) in &topo.adjacency[bi] {
                    let br = &f.branches[l];
                    let Some(pos) = br.phases.position(ph) else { continue };
                    let sign = if topo.bus_index[&br.to] == bi { 1.0 } else { -1.0 };
                    let (re, im) = sv.branch[br_off[l] + pos];
                    er.add_linear(re, sign);
                    ei.add_linear(im, sign);
                }
                for &u in &topo.users_at[bi] {
                    let Some(pos) = f.users[u].phases.position(ph) else { continue };
                    let (re, im) = sv.user[user_off[u] + pos];
                    er.add_linear(re, -1.0);
                    ei.add_linear(im, -1.0);
                }
                b.p.add_constraint(Constraint::equal(er, 0.0));
                b.p.add_constraint(Constraint::equal(ei, 0.0));
            }
        }
        // Ohm's law per branch phase
        for (l, br) in f.branches.iter().enumerate() {
            let (fb, tb) = (topo.bus_index[&br.from], topo.bus_index[&br.to]);
            let bp = &branch_params[l];
            for (pi, ph) in br.phases.iter().enumerate() {
                let (ufr, ufi) = sv.bus[bus_phase(fb, ph)];
                let (utr, uti) = sv.bus[bus_phase(tb, ph)];
                let mut er = Expr::new();
                er.add_linear(ufr, 1.0).add_linear(utr, -1.0);
                let mut ei = Expr::new();
                ei.add_linear(ufi, 1.0).add_linear(uti, -1.0);
                for qi in 0..br.phases.len() {
                    let (ir, ii) = sv.branch[br_off[l] + qi];
                    bp.r[pi][qi].add_product(&mut er, ir, -1.0);
                    bp.x[pi][qi].add_product(&mut er, ii, 1.0);
                    bp.r[pi][qi].add_product(&mut ei, ii, -1.0);
                    bp.x[pi][qi].add_product(&mut ei, ir, -1.0);
                }
                b.p.add_constraint(Constraint::equal(er, 0.0));
                b.p.add_constraint(Constraint::equal(ei, 0.0));
            }
        }
    }

    // measurement epigraphs
    let step_pos: HashMap<usize, usize> = timesteps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut vmag_vars: HashMap<(usize, usize), usize> = HashMap::new();
    let mut measurements = Vec::with_capacity(train.samples.len());
    for s in &train.samples {
        let k = step_pos[&s.timestep];
        let u = user_index[s.user_id.as_str()];
        let user = &f.users[u];
        let bi = topo.bus_index[&user.bus];
        let bp_idx = bus_phase(bi, s.phase);
        let (ur, ui) = steps[k].bus[bp_idx];
        let (ir, ii) = steps[k].user[user_off[u] + user.phases.position(s.phase).unwrap()];
        let (value_var, scale) = match s.kind {
            Kind::Vm => {
                let vb = f.buses[bi].base_voltage_v;
                let v = *vmag_vars.entry((k, bp_idx)).or_insert_with(|| {
                    let v = b.var(0.0, f64::INFINITY, vb / v_base, Role::Vmag, &user.bus, Some(s.phase), Some(s.timestep));
                    let mut e = Expr::new();
                    e.add_quadratic(v, v, 1.0).add_quadratic(ur, ur, -1.0).add_quadratic(ui, ui, -1.0);
                    b.p.add_constraint(Constraint::equal(e, 0.0));
                    v
                });
                (v, v_base)
            }
            Kind::P | Kind::Q => {
                let role = if s.kind == Kind::P { Role::P } else { Role::Q };
                let v = b.var(f64::NEG_INFINITY, f64::INFINITY, 0.0, role, &user.id, Some(s.phase), Some(s.timestep));
                let mut e = Expr::var(v);
                if s.kind == Kind::P {
                    e.add_quadratic(ur, ir, -1.0).add_quadratic(ui, ii, -1.0);
                } else {
                    e.add_quadratic(ui, ir, -1.0).add_quadratic(ur, ii, 1.0);
                }
                b.p.add_constraint(Constraint::equal(e, 0.0));
                (v, s_base)
            }
        };
        let rho = b.var(f64::NEG_INFINITY, f64::INFINITY, 1.0, Role::Rho, &user.id, Some(s.phase), Some(s.timestep));
        let z_pu = s.value / scale;
        let sigma_pu = s.sigma / scale;
        b.epigraph(rho, &Affine { constant: -z_pu, terms: vec![(value_var, 1.0)] }, 1.0 / sigma_pu);
        measurements.push(MeasRow { sample: s.clone(), value_var, rho_var: rho, z_pu, sigma_pu, scale });
    }

    // length priors
    let mut priors = Vec::new();
    if mode == Mode::Lle && opts.length_prior {
        let copies = if opts.single_length_residual { 1 } else { timesteps.len() };
        for (&l, params) in &lle {
            let residual = params.residual(branch_params[l].length_var.unwrap());
            for c in 0..copies {
                let t = (!opts.single_length_residual).then(|| timesteps[c]);
                let rho = b.var(f64::NEG_INFINITY, f64::INFINITY, 1.0, Role::Rho, &f.branches[l].id, None, t);
                b.epigraph(rho, &residual, 1.0);
                priors.push(PriorRow { branch: l, residual: residual.clone(), rho_var: rho });
            }
        }
    }

    let mut objective = Expr::new();
    for m in &measurements {
        objective.add_linear(m.rho_var, 1.0);
    }
    for pr in &priors {
        objective.add_linear(pr.rho_var, 1.0);
    }
    b.p.objective = objective;
    debug_assert_eq!(b.vars.len(), b.p.num_variables());
    b.p.validate().map_err(SolverError::Problem)?;

    Ok(EstimationProblem {
        mode,
        nlp: b.p,
        vars: b.vars,
        timesteps,
        feeder: f,
        branch_params,
        lle,
        measurements,
        priors,
        alphas,
        toggles: opts.toggles,
        steps,
        bus_off,
        br_off,
        user_off,
        z_base,
        v_base,
        i_base,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub user_id: String,
    pub timestep: usize,
    pub kind: Kind,
    pub phase: Phase,
    pub measured: f64,
    pub estimated: f64,
    pub sigma: f64,
    /// `|estimated - measured| / σ`
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub mode: Mode,
    pub feeder: Feeder,
    pub timesteps: Vec<usize>,
    pub states: Vec<PfState>,
    pub residuals: Vec<Residual>,
    pub lengths_m: BTreeMap<String, f64>,
    pub objective: f64,
    pub max_violation: f64,
    /// Solver did not reach a clean optimum or constraints are violated.
    pub flagged: bool,
}

impl EstimationProblem {
    pub fn num_variables(&self) -> usize {
        self.nlp.num_variables()
    }

    pub fn num_constraints(&self) -> usize {
        self.nlp.num_constraints()
    }

    /// Objective and largest constraint or bound violation at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, f64), EstimationError> {
        self.nlp.evaluate(x).map_err(|e| EstimationError::Solver(SolverError::Problem(e)))
    }

    /// Sets every epigraph variable to the smallest feasible value for the
    /// rest of `x`.
    pub fn tighten(&self, x: &mut [f64]) {
        for m in &self.measurements {
            x[m.rho_var] = ((x[m.value_var] - m.z_pu) / m.sigma_pu).abs();
        }
        for pr in &self.priors {
            x[pr.rho_var] = pr.residual.eval(x).abs();
        }
    }

    /// Fills auxiliaries and epigraph variables from voltages, currents and
    /// impedance variables already set in `x`.
    fn complete(&self, x: &mut [f64]) {
        let topo = self.feeder.topology();
        for m in &self.measurements {
            let k = self.timesteps.iter().position(|&t| t == m.sample.timestep).unwrap();
            let u = self.feeder.users.iter().position(|u| u.id == m.sample.user_id).unwrap();
            let user = &self.feeder.users[u];
            let bi = topo.bus_index[&user.bus];
            let (ur, ui) = self.steps[k].bus[self.bus_off[bi] + self.feeder.buses[bi].phases.position(m.sample.phase).unwrap()];
            let (ir, ii) = self.steps[k].user[self.user_off[u] + user.phases.position(m.sample.phase).unwrap()];
            x[m.value_var] = match m.sample.kind {
                Kind::Vm => x[ur].hypot(x[ui]),
                Kind::P => x[ur] * x[ir] + x[ui] * x[ii],
                Kind::Q => x[ui] * x[ir] - x[ur] * x[ii],
            };
        }
        self.tighten(x);
    }

    /// The point corresponding to power-flow states (SI, one per problem
    /// timestep) and the impedances of `truth`, a feeder with the same
    /// topology as the problem's.
    pub fn point_from_states(&self, truth: &Feeder, states: &[PfState]) -> Result<Vec<f64>, EstimationError> {
        if states.len() != self.timesteps.len() {
            return Err(EstimationError::StateMismatch(format!("{} states for {} timesteps", states.len(), self.timesteps.len())));
        }
        let truth = si_feeder(truth)?;
        let mut x = self.nlp.initial.clone();
        for (k, st) in states.iter().enumerate() {
            let sv = &self.steps[k];
            let f = &self.feeder;
            if st.bus_voltage.len() != f.buses.len() || st.branch_current.len() != f.branches.len() || st.user_current.len() != f.users.len() {
                return Err(EstimationError::StateMismatch("component counts differ".into()));
            }
            for (bi, bus) in f.buses.iter().enumerate() {
                for p in 0..bus.phases.len() {
                    let (re, im) = sv.bus[self.bus_off[bi] + p];
                    let v = st.bus_voltage[bi][p] / self.v_base;
                    x[re] = v.re;
                    if self.nlp.lower[im] < self.nlp.upper[im] {
                        x[im] = v.im;
                    }
                }
            }
            for (l, br) in f.branches.iter().enumerate() {
                for p in 0..br.phases.len() {
                    let (re, im) = sv.branch[self.br_off[l] + p];
                    let i = st.branch_current[l][p] / self.i_base;
                    x[re] = i.re;
                    x[im] = i.im;
                }
            }
            for (u, user) in f.users.iter().enumerate() {
                for p in 0..user.phases.len() {
                    let (re, im) = sv.user[self.user_off[u] + p];
                    let i = st.user_current[u][p] / self.i_base;
                    x[re] = i.re;
                    x[im] = i.im;
                }
            }
        }
        for (l, bp) in self.branch_params.iter().enumerate() {
            let br = &self.feeder.branches[l];
            let tb = truth.branch(&br.id).ok_or_else(|| EstimationError::StateMismatch(format!("branch {} missing in truth", br.id)))?;
            if let (Some(v), Some(params)) = (bp.length_var, self.lle.get(&l)) {
                let len = tb.length_m.ok_or_else(|| EstimationError::StateMismatch(format!("branch {} has no length", br.id)))?;
                x[v] = len / params.guess_m;
                continue;
            }
            for (mat, truth_mat) in [(&bp.r, &tb.impedance.r), (&bp.x, &tb.impedance.x)] {
                for (pi, row) in mat.iter().enumerate() {
                    for (qi, e) in row.iter().enumerate() {
                        if let [(v, a)] = e.terms[..] {
                            if self.nlp.lower[v] < self.nlp.upper[v] {
                                x[v] = truth_mat[pi][qi] / self.z_base / a;
                            }
                        }
                    }
                }
            }
        }
        self.complete(&mut x);
        Ok(x)
    }

    /// Converts a solver point to SI states, an updated feeder and
    /// measurement residuals.
    pub fn recover(&self, x: &[f64], tol: f64) -> Result<EstimationResult, EstimationError> {
        if x.len() != self.num_variables() {
            return Err(EstimationError::Dimension { expected: self.num_variables(), got: x.len() });
        }
        let mut x = x.to_vec();
        self.tighten(&mut x);
        let (objective, max_violation) = self.evaluate(&x)?;
        let f = &self.feeder;
        let mut feeder = f.clone();
        let mut lengths_m = BTreeMap::new();
        for (l, bp) in self.branch_params.iter().enumerate() {
            let (r, xx) = bp.values(&x);
            let br = &mut feeder.branches[l];
            br.impedance.r = r.iter().map(|row| row.iter().map(|v| v * self.z_base).collect()).collect();
            br.impedance.x = xx.iter().map(|row| row.iter().map(|v| v * self.z_base).collect()).collect();
            if let (Some(v), Some(params)) = (bp.length_var, self.lle.get(&l)) {
                let len = x[v] * params.guess_m;
                br.length_m = Some(len);
                lengths_m.insert(br.id.clone(), len);
            } else if !bp.vars.is_empty() {
                br.linecode = None;
            }
        }
        let c = |(re, im): (usize, usize), s: f64| Complex64::new(x[re], x[im]) * s;
        let states = self
            .steps
            .iter()
            .map(|sv| PfState {
                bus_voltage: f
                    .buses
                    .iter()
                    .enumerate()
                    .map(|(bi, bus)| (0..bus.phases.len()).map(|p| c(sv.bus[self.bus_off[bi] + p], self.v_base)).collect())
                    .collect(),
                branch_current: f
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(l, br)| (0..br.phases.len()).map(|p| c(sv.branch[self.br_off[l] + p], self.i_base)).collect())
                    .collect(),
                user_current: f
                    .users
                    .iter()
                    .enumerate()
                    .map(|(u, us)| (0..us.phases.len()).map(|p| c(sv.user[self.user_off[u] + p], self.i_base)).collect())
                    .collect(),
                iterations: 0,
            })
            .collect();
        let residuals = self
            .measurements
            .iter()
            .map(|m| Residual {
                user_id: m.sample.user_id.clone(),
                timestep: m.sample.timestep,
                kind: m.sample.kind,
                phase: m.sample.phase,
                measured: m.sample.value,
                estimated: x[m.value_var] * m.scale,
                sigma: m.sample.sigma,
                normalized: x[m.rho_var],
            })
            .collect();
        Ok(EstimationResult {
            mode: self.mode,
            feeder,
            timesteps: self.timesteps.clone(),
            states,
            residuals,
            lengths_m,
            objective,
            max_violation,
            flagged: max_violation > tol,
        })
    }

    /// Variables and constraints in a JSON document for inspection.
    pub fn debug_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "variables": self.vars.iter().enumerate().map(|(i, v)| serde_json::json!({
                "index": i,
                "info": v,
                "lower": self.nlp.lower[i],
                "upper": self.nlp.upper[i],
                "initial": self.nlp.initial[i],
            })).collect::<Vec<_>>(),
            "constraints": self.nlp.constraints,
            "objective": self.nlp.objective,
        })
    }
}

/// Solves the program and recovers the estimate. The result is flagged
/// when the solver stopped short of optimality.
pub fn estimate(problem: &EstimationProblem, opts: &SolverOptions) -> Result<(EstimationResult, SolveOutcome), EstimationError> {
    let outcome = solve(&problem.nlp, opts)?;
    let mut result = problem.recover(&outcome.point, 1e-6)?;
    if outcome.status != SolveStatus::OptimalLocal {
        result.flagged = true;
    }
    Ok((result, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::{from_states, Provenance};
    use crate::network::{Branch, Bus, BusKind, ImpedanceMatrix, Linecode, PhaseSet, User};
    use crate::powerflow::{self, InjectionSpec, LoadModel, PfOptions};

    fn two_bus() -> Feeder {
        let mut linecodes = BTreeMap::new();
        linecodes.insert("svc".into(), Linecode { r_ohm_per_km: vec![vec![1.0]], x_ohm_per_km: vec![vec![0.08]] });
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
                impedance: ImpedanceMatrix::scalar(0.05, 0.004),
                length_m: Some(50.0),
                linecode: Some("svc".into()),
            }],
            users: vec![User { id: "c".into(), bus: "u".into(), phases: PhaseSet::single(Phase::A), metered: true }],
            base_power_va: 100e3,
            base_voltage_v: 230.0,
            linecodes,
            units: Units::Si,
        }
    }

    fn truth_data(f: &Feeder, loads: &[Complex64]) -> (Vec<PfState>, MeasurementSet) {
        let mut inj = InjectionSpec::zeros(f, loads.len(), LoadModel::ConstantPower);
        for (t, s) in loads.iter().enumerate() {
            inj.steps[t][0][0] = *s;
        }
        let sol = powerflow::solve(f, &inj, &PfOptions::default()).unwrap();
        let steps: Vec<usize> = (0..loads.len()).collect();
        let ms = from_states(f, &sol.steps, &steps, 0.005);
        (sol.steps, ms)
    }

    #[test]
    fn two_bus_counts() {
        let f = two_bus();
        let (_, ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0)]);
        let p = build(&f, &ms, Mode::SeFixedZ, &BuildOptions::default()).unwrap();
        // 2 bus phasors, 1 branch and 1 user current, Umag, P, Q, 3 ρ
        assert_eq!(p.num_variables(), 4 + 2 + 2 + 3 + 3);
        let fixed = (0..p.num_variables()).filter(|&i| p.nlp.lower[i] == p.nlp.upper[i]).count();
        assert_eq!(fixed, 1);
        // KCL 2, Ohm 2, aux 3, epigraph 6
        assert_eq!(p.num_constraints(), 13);
    }

    #[test]
    fn truth_point_has_zero_objective() {
        let f = two_bus();
        let (states, ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0), Complex64::new(500.0, -100.0)]);
        for mode in [Mode::SeFixedZ, Mode::Lle] {
            let p = build(&f, &ms, mode, &BuildOptions::default()).unwrap();
            let x = p.point_from_states(&f, &states).unwrap();
            let (obj, viol) = p.evaluate(&x).unwrap();
            assert!(obj < 1e-9, "{mode:?} {obj}");
            assert!(viol < 1e-9, "{mode:?} {viol}");
        }
    }

    #[test]
    fn solve_recovers_state() {
        let f = two_bus();
        let (states, ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0)]);
        let p = build(&f, &ms, Mode::SeFixedZ, &BuildOptions::default()).unwrap();
        let (res, out) = estimate(&p, &SolverOptions::default()).unwrap();
        assert_eq!(out.status, SolveStatus::OptimalLocal);
        assert!(res.objective < 1e-6, "{}", res.objective);
        let err = (res.states[0].bus_voltage[1][0] - states[0].bus_voltage[1][0]).norm();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_measurements() {
        let f = two_bus();
        let (_, mut ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0)]);
        let empty = MeasurementSet { samples: vec![], step_minutes: 5.0, provenance: Provenance::Synthetic };
        assert!(matches!(build(&f, &empty, Mode::SeFixedZ, &BuildOptions::default()), Err(EstimationError::NoMeasurements)));
        let mut dup = ms.clone();
        dup.samples.push(dup.samples[0].clone());
        assert!(matches!(build(&f, &dup, Mode::SeFixedZ, &BuildOptions::default()), Err(EstimationError::Duplicate(_))));
        ms.samples[0].user_id = "nobody".into();
        assert!(matches!(build(&f, &ms, Mode::SeFixedZ, &BuildOptions::default()), Err(EstimationError::UnknownUser(_))));
    }

    #[test]
    fn recover_tightens_epigraph() {
        let f = two_bus();
        let (_, ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0)]);
        let p = build(&f, &ms, Mode::SeFixedZ, &BuildOptions::default()).unwrap();
        let mut x = p.nlp.initial.clone();
        for m in &p.measurements {
            x[m.rho_var] = 1e3;
        }
        let r = p.recover(&x, 1e-6).unwrap();
        for (res, m) in r.residuals.iter().zip(&p.measurements) {
            assert!((res.normalized - ((x[m.value_var] - m.z_pu) / m.sigma_pu).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn debug_dump_lists_every_variable() {
        let f = two_bus();
        let (_, ms) = truth_data(&f, &[Complex64::new(2000.0, 300.0)]);
        let p = build(&f, &ms, Mode::ImeUntransposed, &BuildOptions::default()).unwrap();
        let v = p.debug_json();
        assert_eq!(v["variables"].as_array().unwrap().len(), p.num_variables());
        assert!(p.vars.iter().any(|v| v.label.as_deref() == Some("r_aa")));
    }
}
