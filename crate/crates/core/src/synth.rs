//! Synthetic feeders, load profiles and measurement scenarios.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::measurements::{
    add_noise, aggregate, from_states, select_steps, split, MeasurementError, MeasurementSet, NoiseModel, Selection,
};
use crate::network::{Branch, Bus, BusKind, Feeder, ImpedanceMatrix, Linecode, Phase, PhaseSet, Units, User};
use crate::powerflow::{self, InjectionSpec, LoadModel, PfOptions, PfState, PowerFlowError};

pub const THREE_PHASE_CODE: &str = "ug3";
pub const SERVICE_CODE: &str = "svc";

/// Underground three-phase cable from sequence data
/// R1 0.2, R0 0.7, X1 0.07, X0 0.08 Ω/km.
pub fn three_phase_linecode() -> Linecode {
    let (r1, r0, x1, x0) = (0.2, 0.7, 0.07, 0.08);
    let z = ImpedanceMatrix::balanced(3, (r0 + 2.0 * r1) / 3.0, (r0 - r1) / 3.0, (x0 + 2.0 * x1) / 3.0, (x0 - x1) / 3.0);
    Linecode { r_ohm_per_km: z.r, x_ohm_per_km: z.x }
}

pub fn service_linecode() -> Linecode {
    Linecode { r_ohm_per_km: vec![vec![1.0]], x_ohm_per_km: vec![vec![0.08]] }
}

/// Incremental construction of a radial feeder with a three-phase
/// backbone and service cables to users.
#[derive(Debug, Clone)]
pub struct FeederBuilder {
    feeder: Feeder,
}

impl FeederBuilder {
    pub fn new(base_voltage_v: f64, base_power_va: f64) -> Self {
        let mut linecodes = BTreeMap::new();
        linecodes.insert(THREE_PHASE_CODE.to_string(), three_phase_linecode());
        linecodes.insert(SERVICE_CODE.to_string(), service_linecode());
        let feeder = Feeder {
            buses: vec![Bus { id: "src".into(), phases: PhaseSet::abc(), kind: BusKind::Source, base_voltage_v }],
            branches: Vec::new(),
            users: Vec::new(),
            base_power_va,
            base_voltage_v,
            linecodes,
            units: Units::Si,
        };
        Self { feeder }
    }

    pub fn source(&self) -> &str {
        &self.feeder.buses[0].id
    }

    fn add_bus(&mut self, id: String, phases: PhaseSet, kind: BusKind) {
        let v = self.feeder.base_voltage_v;
        self.feeder.buses.push(Bus { id, phases, kind, base_voltage_v: v });
    }

    fn add_branch(&mut self, from: &str, to: &str, phases: PhaseSet, code: &str, length_m: f64) {
        let lc = &self.feeder.linecodes[code];
        let z = if phases.len() == lc.r_ohm_per_km.len() {
            lc.impedance(length_m)
        } else {
            // single phase of a multi-phase code: its self impedance
            let full = lc.impedance(length_m);
            ImpedanceMatrix::scalar(full.r[0][0], full.x[0][0])
        };
        let id = format!("l{}", self.feeder.branches.len());
        self.feeder.branches.push(Branch {
            id,
            from: from.into(),
            to: to.into(),
            phases,
            impedance: z,
            length_m: Some(length_m),
            linecode: Some(code.into()),
        });
    }

    /// Adds a three-phase junction below `parent` and returns its id.
    pub fn backbone(&mut self, parent: &str, length_m: f64) -> String {
        let id = format!("n{}", self.feeder.buses.len());
        self.add_bus(id.clone(), PhaseSet::abc(), BusKind::Junction);
        self.add_branch(parent, &id, PhaseSet::abc(), THREE_PHASE_CODE, length_m);
        id
    }

    /// Adds a user bus below `parent` with its own service cable.
    pub fn user(&mut self, parent: &str, phases: PhaseSet, length_m: f64) -> String {
        let k = self.feeder.users.len();
        let bus = format!("u{k}");
        let code = if phases.len() == 3 { THREE_PHASE_CODE } else { SERVICE_CODE };
        self.add_bus(bus.clone(), phases.clone(), BusKind::UserConnection);
        self.add_branch(parent, &bus, phases.clone(), code, length_m);
        let id = format!("c{k}");
        self.feeder.users.push(User { id: id.clone(), bus, phases, metered: true });
        id
    }

    pub fn finish(self) -> Feeder {
        self.feeder
    }
}

const PHASES: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

/// Source, 7 backbone junctions and 12 single-phase users: 20 buses.
pub fn twenty_bus() -> Feeder {
    let mut b = FeederBuilder::new(230.0, 100e3);
    let mut prev = b.source().to_string();
    let mut backbone: Vec<String> = Vec::new();
    for (i, len) in [60.0, 45.0, 50.0, 40.0, 55.0, 35.0, 30.0].into_iter().enumerate() {
        let parent = if i == 4 { backbone[1].clone() } else { prev.clone() };
        prev = b.backbone(&parent, len);
        backbone.push(prev.clone());
    }
    for k in 0..12 {
        let parent = backbone[k % backbone.len()].clone();
        b.user(&parent, PhaseSet::single(PHASES[k % 3]), 15.0 + 3.0 * k as f64);
    }
    b.finish()
}

/// Source, 12 backbone junctions and 12 users (3 of them three-phase):
/// 25 buses.
pub fn twenty_five_bus() -> Feeder {
    let mut b = FeederBuilder::new(230.0, 100e3);
    let lens = [70.0, 55.0, 60.0, 45.0, 50.0, 65.0, 40.0, 55.0, 35.0, 60.0, 45.0, 50.0];
    let parents = [0usize, 1, 2, 3, 2, 5, 6, 1, 8, 9, 4, 7];
    let mut ids = vec![b.source().to_string()];
    for (len, &p) in lens.iter().zip(&parents) {
        let parent = ids[p].clone();
        ids.push(b.backbone(&parent, *len));
    }
    let mut single = 0;
    for k in 0..12 {
        let parent = ids[1 + k].clone();
        let len = 12.0 + 4.0 * ((k * 7) % 10) as f64;
        if k % 4 == 0 {
            b.user(&parent, PhaseSet::abc(), len);
        } else {
            b.user(&parent, PhaseSet::single(PHASES[single % 3]), len);
            single += 1;
        }
    }
    b.finish()
}

/// A large feeder whose reduction has 109 buses and 108 branches:
/// 54 three-phase buses and 55 single-phase users. Extra degree-2
/// junctions bring the unreduced size to 906 buses.
pub fn eltf_like(seed: u64) -> Feeder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = FeederBuilder::new(230.0, 250e3);
    let mut ids = vec![b.source().to_string()];
    for i in 0..53 {
        // mostly chains with occasional laterals
        let parent = if i > 3 && rng.random_bool(0.25) { ids[rng.random_range(1..ids.len())].clone() } else { ids[ids.len() - 1].clone() };
        let len = rng.random_range(20.0..60.0);
        ids.push(b.backbone(&parent, len));
    }
    for k in 0..55 {
        let parent = if k < 53 { ids[1 + k].clone() } else { ids[1 + rng.random_range(0..53)].clone() };
        let len = rng.random_range(8.0..40.0);
        b.user(&parent, PhaseSet::single(PHASES[k % 3]), len);
    }
    let reduced = b.finish();
    subdivide(&reduced, 906 - reduced.buses.len(), &mut rng)
}

/// Splits random branches with degree-2 junctions until `extra` buses are
/// added. Impedance and length are split proportionally.
pub fn subdivide<R: Rng>(f: &Feeder, extra: usize, rng: &mut R) -> Feeder {
    let mut out = f.clone();
    for k in 0..extra {
        let l = rng.random_range(0..out.branches.len());
        let frac: f64 = rng.random_range(0.2..0.8);
        let br = out.branches[l].clone();
        let mid = format!("j{k}");
        let v = out.bus(&br.from).map(|b| b.base_voltage_v).unwrap_or(out.base_voltage_v);
        out.buses.push(Bus { id: mid.clone(), phases: br.phases.clone(), kind: BusKind::Junction, base_voltage_v: v });
        let first = Branch {
            to: mid.clone(),
            impedance: br.impedance.map(|z| z * frac),
            length_m: br.length_m.map(|x| x * frac),
            ..br.clone()
        };
        let second = Branch {
            id: format!("{}_{k}", br.id),
            from: mid,
            impedance: br.impedance.map(|z| z * (1.0 - frac)),
            length_m: br.length_m.map(|x| x * (1.0 - frac)),
            ..br
        };
        out.branches[l] = first;
        out.branches.push(second);
    }
    out
}

/// A random radial feeder of `n_backbone` junctions and `n_users` users,
/// with `extra` degree-2 junctions inserted.
pub fn random_chain<R: Rng>(rng: &mut R, n_backbone: usize, n_users: usize, extra: usize) -> Feeder {
    let mut b = FeederBuilder::new(230.0, 100e3);
    let mut ids = vec![b.source().to_string()];
    for _ in 0..n_backbone {
        let parent = ids[rng.random_range(0..ids.len())].clone();
        ids.push(b.backbone(&parent, rng.random_range(10.0..80.0)));
    }
    for k in 0..n_users {
        let lo = if ids.len() > 1 { 1 } else { 0 };
        let parent = ids[rng.random_range(lo..ids.len())].clone();
        let phases = if rng.random_bool(0.2) { PhaseSet::abc() } else { PhaseSet::single(PHASES[k % 3]) };
        b.user(&parent, phases, rng.random_range(5.0..40.0));
    }
    subdivide(&b.finish(), extra, rng)
}

/// Lengths scaled by independent factors in `[1 - rel, 1 + rel]`, with
/// impedances recomputed from the linecodes.
pub fn perturb_lengths<R: Rng>(f: &Feeder, rel: f64, rng: &mut R) -> Feeder {
    let mut out = f.clone();
    for br in &mut out.branches {
        let Some(len) = br.length_m else { continue };
        let k = if rel > 0.0 { rng.random_range(1.0 - rel..1.0 + rel) } else { 1.0 };
        br.length_m = Some(len * k);
        br.impedance = br.impedance.map(|z| z * k);
    }
    out
}

/// Per-phase complex power (VA) drawn by each user at each step: a daily
/// shape with random amplitude, noise and power factor between 0.9 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub mean_kw: f64,
    pub spread: f64,
    pub step_minutes: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { mean_kw: 2.0, spread: 0.6, step_minutes: 15.0 }
    }
}

pub fn load_profiles(f: &Feeder, n_steps: usize, opts: &ProfileOptions, seed: u64) -> InjectionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.spread).unwrap();
    let mut inj = InjectionSpec::zeros(f, n_steps, LoadModel::ConstantPower);
    for (u, user) in f.users.iter().enumerate() {
        let scale = opts.mean_kw * 1e3 * rng.random_range(0.5..1.5);
        let phase_shift = rng.random_range(0.0..std::f64::consts::TAU);
        let pf: f64 = rng.random_range(0.9..1.0);
        let tan = (1.0 - pf * pf).sqrt() / pf;
        for t in 0..n_steps {
            let hours = t as f64 * opts.step_minutes / 60.0;
            let shape = 1.0 + 0.5 * (std::f64::consts::TAU * hours / 24.0 + phase_shift).sin();
            let total = (scale * (shape + noise.sample(&mut rng))).max(0.05 * scale);
            let n = user.phases.len() as f64;
            for k in 0..user.phases.len() {
                let p = total / n * rng.random_range(0.8..1.2);
                inj.steps[t][u][k] = Complex64::new(p, p * tan);
            }
        }
    }
    inj
}

/// A generated data set: true feeder, states and measurements.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: Feeder,
    /// Injections of the output steps (aggregated when requested).
    pub injections: InjectionSpec,
    pub states: Vec<PfState>,
    pub clean: MeasurementSet,
    pub noisy: MeasurementSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioOptions {
    /// Output timesteps.
    pub steps: usize,
    /// Simulate three 5-minute steps per output step and average them.
    pub aggregate: bool,
    pub mean_kw: f64,
    pub spread: f64,
    /// When false the noisy set equals the clean one.
    pub noisy: bool,
    pub noise: NoiseModel,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self { steps: 100, aggregate: true, mean_kw: 2.0, spread: 0.6, noisy: true, noise: NoiseModel::default() }
    }
}

/// Profiles, power flow, meter readings with noise and optional 15-minute
/// aggregation. States and injections refer to the output steps.
pub fn scenario(truth: &Feeder, opts: &ScenarioOptions, seed: u64) -> Result<Scenario, PowerFlowError> {
    let per = if opts.aggregate { 3 } else { 1 };
    let profile = ProfileOptions { mean_kw: opts.mean_kw, spread: opts.spread, step_minutes: 15.0 / per as f64 };
    let fine = load_profiles(truth, opts.steps * per, &profile, seed);
    let sol = powerflow::solve(truth, &fine, &PfOptions::default())?;
    let fine_steps: Vec<usize> = (0..fine.num_steps()).collect();
    let clean = from_states(truth, &sol.steps, &fine_steps, opts.noise.accuracy_class);
    let noisy = if opts.noisy { add_noise(&clean, &opts.noise) } else { clean.clone() };
    if !opts.aggregate {
        let clean = MeasurementSet { step_minutes: 15.0, ..clean };
        let noisy = MeasurementSet { step_minutes: 15.0, ..noisy };
        return Ok(Scenario { truth: truth.clone(), injections: fine, states: sol.steps, clean, noisy });
    }
    let mut injections = InjectionSpec::zeros(truth, opts.steps, fine.model);
    for (t, step) in injections.steps.iter_mut().enumerate() {
        for (u, user) in step.iter_mut().enumerate() {
            for (k, s) in user.iter_mut().enumerate() {
                *s = (0..per).map(|i| fine.steps[t * per + i][u][k]).sum::<Complex64>() / per as f64;
            }
        }
    }
    let states = powerflow::solve(truth, &injections, &PfOptions::default())?.steps;
    Ok(Scenario {
        truth: truth.clone(),
        injections,
        states,
        clean: aggregate(&clean).set,
        noisy: aggregate(&noisy).set,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error("unknown branch {0}")]
    UnknownBranch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentOptions {
    pub scenario: ScenarioOptions,
    pub train_steps: usize,
    pub validation_steps: usize,
    /// Relative half-width of the uniform length error of the input feeder.
    pub length_perturbation: f64,
    /// Branches copied unchanged from the truth into the input feeder.
    pub exact: Vec<String>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            scenario: ScenarioOptions { steps: 288, ..ScenarioOptions::default() },
            train_steps: 50,
            validation_steps: 10,
            length_perturbation: 0.3,
            exact: Vec::new(),
        }
    }
}

/// A simulated estimation case: truth, perturbed input feeder and noisy
/// measurements split into training and validation steps.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub truth: Feeder,
    pub input: Feeder,
    pub scenario: Scenario,
    pub selection: Selection,
    pub train_steps: Vec<usize>,
    pub validation_steps: Vec<usize>,
    pub train: MeasurementSet,
    pub validation: MeasurementSet,
    pub validation_clean: MeasurementSet,
    pub validation_injections: InjectionSpec,
}

/// Takes `n` steps evenly spread over `kept`, the rest go to training.
pub fn holdout(kept: &[usize], n: usize) -> (Vec<usize>, Vec<usize>) {
    if n == 0 || kept.is_empty() {
        return (kept.to_vec(), Vec::new());
    }
    let stride = (kept.len() / n).max(1);
    let val: Vec<usize> = (0..n.min(kept.len())).map(|i| kept[(i * stride + stride - 1).min(kept.len() - 1)]).collect();
    let train = kept.iter().copied().filter(|t| !val.contains(t)).collect();
    (train, val)
}

/// Runs the whole synthetic pipeline. Profile, noise and perturbation
/// seeds are drawn from `seed`.
pub fn experiment(truth: &Feeder, opts: &ExperimentOptions, seed: u64) -> Result<Experiment, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile_seed: u64 = rng.random();
    let mut sopts = opts.scenario.clone();
    sopts.noise.seed = rng.random();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.random());

    let mut input = perturb_lengths(truth, opts.length_perturbation, &mut prng);
    for id in &opts.exact {
        let i = truth.branches.iter().position(|b| &b.id == id).ok_or_else(|| SynthError::UnknownBranch(id.clone()))?;
        input.branches[i] = truth.branches[i].clone();
    }

    let scenario = scenario(truth, &sopts, profile_seed)?;
    let selection = select_steps(&scenario.noisy, &input, opts.train_steps + opts.validation_steps)?;
    let (train_steps, validation_steps) = holdout(&selection.kept, opts.validation_steps);
    let (train, validation) = split(&scenario.noisy, &train_steps, &validation_steps)?;
    let validation_clean = scenario.clean.filter_steps(&validation_steps.iter().copied().collect());
    let validation_injections = InjectionSpec {
        model: scenario.injections.model,
        steps: validation_steps.iter().map(|&t| scenario.injections.steps[t].clone()).collect(),
    };
    Ok(Experiment {
        truth: truth.clone(),
        input,
        scenario,
        selection,
        train_steps,
        validation_steps,
        train,
        validation,
        validation_clean,
        validation_injections,
    })
}

/// Single-phase DC circuit: source `0`, junction `1`, users at `1p`
/// (1 A) and `2p` (2 A) via junction `2`. Resistance is 1 Ω per length
/// unit (one metre here). Default lengths `(1, 1, 0.5, 1)` give 230 V at
/// `1p` and 228 V at `2p` from a 234 V source.
pub fn dc_fixture(lengths: [f64; 4]) -> Feeder {
    let ph = PhaseSet::single(Phase::A);
    let bus = |id: &str, kind| Bus { id: id.into(), phases: ph.clone(), kind, base_voltage_v: 230.0 };
    let code = Linecode { r_ohm_per_km: vec![vec![1000.0]], x_ohm_per_km: vec![vec![0.0]] };
    let br = |id: &str, from: &str, to: &str, len: f64| Branch {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        phases: ph.clone(),
        impedance: code.impedance(len),
        length_m: Some(len),
        linecode: Some("dc".into()),
    };
    let mut linecodes = BTreeMap::new();
    linecodes.insert("dc".to_string(), code.clone());
    Feeder {
        buses: vec![
            bus("0", BusKind::Source),
            bus("1", BusKind::Junction),
            bus("1p", BusKind::UserConnection),
            bus("2", BusKind::Junction),
            bus("2p", BusKind::UserConnection),
        ],
        branches: vec![
            br("l0", "0", "1", lengths[0]),
            br("l1", "1", "1p", lengths[1]),
            br("l2", "1", "2", lengths[2]),
            br("l2p", "2", "2p", lengths[3]),
        ],
        users: vec![
            User { id: "c1".into(), bus: "1p".into(), phases: ph.clone(), metered: true },
            User { id: "c2".into(), bus: "2p".into(), phases: ph, metered: true },
        ],
        base_power_va: 100e3,
        base_voltage_v: 230.0,
        linecodes,
        units: Units::Si,
    }
}

/// Power drawn in the DC fixture: 230 W at `1p` and 456 W at `2p`.
pub fn dc_injections(f: &Feeder) -> InjectionSpec {
    let mut inj = InjectionSpec::zeros(f, 1, LoadModel::ConstantPower);
    inj.steps[0][0][0] = Complex64::new(230.0, 0.0);
    inj.steps[0][1][0] = Complex64::new(456.0, 0.0);
    inj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{reduce, validate};

    #[test]
    fn fixture_sizes() {
        let f = twenty_bus();
        assert_eq!(f.buses.len(), 20);
        assert!(validate(&f).is_empty());
        let f = twenty_five_bus();
        assert_eq!((f.buses.len(), f.users.len()), (25, 12));
        assert!(validate(&f).is_empty());
        assert_eq!(reduce(&f).unwrap(), f);
    }

    #[test]
    fn eltf_like_reduces_to_109() {
        let f = eltf_like(7);
        assert_eq!(f.buses.len(), 906);
        let r = reduce(&f).unwrap();
        assert_eq!((r.buses.len(), r.branches.len()), (109, 108));
        assert_eq!(r.buses.iter().filter(|b| b.phases.len() == 3).count(), 54);
        assert_eq!(r.users.len(), 55);
    }

    #[test]
    fn cable_data_satisfies_bounds() {
        let lc = three_phase_linecode();
        assert!((lc.r_ohm_per_km[0][0] - 0.36667).abs() < 1e-4);
        assert!((lc.r_ohm_per_km[0][1] - 0.16667).abs() < 1e-4);
        assert!((lc.x_ohm_per_km[0][0] - 0.07333).abs() < 1e-4);
        assert!((lc.x_ohm_per_km[0][1] - 0.00333).abs() < 1e-4);
    }

    #[test]
    fn dc_fixture_voltages() {
        let f = dc_fixture([1.0, 1.0, 0.5, 1.0]);
        let opts = PfOptions { source_voltage: Some(vec![Complex64::new(234.0, 0.0)]), ..PfOptions::default() };
        let s = powerflow::solve(&f, &dc_injections(&f), &opts).unwrap();
        assert!((s.steps[0].bus_voltage[2][0].re - 230.0).abs() < 1e-9);
        assert!((s.steps[0].bus_voltage[4][0].re - 228.0).abs() < 1e-9);
    }

    #[test]
    fn profiles_are_reproducible() {
        let f = twenty_bus();
        let a = load_profiles(&f, 5, &ProfileOptions::default(), 3);
        let b = load_profiles(&f, 5, &ProfileOptions::default(), 3);
        assert_eq!(a, b);
        assert!(a.steps.iter().flatten().flatten().all(|s| s.re > 0.0));
    }
}
