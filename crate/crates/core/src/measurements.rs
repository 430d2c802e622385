//! Smart-meter measurement sets: synthesis from power-flow states, noise,
//! 15-minute aggregation, step selection, splitting and CSV persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::network::{Feeder, Phase};
use crate::powerflow::{InjectionSpec, LoadModel, PfState};

#[derive(Debug, thiserror::Error)]
pub enum MeasurementError {
    #[error("cos phi must be in (0, 1], got {0}")]
    PowerFactor(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("timesteps {0:?} appear in both sets")]
    Overlap(Vec<usize>),
    #[error("requested {requested} timesteps but only {available} are complete")]
    TooFewSteps { requested: usize, available: usize },
    #[error("duplicate sample for user {user}, timestep {timestep}, {kind:?} phase {phase}")]
    Duplicate { user: String, timestep: usize, kind: Kind, phase: Phase },
    #[error("sample for user {user} at timestep {timestep} has non-positive sigma")]
    Sigma { user: String, timestep: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    P,
    Q,
    #[serde(rename = "VM")]
    Vm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: String,
    pub timestep: usize,
    pub kind: Kind,
    pub phase: Phase,
    pub value: f64,
    pub sigma: f64,
}

impl Sample {
    fn key(&self) -> (&str, usize, Kind, Phase) {
        (&self.user_id, self.timestep, self.kind, self.phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Synthetic,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub samples: Vec<Sample>,
    pub step_minutes: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseBasis {
    RelativeToReading,
    #[default]
    RelativeToReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub accuracy_class: f64,
    pub basis: NoiseBasis,
    /// Reference for voltage magnitudes; power references are the per-user
    /// maximum |P| of the set being perturbed.
    pub voltage_reference_v: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { accuracy_class: 0.005, basis: NoiseBasis::RelativeToReference, voltage_reference_v: 230.0, seed: 0 }
    }
}

/// `Q = P · tan(acos(cos φ))`.
pub fn derive_reactive(p: f64, cos_phi: f64) -> Result<f64, MeasurementError> {
    if !(cos_phi > 0.0 && cos_phi <= 1.0) {
        return Err(MeasurementError::PowerFactor(cos_phi));
    }
    Ok(p * cos_phi.acos().tan())
}

/// Standard deviation for a reading under an accuracy class: a third of
/// the maximum error.
pub fn sigma_for(accuracy_class: f64, basis_value: f64) -> f64 {
    accuracy_class / 3.0 * basis_value.abs()
}

impl MeasurementSet {
    pub fn new(samples: Vec<Sample>, step_minutes: f64, provenance: Provenance) -> Result<Self, MeasurementError> {
        let ms = Self { samples, step_minutes, provenance };
        ms.check()?;
        Ok(ms)
    }

    pub fn check(&self) -> Result<(), MeasurementError> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !(s.sigma > 0.0) {
                return Err(MeasurementError::Sigma { user: s.user_id.clone(), timestep: s.timestep });
            }
            if !seen.insert(s.key()) {
                return Err(MeasurementError::Duplicate {
                    user: s.user_id.clone(),
                    timestep: s.timestep,
                    kind: s.kind,
                    phase: s.phase,
                });
            }
        }
        Ok(())
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.timestep).collect();
        set.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filter_steps(&self, keep: &BTreeSet<usize>) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep.contains(&s.timestep)).cloned().collect(),
            step_minutes: self.step_minutes,
            provenance: self.provenance,
        }
    }

    /// Renumbers timesteps to `0..n` in ascending order.
    pub fn renumbered(&self) -> Self {
        let map: HashMap<usize, usize> = self.timesteps().into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        let mut out = self.clone();
        for s in &mut out.samples {
            s.timestep = map[&s.timestep];
        }
        out
    }

    /// Samples in canonical order: timestep, user, kind, phase.
    pub fn sorted(&self) -> Self {
        let mut out = self.clone();
        out.samples.sort_by(|a, b| {
            (a.timestep, &a.user_id, a.kind, a.phase).cmp(&(b.timestep, &b.user_id, b.kind, b.phase))
        });
        out
    }

    /// Constant-power injections from the P/Q samples, one entry per
    /// timestep of the set. Users or phases without samples draw nothing.
    pub fn injections(&self, f: &Feeder) -> InjectionSpec {
        let steps = self.timesteps();
        let pos: HashMap<usize, usize> = steps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let user_pos: HashMap<&str, usize> = f.users.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
        let mut inj = InjectionSpec::zeros(f, steps.len(), LoadModel::ConstantPower);
        for s in &self.samples {
            let Some(&u) = user_pos.get(s.user_id.as_str()) else { continue };
            let Some(k) = f.users[u].phases.position(s.phase) else { continue };
            let slot = &mut inj.steps[pos[&s.timestep]][u][k];
            match s.kind {
                Kind::P => slot.re = s.value,
                Kind::Q => slot.im = s.value,
                Kind::Vm => {}
            }
        }
        inj
    }
}

/// Clean P, Q and voltage-magnitude samples of every metered user from
/// power-flow states. `timesteps[i]` labels `states[i]`. σ follows the
/// reference basis at `accuracy_class`.
pub fn from_states(f: &Feeder, states: &[PfState], timesteps: &[usize], accuracy_class: f64) -> MeasurementSet {
    let topo = f.topology();
    let mut samples = Vec::new();
    let powers: Vec<Vec<Vec<Complex64>>> = states.iter().map(|s| s.user_power(f, &topo)).collect();
    let volts: Vec<Vec<Vec<f64>>> = states.iter().map(|s| s.user_voltage(f, &topo)).collect();
    for (u, user) in f.users.iter().enumerate() {
        if !user.metered {
            continue;
        }
        let pmax = powers.iter().flat_map(|st| st[u].iter().map(|s| s.re.abs())).fold(0.0f64, f64::max);
        let p_sigma = sigma_for(accuracy_class, pmax.max(1.0));
        let vn = f.buses[topo.bus_index[&user.bus]].base_voltage_v;
        let v_sigma = sigma_for(accuracy_class, vn);
        for (i, &t) in timesteps.iter().enumerate() {
            for (k, phase) in user.phases.iter().enumerate() {
                let s = powers[i][u][k];
                let mk = |kind, value, sigma| Sample { user_id: user.id.clone(), timestep: t, kind, phase, value, sigma };
                samples.push(mk(Kind::P, s.re, p_sigma));
                samples.push(mk(Kind::Q, s.im, p_sigma));
                samples.push(mk(Kind::Vm, volts[i][u][k], v_sigma));
            }
        }
    }
    MeasurementSet { samples, step_minutes: 5.0, provenance: Provenance::Synthetic }.sorted()
}

fn stream_key(s: &Sample) -> u64 {
    // FNV-1a over the sample identity; stable across platforms and runs
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(s.user_id.as_bytes());
    eat(&[0xff]);
    eat(&(s.timestep as u64).to_le_bytes());
    eat(&[s.kind as u8, s.phase as u8]);
    h
}

/// Adds zero-mean Gaussian noise with σ = class/3 · basis to every sample
/// and stores that σ. Class 0 returns the input unchanged.
pub fn add_noise(clean: &MeasurementSet, model: &NoiseModel) -> MeasurementSet {
    if model.accuracy_class == 0.0 {
        return clean.clone();
    }
    let mut pmax: HashMap<&str, f64> = HashMap::new();
    for s in clean.samples.iter().filter(|s| s.kind == Kind::P) {
        let e = pmax.entry(&s.user_id).or_insert(0.0);
        *e = e.max(s.value.abs());
    }
    let samples = clean
        .samples
        .iter()
        .map(|s| {
            let reference = match s.kind {
                Kind::Vm => model.voltage_reference_v,
                Kind::P | Kind::Q => pmax.get(s.user_id.as_str()).copied().unwrap_or(0.0).max(1.0),
            };
            let basis = match model.basis {
                NoiseBasis::RelativeToReference => reference,
                // floor keeps weights finite at zero readings
                NoiseBasis::RelativeToReading => s.value.abs().max(0.01 * reference),
            };
            let sigma = sigma_for(model.accuracy_class, basis);
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
            rng.set_stream(stream_key(s));
            let z: f64 = StandardNormal.sample(&mut rng);
            Sample { value: s.value + sigma * z, sigma, ..s.clone() }
        })
        .collect();
    MeasurementSet { samples, step_minutes: clean.step_minutes, provenance: clean.provenance }
}

/// Outcome of [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub set: MeasurementSet,
    /// Output timesteps dropped because a series had fewer than three
    /// samples in the group.
    pub dropped: Vec<usize>,
}

/// Averages groups of three consecutive steps (`t / 3`) into one.
pub fn aggregate(five_min: &MeasurementSet) -> Aggregated {
    const GROUP: usize = 3;
    let mut groups: BTreeMap<(usize, &str, Kind, Phase), Vec<&Sample>> = BTreeMap::new();
    for s in &five_min.samples {
        groups.entry((s.timestep / GROUP, &s.user_id, s.kind, s.phase)).or_default().push(s);
    }
    let incomplete: BTreeSet<usize> = groups.iter().filter(|(_, v)| v.len() < GROUP).map(|(k, _)| k.0).collect();
    let samples = groups
        .iter()
        .filter(|(k, _)| !incomplete.contains(&k.0))
        .map(|(&(t, user, kind, phase), v)| {
            let n = v.len() as f64;
            let value = v.iter().map(|s| s.value).sum::<f64>() / n;
            let sigma = v.iter().map(|s| s.sigma * s.sigma).sum::<f64>().sqrt() / n;
            Sample { user_id: user.to_string(), timestep: t, kind, phase, value, sigma }
        })
        .collect();
    let set = MeasurementSet { samples, step_minutes: five_min.step_minutes * GROUP as f64, provenance: five_min.provenance };
    Aggregated { set: set.sorted(), dropped: incomplete.into_iter().collect() }
}

/// Outcome of [`select_steps`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub set: MeasurementSet,
    pub kept: Vec<usize>,
    /// Timesteps missing a voltage sample of some metered user phase.
    pub excluded: Vec<usize>,
}

/// Largest measured voltage drop below nominal over metered user phases,
/// per timestep; `None` when any voltage sample is missing.
pub fn voltage_drops(ms: &MeasurementSet, f: &Feeder) -> BTreeMap<usize, Option<f64>> {
    let nominal: HashMap<&str, f64> = f
        .users
        .iter()
        .filter_map(|u| f.bus(&u.bus).map(|b| (u.id.as_str(), b.base_voltage_v)))
        .collect();
    let required: Vec<(&str, Phase)> =
        f.users.iter().filter(|u| u.metered).flat_map(|u| u.phases.iter().map(move |p| (u.id.as_str(), p))).collect();
    let mut vm: HashMap<(usize, &str, Phase), f64> = HashMap::new();
    for s in ms.samples.iter().filter(|s| s.kind == Kind::Vm) {
        vm.insert((s.timestep, &s.user_id, s.phase), s.value);
    }
    ms.timesteps()
        .into_iter()
        .map(|t| {
            let mut drop = f64::NEG_INFINITY;
            for &(u, p) in &required {
                match vm.get(&(t, u, p)) {
                    Some(v) => drop = drop.max(nominal[u] - v),
                    None => return (t, None),
                }
            }
            (t, Some(drop))
        })
        .collect()
}

/// Keeps the `n` timesteps with the largest voltage drop (ties by lower
/// timestep index).
pub fn select_steps(ms: &MeasurementSet, f: &Feeder, n: usize) -> Result<Selection, MeasurementError> {
    let drops = voltage_drops(ms, f);
    let excluded: Vec<usize> = drops.iter().filter(|(_, d)| d.is_none()).map(|(&t, _)| t).collect();
    let mut ranked: Vec<(usize, f64)> = drops.iter().filter_map(|(&t, d)| d.map(|d| (t, d))).collect();
    if n > ranked.len() {
        return Err(MeasurementError::TooFewSteps { requested: n, available: ranked.len() });
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: BTreeSet<usize> = ranked[..n].iter().map(|r| r.0).collect();
    Ok(Selection { set: ms.filter_steps(&keep), kept: keep.into_iter().collect(), excluded })
}

/// Partitions a set by timestep.
pub fn split(
    ms: &MeasurementSet,
    train_steps: &[usize],
    validation_steps: &[usize],
) -> Result<(MeasurementSet, MeasurementSet), MeasurementError> {
    let train: BTreeSet<usize> = train_steps.iter().copied().collect();
    let val: BTreeSet<usize> = validation_steps.iter().copied().collect();
    let overlap: Vec<usize> = train.intersection(&val).copied().collect();
    if !overlap.is_empty() {
        return Err(MeasurementError::Overlap(overlap));
    }
    Ok((ms.filter_steps(&train), ms.filter_steps(&val)))
}

pub fn save_csv(ms: &MeasurementSet, path: &Path) -> Result<(), MeasurementError> {
    let file = std::fs::File::create(path)?;
    write_csv(ms, file)
}

pub fn write_csv<W: std::io::Write>(ms: &MeasurementSet, out: W) -> Result<(), MeasurementError> {
    let mut w = csv::Writer::from_writer(out);
    for s in &ms.samples {
        w.serialize(s).map_err(|e| MeasurementError::Csv { line: 0, message: e.to_string() })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<MeasurementSet, MeasurementError> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// Reads the `user_id,timestep,kind,phase,value,sigma` format. Rows are
/// kept in file order; the step length defaults to 15 minutes.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<MeasurementSet, MeasurementError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = r.headers().map_err(|e| csv_error(&e))?.clone();
    for need in ["user_id", "timestep", "kind", "phase", "value", "sigma"] {
        if !headers.iter().any(|h| h == need) {
            return Err(MeasurementError::Csv { line: 1, message: format!("missing column {need}") });
        }
    }
    let mut samples = Vec::new();
    for rec in r.deserialize::<Sample>() {
        samples.push(rec.map_err(|e| csv_error(&e))?);
    }
    MeasurementSet::new(samples, 15.0, Provenance::Imported)
}

fn csv_error(e: &csv::Error) -> MeasurementError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    MeasurementError::Csv { line, message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(user: &str, t: usize, kind: Kind, value: f64, sigma: f64) -> Sample {
        Sample { user_id: user.into(), timestep: t, kind, phase: Phase::A, value, sigma }
    }

    #[test]
    fn reactive_from_power_factor() {
        let q = derive_reactive(1000.0, 0.97).unwrap();
        assert!((q - 250.6).abs() < 0.05, "{q}");
        assert_eq!(derive_reactive(1000.0, 1.0).unwrap(), 0.0);
        assert_eq!(derive_reactive(0.0, 0.97).unwrap(), 0.0);
        assert!(derive_reactive(1.0, 0.0).is_err());
        assert!(derive_reactive(1.0, 1.2).is_err());
    }

    #[test]
    fn voltage_sigma_at_half_percent() {
        let s = sigma_for(0.005, 230.0);
        assert!((s - 0.3833).abs() < 1e-3);
    }

    #[test]
    fn zero_class_is_identity() {
        let ms = MeasurementSet { samples: vec![sample("u", 0, Kind::Vm, 229.0, 0.3)], step_minutes: 5.0, provenance: Provenance::Synthetic };
        let m = NoiseModel { accuracy_class: 0.0, ..NoiseModel::default() };
        assert_eq!(add_noise(&ms, &m), ms);
    }

    #[test]
    fn aggregation_means_and_sigma() {
        let ms = MeasurementSet {
            samples: vec![
                sample("u", 0, Kind::Vm, 1.0, 0.383),
                sample("u", 1, Kind::Vm, 2.0, 0.383),
                sample("u", 2, Kind::Vm, 3.0, 0.383),
                sample("u", 3, Kind::Vm, 5.0, 0.383),
            ],
            step_minutes: 5.0,
            provenance: Provenance::Synthetic,
        };
        let a = aggregate(&ms);
        assert_eq!(a.dropped, vec![1]);
        assert_eq!(a.set.samples.len(), 1);
        assert_eq!(a.set.samples[0].value, 2.0);
        assert!((a.set.samples[0].sigma - 0.383 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.set.step_minutes, 15.0);
    }

    #[test]
    fn split_rejects_overlap() {
        let ms = MeasurementSet { samples: vec![sample("u", 0, Kind::P, 1.0, 1.0)], step_minutes: 15.0, provenance: Provenance::Synthetic };
        assert!(matches!(split(&ms, &[0, 1], &[1]), Err(MeasurementError::Overlap(v)) if v == vec![1]));
        let (a, b) = split(&ms, &[0], &[]).unwrap();
        assert_eq!(a, ms);
        assert!(b.is_empty());
    }

    #[test]
    fn csv_missing_sigma_column() {
        let text = "user_id,timestep,kind,phase,value\nu,0,P,a,1.0\n";
        let e = read_csv(text.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("sigma"), "{e}");
    }

    #[test]
    fn csv_bad_row_reports_line() {
        let text = "user_id,timestep,kind,phase,value,sigma\nu,0,P,a,1.0,0.1\nu,1,X,a,1.0,0.1\n";
        match read_csv(text.as_bytes()) {
            Err(MeasurementError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_samples_rejected() {
        let text = "user_id,timestep,kind,phase,value,sigma\nu,0,P,a,1.0,0.1\nu,0,P,a,2.0,0.1\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(MeasurementError::Duplicate { .. })));
    }
}
