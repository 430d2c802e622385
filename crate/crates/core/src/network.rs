//! Feeder data model: buses, branches with phase impedance matrices, and
//! metered users. Validation, series reduction, per-unit conversion and
//! cumulative path impedances live here too.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid feeder: {0}")]
    Invalid(String),
    #[error("feeder is meshed; path from {0} to the source is not unique")]
    Meshed(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("bus {0} is not reachable from the source")]
    Unreachable(String),
    #[error("phase {phase} of user {user} is not carried by branch {branch}")]
    PhaseNotOnPath { user: String, phase: Phase, branch: String },
    #[error("per-unit bases must be positive")]
    InvalidBase,
    #[error("feeder is already in {0:?} units")]
    Units(Units),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Angle of the balanced nominal phasor in radians.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::FRAC_PI_3,
            Phase::C => 2.0 * std::f64::consts::FRAC_PI_3,
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "a" | "A" => Some(Phase::A),
            "b" | "B" => Some(Phase::B),
            "c" | "C" => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        })
    }
}

/// Non-empty set of phases, kept in a-b-c order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Phase>", into = "Vec<Phase>")]
pub struct PhaseSet(Vec<Phase>);

impl PhaseSet {
    pub fn new(mut phases: Vec<Phase>) -> Result<Self, String> {
        if phases.is_empty() {
            return Err("empty phase set".into());
        }
        phases.sort();
        let n = phases.len();
        phases.dedup();
        if phases.len() != n {
            return Err("duplicate phase".into());
        }
        Ok(Self(phases))
    }

    pub fn abc() -> Self {
        Self(Phase::ALL.to_vec())
    }

    pub fn single(p: Phase) -> Self {
        Self(vec![p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Phase> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[Phase] {
        &self.0
    }

    pub fn contains(&self, p: Phase) -> bool {
        self.0.contains(&p)
    }

    pub fn position(&self, p: Phase) -> Option<usize> {
        self.0.iter().position(|&q| q == p)
    }

    pub fn is_subset(&self, other: &PhaseSet) -> bool {
        self.0.iter().all(|p| other.contains(*p))
    }
}

impl TryFrom<Vec<Phase>> for PhaseSet {
    type Error = String;
    fn try_from(v: Vec<Phase>) -> Result<Self, String> {
        PhaseSet::new(v)
    }
}

impl From<PhaseSet> for Vec<Phase> {
    fn from(p: PhaseSet) -> Self {
        p.0
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// Series impedance `R + jX` in phase coordinates, indexed by position in
/// the owning branch's phase set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceMatrix {
    #[serde(rename = "r_ohm")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "x_ohm")]
    pub x: Vec<Vec<f64>>,
}

impl ImpedanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { r: vec![vec![0.0; n]; n], x: vec![vec![0.0; n]; n] }
    }

    pub fn scalar(r: f64, x: f64) -> Self {
        Self { r: vec![vec![r]], x: vec![vec![x]] }
    }

    /// Transposed-line matrix from self and mutual entries.
    pub fn balanced(n: usize, rs: f64, rm: f64, xs: f64, xm: f64) -> Self {
        let mut z = Self::zeros(n);
        for p in 0..n {
            for q in 0..n {
                z.r[p][q] = if p == q { rs } else { rm };
                z.x[p][q] = if p == q { xs } else { xm };
            }
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn is_square(&self, n: usize) -> bool {
        self.r.len() == n && self.x.len() == n && self.r.iter().chain(&self.x).all(|row| row.len() == n)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.x).flatten().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let m = |a: &Vec<Vec<f64>>| a.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect();
        Self { r: m(&self.r), x: m(&self.x) }
    }

    pub fn add(&self, other: &Self) -> Self {
        let s = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u + v).collect()).collect()
        };
        Self { r: s(&self.r, &other.r), x: s(&self.x, &other.x) }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let d = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter().flatten().zip(b.iter().flatten()).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
        };
        d(&self.r, &other.r).max(d(&self.x, &other.x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Source,
    Junction,
    UserConnection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    pub kind: BusKind,
    /// Line-to-neutral nominal voltage.
    pub base_voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    pub phases: PhaseSet,
    #[serde(flatten)]
    pub impedance: ImpedanceMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linecode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub bus: String,
    pub phases: PhaseSet,
    #[serde(default = "default_true")]
    pub metered: bool,
}

fn default_true() -> bool {
    true
}

/// Per-unit-length series impedance (ohm/km).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linecode {
    pub r_ohm_per_km: Vec<Vec<f64>>,
    pub x_ohm_per_km: Vec<Vec<f64>>,
}

impl Linecode {
    pub fn impedance(&self, length_m: f64) -> ImpedanceMatrix {
        let k = length_m / 1000.0;
        ImpedanceMatrix { r: self.r_ohm_per_km.clone(), x: self.x_ohm_per_km.clone() }.map(|v| v * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Si,
    PerUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feeder {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub users: Vec<User>,
    pub base_power_va: f64,
    pub base_voltage_v: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub linecodes: BTreeMap<String, Linecode>,
    #[serde(default, skip_serializing_if = "is_si")]
    pub units: Units,
}

fn is_si(u: &Units) -> bool {
    *u == Units::Si
}

/// One broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

/// Adjacency and lookup tables derived from a feeder.
#[derive(Debug, Clone)]
pub struct Topology {
    pub bus_index: HashMap<String, usize>,
    /// per bus: (branch index, neighbour bus index)
    pub adjacency: Vec<Vec<(usize, usize)>>,
    pub source: Option<usize>,
    /// per bus: branch to the parent towards the source, in BFS order
    pub parent_branch: Vec<Option<usize>>,
    pub bfs_order: Vec<usize>,
    pub users_at: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(f: &Feeder) -> Self {
        let bus_index: HashMap<String, usize> = f.buses.iter().enumerate().map(|(i, b)| (b.id.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); f.buses.len()];
        for (k, br) in f.branches.iter().enumerate() {
            if let (Some(&a), Some(&b)) = (bus_index.get(&br.from), bus_index.get(&br.to)) {
                adjacency[a].push((k, b));
                adjacency[b].push((k, a));
            }
        }
        let mut users_at = vec![Vec::new(); f.buses.len()];
        for (u, user) in f.users.iter().enumerate() {
            if let Some(&b) = bus_index.get(&user.bus) {
                users_at[b].push(u);
            }
        }
        let source = f.buses.iter().position(|b| b.kind == BusKind::Source);
        let mut parent_branch = vec![None; f.buses.len()];
        let mut bfs_order = Vec::new();
        if let Some(s) = source {
            let mut seen = vec![false; f.buses.len()];
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                bfs_order.push(v);
                for &(k, w) in &adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        parent_branch[w] = Some(k);
                        queue.push_back(w);
                    }
                }
            }
        }
        Self { bus_index, adjacency, source, parent_branch, bfs_order, users_at }
    }

    pub fn is_connected(&self) -> bool {
        self.bfs_order.len() == self.adjacency.len()
    }

    pub fn is_radial(&self, f: &Feeder) -> bool {
        self.is_connected() && f.branches.len() + 1 == f.buses.len()
    }

    /// Branches on the path from `bus` up to the source.
    pub fn path_to_source(&self, f: &Feeder, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut v = bus;
        while let Some(k) = self.parent_branch[v] {
            path.push(k);
            let br = &f.branches[k];
            let a = self.bus_index[&br.from];
            v = if a == v { self.bus_index[&br.to] } else { a };
        }
        path
    }
}

impl Feeder {
    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self)
    }

    pub fn source_bus(&self) -> Option<&Bus> {
        self.buses.iter().find(|b| b.kind == BusKind::Source)
    }

    pub fn bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn branch(&self, id: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn user(&self, id: &str) -> Option<&User> {
        self.users.iter().find(|u| u.id == id)
    }

    /// Impedance base `V² / (S/3)` in ohm.
    pub fn z_base(&self) -> Result<f64, NetworkError> {
        z_base(self.base_voltage_v, self.base_power_va)
    }

    /// Current base per phase, `(S/3) / V`, in ampere.
    pub fn i_base(&self) -> f64 {
        self.base_power_va / 3.0 / self.base_voltage_v
    }

    /// Metered users' buses that are not leaves of the reduced graph.
    pub fn non_leaf_metered_users(&self) -> Vec<String> {
        let topo = self.topology();
        self.users
            .iter()
            .filter(|u| u.metered)
            .filter(|u| topo.bus_index.get(&u.bus).is_some_and(|&b| topo.adjacency[b].len() > 1))
            .map(|u| u.id.clone())
            .collect()
    }
}

pub fn z_base(base_voltage_v: f64, base_power_va: f64) -> Result<f64, NetworkError> {
    if !(base_voltage_v > 0.0) || !(base_power_va > 0.0) {
        return Err(NetworkError::InvalidBase);
    }
    Ok(base_voltage_v * base_voltage_v / (base_power_va / 3.0))
}

/// Checks all data-model invariants; an empty list means the feeder is
/// well formed.
pub fn validate(f: &Feeder) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: &str, message: String| out.push(Violation { entity: entity.to_string(), message });

    if !(f.base_power_va > 0.0) || !(f.base_voltage_v > 0.0) {
        push("feeder", "non-positive base power or voltage".into());
    }
    let mut seen = HashSet::new();
    for b in &f.buses {
        if !seen.insert(b.id.as_str()) {
            push(&b.id, "duplicate bus id".into());
        }
        if !(b.base_voltage_v > 0.0) {
            push(&b.id, "non-positive base voltage".into());
        }
    }
    let sources = f.buses.iter().filter(|b| b.kind == BusKind::Source).count();
    if sources == 0 {
        push("feeder", "no source bus".into());
    } else if sources > 1 {
        push("feeder", "multiple sources".into());
    }
    let buses: HashMap<&str, &Bus> = f.buses.iter().map(|b| (b.id.as_str(), b)).collect();
    let mut seen = HashSet::new();
    for br in &f.branches {
        if !seen.insert(br.id.as_str()) {
            push(&br.id, "duplicate branch id".into());
        }
        if br.from == br.to {
            push(&br.id, "branch connects a bus to itself".into());
        }
        for end in [&br.from, &br.to] {
            match buses.get(end.as_str()) {
                None => push(&br.id, format!("unknown bus {end}")),
                Some(b) if !br.phases.is_subset(&b.phases) => {
                    push(&br.id, format!("phase mismatch: branch {} on bus {} with {}", br.phases, b.id, b.phases))
                }
                _ => {}
            }
        }
        if !br.impedance.is_square(br.phases.len()) {
            push(&br.id, format!("impedance matrix is not {0}x{0}", br.phases.len()));
        } else if !br.impedance.is_finite() {
            push(&br.id, "non-finite impedance".into());
        }
        if let Some(l) = br.length_m {
            if !(l >= 0.0) {
                push(&br.id, "negative length".into());
            }
        }
        if let Some(code) = &br.linecode {
            match f.linecodes.get(code) {
                None => push(&br.id, format!("unknown linecode {code}")),
                Some(lc) => {
                    let lz = ImpedanceMatrix { r: lc.r_ohm_per_km.clone(), x: lc.x_ohm_per_km.clone() };
                    if !lz.is_square(br.phases.len()) {
                        push(&br.id, "linecode dimension mismatch".into());
                    } else if let (Some(l), true) = (br.length_m, f.units == Units::Si) {
                        let expect = lc.impedance(l);
                        let scale = expect.r.iter().chain(&expect.x).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                        if expect.max_abs_diff(&br.impedance) > 1e-9 * scale.max(1e-12) {
                            push(&br.id, "impedance differs from length times linecode".into());
                        }
                    }
                }
            }
        }
    }
    let mut seen = HashSet::new();
    for u in &f.users {
        if !seen.insert(u.id.as_str()) {
            push(&u.id, "duplicate user id".into());
        }
        match buses.get(u.bus.as_str()) {
            None => push(&u.id, format!("unknown bus {}", u.bus)),
            Some(b) if !u.phases.is_subset(&b.phases) => {
                push(&u.id, format!("phase mismatch: user {} on bus {} with {}", u.phases, b.id, b.phases))
            }
            _ => {}
        }
    }
    if !f.buses.is_empty() && sources == 1 {
        let topo = f.topology();
        if !topo.is_connected() {
            let reached: HashSet<usize> = topo.bfs_order.iter().copied().collect();
            for (i, b) in f.buses.iter().enumerate() {
                if !reached.contains(&i) {
                    push(&b.id, "not connected to the source".into());
                }
            }
        }
    }
    out
}

/// Eliminates degree-2 buses without users whose two branches carry the
/// same phases, merging the branches in series, until no such bus is left.
pub fn reduce(f: &Feeder) -> Result<Feeder, NetworkError> {
    let violations = validate(f);
    if !violations.is_empty() {
        return Err(NetworkError::Invalid(violations[0].to_string()));
    }
    let mut buses: Vec<Option<Bus>> = f.buses.iter().cloned().map(Some).collect();
    let mut branches: Vec<Option<Branch>> = f.branches.iter().cloned().map(Some).collect();
    let topo = f.topology();
    let mut adjacency: Vec<Vec<usize>> = topo.adjacency.iter().map(|a| a.iter().map(|&(k, _)| k).collect()).collect();
    let has_user: Vec<bool> = topo.users_at.iter().map(|u| !u.is_empty()).collect();
    let idx = &topo.bus_index;

    let mut changed = true;
    while changed {
        changed = false;
        for v in 0..buses.len() {
            let Some(bus) = &buses[v] else { continue };
            if bus.kind != BusKind::Junction || has_user[v] || adjacency[v].len() != 2 {
                continue;
            }
            let (ka, kb) = (adjacency[v][0], adjacency[v][1]);
            let (a, b) = (branches[ka].as_ref().unwrap(), branches[kb].as_ref().unwrap());
            if a.phases != b.phases || ka == kb {
                continue;
            }
            let far = |br: &Branch| if idx[&br.from] == v { br.to.clone() } else { br.from.clone() };
            let (x, y) = (far(a), far(b));
            if x == y {
                // parallel pair; merging would create a self loop
                continue;
            }
            let length_m = match (a.length_m, b.length_m) {
                (Some(la), Some(lb)) => Some(la + lb),
                _ => None,
            };
            let linecode = match (&a.linecode, &b.linecode) {
                (Some(ca), Some(cb)) if ca == cb && length_m.is_some() => Some(ca.clone()),
                _ => None,
            };
            let merged = Branch {
                id: a.id.clone(),
                from: x.clone(),
                to: y.clone(),
                phases: a.phases.clone(),
                impedance: a.impedance.add(&b.impedance),
                length_m,
                linecode,
            };
            // follow the orientation of the first branch
            let merged = if a.to == bus.id { merged } else { Branch { from: y.clone(), to: x.clone(), ..merged } };
            branches[ka] = Some(merged);
            branches[kb] = None;
            let yi = idx[&y];
            for slot in adjacency[yi].iter_mut() {
                if *slot == kb {
                    *slot = ka;
                }
            }
            adjacency[v].clear();
            buses[v] = None;
            changed = true;
        }
    }
    let mut out = f.clone();
    out.buses = buses.into_iter().flatten().collect();
    out.branches = branches.into_iter().flatten().collect();
    let used: HashSet<&String> = out.branches.iter().filter_map(|b| b.linecode.as_ref()).collect();
    out.linecodes.retain(|k, _| used.contains(k));
    Ok(out)
}

/// Sum of self impedances over the path from a user to the source, per
/// user phase: `(phase, R_cum, X_cum)`.
pub fn cumulative_impedance(f: &Feeder, user_id: &str) -> Result<Vec<(Phase, f64, f64)>, NetworkError> {
    let topo = f.topology();
    if !topo.is_radial(f) {
        return Err(NetworkError::Meshed(user_id.to_string()));
    }
    cumulative_impedance_with(f, &topo, user_id)
}

pub(crate) fn cumulative_impedance_with(
    f: &Feeder,
    topo: &Topology,
    user_id: &str,
) -> Result<Vec<(Phase, f64, f64)>, NetworkError> {
    let user = f.user(user_id).ok_or_else(|| NetworkError::UnknownUser(user_id.to_string()))?;
    let bus = *topo.bus_index.get(&user.bus).ok_or_else(|| NetworkError::Unreachable(user.bus.clone()))?;
    if Some(bus) != topo.source && topo.parent_branch[bus].is_none() {
        return Err(NetworkError::Unreachable(user.bus.clone()));
    }
    let path = topo.path_to_source(f, bus);
    let mut out = Vec::new();
    for p in user.phases.iter() {
        let (mut r, mut x) = (0.0, 0.0);
        for &k in &path {
            let br = &f.branches[k];
            let pos = br.phases.position(p).ok_or_else(|| NetworkError::PhaseNotOnPath {
                user: user.id.clone(),
                phase: p,
                branch: br.id.clone(),
            })?;
            r += br.impedance.r[pos][pos];
            x += br.impedance.x[pos][pos];
        }
        out.push((p, r, x));
    }
    Ok(out)
}

/// Divides all impedances by the feeder's impedance base.
pub fn to_per_unit(f: &Feeder) -> Result<Feeder, NetworkError> {
    if f.units == Units::PerUnit {
        return Err(NetworkError::Units(Units::PerUnit));
    }
    let zb = f.z_base()?;
    Ok(rescale(f, 1.0 / zb, Units::PerUnit))
}

pub fn from_per_unit(f: &Feeder) -> Result<Feeder, NetworkError> {
    if f.units == Units::Si {
        return Err(NetworkError::Units(Units::Si));
    }
    let zb = f.z_base()?;
    Ok(rescale(f, zb, Units::Si))
}

fn rescale(f: &Feeder, k: f64, units: Units) -> Feeder {
    let mut out = f.clone();
    for br in &mut out.branches {
        br.impedance = br.impedance.map(|v| v * k);
    }
    for lc in out.linecodes.values_mut() {
        for row in lc.r_ohm_per_km.iter_mut().chain(lc.x_ohm_per_km.iter_mut()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    out.units = units;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_bus(r: f64) -> Feeder {
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
    fn phase_set_is_canonical() {
        let p = PhaseSet::new(vec![Phase::C, Phase::A]).unwrap();
        assert_eq!(p.as_slice(), &[Phase::A, Phase::C]);
        assert!(PhaseSet::new(vec![]).is_err());
        assert!(PhaseSet::new(vec![Phase::B, Phase::B]).is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"["a","c"]"#);
        assert!(serde_json::from_str::<PhaseSet>(r#"["a","a"]"#).is_err());
    }

    #[test]
    fn well_formed_two_bus_has_no_violations() {
        assert!(validate(&two_bus(0.5)).is_empty());
    }

    #[test]
    fn two_sources_flagged() {
        let mut f = two_bus(0.5);
        f.buses[1].kind = BusKind::Source;
        let v = validate(&f);
        assert!(v.iter().any(|v| v.message == "multiple sources"), "{v:?}");
    }

    #[test]
    fn phase_mismatch_flagged() {
        let mut f = two_bus(0.5);
        f.buses[1].phases = PhaseSet::new(vec![Phase::B, Phase::C]).unwrap();
        let v = validate(&f);
        assert!(v.iter().any(|v| v.entity == "l" && v.message.starts_with("phase mismatch")), "{v:?}");
    }

    #[test]
    fn z_base_formula() {
        let zb = z_base(230.0, 3000.0).unwrap();
        assert!((zb - 52.9).abs() < 1e-12);
        assert!(z_base(0.0, 1.0).is_err());
        let mut f = two_bus(52.9);
        f.base_power_va = 3000.0;
        let pu = to_per_unit(&f).unwrap();
        assert!((pu.branches[0].impedance.r[0][0] - 1.0).abs() < 1e-14);
        let back = from_per_unit(&pu).unwrap();
        assert!((back.branches[0].impedance.r[0][0] - 52.9).abs() < 1e-12);
        assert!(to_per_unit(&pu).is_err());
    }

    #[test]
    fn one_hop_cumulative() {
        let f = two_bus(0.5);
        let c = cumulative_impedance(&f, "u1").unwrap();
        assert_eq!(c, vec![(Phase::A, 0.5, 0.0)]);
    }

    #[test]
    fn series_chain_merges() {
        let mut f = two_bus(0.5);
        f.buses[1].kind = BusKind::Junction;
        f.buses.push(Bus { id: "e".into(), phases: PhaseSet::single(Phase::A), kind: BusKind::UserConnection, base_voltage_v: 230.0 });
        f.branches.push(Branch {
            id: "m".into(),
            from: "u".into(),
            to: "e".into(),
            phases: PhaseSet::single(Phase::A),
            impedance: ImpedanceMatrix::scalar(0.25, 0.1),
            length_m: None,
            linecode: None,
        });
        f.users[0].bus = "e".into();
        let r = reduce(&f).unwrap();
        assert_eq!(r.buses.len(), 2);
        assert_eq!(r.branches.len(), 1);
        let br = &r.branches[0];
        assert_eq!((br.from.as_str(), br.to.as_str()), ("s", "e"));
        assert_eq!(br.impedance.r[0][0], 0.75);
        assert_eq!(br.impedance.x[0][0], 0.1);
        assert_eq!(reduce(&r).unwrap(), r);
    }
}
