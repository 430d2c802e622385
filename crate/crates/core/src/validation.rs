//! Estimation quality: power-flow validation, cumulative impedance errors,
//! state-estimation residuals and training-set selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::estimation::{build, estimate, BuildOptions, EstimationError, Mode};
use crate::measurements::{voltage_drops, MeasurementSet};
use crate::network::{cumulative_impedance, Feeder, NetworkError, Phase};
use crate::powerflow::{self, InjectionSpec, PfOptions};
use impest_nlp::SolverOptions;

#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("feeders differ: {0}")]
    Mismatch(String),
    #[error("no candidate training set")]
    NoCandidates,
    #[error("every candidate failed")]
    AllCandidatesFailed,
}

/// Five-number summary plus the 95th percentile, by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub count: usize,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self { count: v.len(), min: v[0], p25: q(0.25), median: q(0.5), p75: q(0.75), p95: q(0.95), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageDiff {
    pub bus: String,
    pub phase: Phase,
    pub timestep: usize,
    /// `|Vmag_est - Vmag_ref|` in p.u.
    pub abs_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfValidation {
    pub diffs: Vec<VoltageDiff>,
    /// Steps where either power flow failed; excluded from the summary.
    pub flagged: Vec<usize>,
    pub summary: Option<Quantiles>,
}

fn same_topology(a: &Feeder, b: &Feeder) -> Result<(), ValidationError> {
    if a.buses.len() != b.buses.len() || a.branches.len() != b.branches.len() || a.users.len() != b.users.len() {
        return Err(ValidationError::Mismatch("component counts".into()));
    }
    for (x, y) in a.buses.iter().zip(&b.buses) {
        if x.id != y.id || x.phases != y.phases {
            return Err(ValidationError::Mismatch(format!("bus {}", x.id)));
        }
    }
    for (x, y) in a.branches.iter().zip(&b.branches) {
        if x.id != y.id || x.from != y.from || x.to != y.to || x.phases != y.phases {
            return Err(ValidationError::Mismatch(format!("branch {}", x.id)));
        }
    }
    Ok(())
}

/// Runs the power flow on both feeders for every validation step and
/// compares voltage magnitudes bus by bus. `steps[i]` labels injection
/// step `i`.
pub fn pf_validate(
    est: &Feeder,
    reference: &Feeder,
    injections: &InjectionSpec,
    steps: &[usize],
    opts: &PfOptions,
) -> Result<PfValidation, ValidationError> {
    same_topology(est, reference)?;
    let base = reference.base_voltage_v;
    let mut diffs = Vec::new();
    let mut flagged = Vec::new();
    for (i, step) in injections.steps.iter().enumerate() {
        let t = steps.get(i).copied().unwrap_or(i);
        let one = InjectionSpec { model: injections.model, steps: vec![step.clone()] };
        let (Ok(a), Ok(b)) = (powerflow::solve(est, &one, opts), powerflow::solve(reference, &one, opts)) else {
            flagged.push(t);
            continue;
        };
        for (bi, bus) in reference.buses.iter().enumerate() {
            for (k, phase) in bus.phases.iter().enumerate() {
                let d = (a.steps[0].bus_voltage[bi][k].norm() - b.steps[0].bus_voltage[bi][k].norm()).abs() / base;
                diffs.push(VoltageDiff { bus: bus.id.clone(), phase, timestep: t, abs_pu: d });
            }
        }
    }
    let summary = Quantiles::of(&diffs.iter().map(|d| d.abs_pu).collect::<Vec<_>>());
    Ok(PfValidation { diffs, flagged, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeError {
    pub user: String,
    pub phase: Phase,
    /// `100 (est - true) / true`, or the plain difference in ohm when the
    /// true value is zero
    pub r: f64,
    pub x: f64,
    pub r_absolute: bool,
    pub x_absolute: bool,
}

pub fn cumulative_error(truth: &Feeder, est: &Feeder) -> Result<Vec<CumulativeError>, ValidationError> {
    let mut out = Vec::new();
    for user in &truth.users {
        if est.user(&user.id).is_none() {
            return Err(ValidationError::Mismatch(format!("user {}", user.id)));
        }
        let t = cumulative_impedance(truth, &user.id)?;
        let e = cumulative_impedance(est, &user.id)?;
        for ((phase, rt, xt), (_, re, xe)) in t.into_iter().zip(e) {
            let pct = |est: f64, truth: f64| if truth == 0.0 { (est - truth, true) } else { (100.0 * (est - truth) / truth, false) };
            let (r, r_absolute) = pct(re, rt);
            let (x, x_absolute) = pct(xe, xt);
            out.push(CumulativeError { user: user.id.clone(), phase, r, x, r_absolute, x_absolute });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObjective {
    pub timestep: usize,
    pub objective: f64,
    pub measurements: usize,
    pub flagged: bool,
}

/// Solves fixed-impedance state estimation separately for each
/// validation step and reports the objectives.
pub fn se_objective_validate(feeder: &Feeder, validation: &MeasurementSet, solver: &SolverOptions) -> Vec<StepObjective> {
    validation
        .timesteps()
        .into_iter()
        .map(|t| {
            let one = validation.filter_steps(&BTreeSet::from([t]));
            let n = one.len();
            match build(feeder, &one, Mode::SeFixedZ, &BuildOptions::default()).and_then(|p| estimate(&p, solver)) {
                Ok((r, _)) => StepObjective { timestep: t, objective: r.objective, measurements: n, flagged: r.flagged },
                Err(_) => StepObjective { timestep: t, objective: f64::NAN, measurements: n, flagged: true },
            }
        })
        .collect()
}

/// Nested candidate training sets: the `step`, `2 step`, … most loaded
/// timesteps (largest measured voltage drop), up to `count` candidates.
pub fn candidate_ladder(ms: &MeasurementSet, feeder: &Feeder, step: usize, count: usize) -> Vec<Vec<usize>> {
    let mut ranked: Vec<(usize, f64)> = voltage_drops(ms, feeder).into_iter().filter_map(|(t, d)| d.map(|d| (t, d))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    (1..=count)
        .map(|k| k * step)
        .take_while(|&n| n <= ranked.len())
        .map(|n| {
            let mut v: Vec<usize> = ranked[..n].iter().map(|r| r.0).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub steps: Vec<usize>,
    pub mean_objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSelection {
    pub best: usize,
    pub best_feeder: Feeder,
    pub trace: Vec<CandidateTrace>,
}

/// Estimates on each candidate, validates the rebuilt feeder with
/// fixed-impedance state estimation and keeps the candidate with the
/// lowest mean validation objective.
pub fn select_training_set(
    candidates: &[Vec<usize>],
    feeder: &Feeder,
    measurements: &MeasurementSet,
    validation: &MeasurementSet,
    mode: Mode,
    build_opts: &BuildOptions,
    solver: &SolverOptions,
) -> Result<TrainingSelection, ValidationError> {
    if candidates.is_empty() {
        return Err(ValidationError::NoCandidates);
    }
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, Feeder)> = None;
    for (i, steps) in candidates.iter().enumerate() {
        let keep: BTreeSet<usize> = steps.iter().copied().collect();
        let train = measurements.filter_steps(&keep);
        let run = || -> Result<Feeder, EstimationError> {
            let p = build(feeder, &train, mode, build_opts)?;
            let (r, _) = estimate(&p, solver)?;
            Ok(r.feeder)
        };
        match run() {
            Ok(est) => {
                let objs = se_objective_validate(&est, validation, solver);
                let ok: Vec<f64> = objs.iter().filter(|o| !o.flagged).map(|o| o.objective).collect();
                let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
                if let Some(m) = mean {
                    if best.as_ref().is_none_or(|b| m < b.1) {
                        best = Some((i, m, est));
                    }
                }
                trace.push(CandidateTrace { steps: steps.clone(), mean_objective: mean, error: None });
            }
            Err(e) => trace.push(CandidateTrace { steps: steps.clone(), mean_objective: None, error: Some(e.to_string()) }),
        }
    }
    let (best, _, best_feeder) = best.ok_or(ValidationError::AllCandidatesFailed)?;
    Ok(TrainingSelection { best, best_feeder, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{twenty_bus, load_profiles, ProfileOptions};

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q.min, q.p25, q.median, q.p75, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!((q.p95 - 4.8).abs() < 1e-12);
        assert!(Quantiles::of(&[]).is_none());
    }

    #[test]
    fn identical_feeders_validate_to_zero() {
        let f = twenty_bus();
        let inj = load_profiles(&f, 3, &ProfileOptions::default(), 1);
        let v = pf_validate(&f, &f, &inj, &[0, 1, 2], &PfOptions::default()).unwrap();
        assert_eq!(v.summary.unwrap().max, 0.0);
        assert_eq!(v.diffs.len(), 3 * f.buses.iter().map(|b| b.phases.len()).sum::<usize>());
        assert!(cumulative_error(&f, &f).unwrap().iter().all(|e| e.r == 0.0 && e.x == 0.0));
    }

    #[test]
    fn uniform_scaling_gives_uniform_percent() {
        let f = twenty_bus();
        let mut g = f.clone();
        for br in &mut g.branches {
            br.impedance = br.impedance.map(|z| 1.1 * z);
        }
        for e in cumulative_error(&f, &g).unwrap() {
            assert!((e.r - 10.0).abs() < 1e-9 && (e.x - 10.0).abs() < 1e-9);
        }
    }
}
