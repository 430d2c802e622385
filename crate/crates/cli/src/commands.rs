use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use impest_core::estimation::{build, estimate as solve, EstimationError, Mode};
use impest_core::measurements::{load_csv, save_csv, select_steps, MeasurementSet};
use impest_core::network::{self, Feeder};
use impest_core::powerflow::PfOptions;
use impest_core::synth::{experiment, ExperimentOptions, ScenarioOptions, SynthError};
use impest_core::validation::{
    candidate_ladder, cumulative_error, pf_validate, se_objective_validate, select_training_set, CumulativeError,
    PfValidation, Quantiles,
};
use impest_nlp::{write_iteration_log, SolveStatus};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{svg, Common, Failure};

fn load(c: &Common) -> Result<RunConfig, Failure> {
    RunConfig::load(c.config.as_deref(), &c.overrides)
}

/// Explicit path, else `default` in the output directory.
fn path_or(explicit: &Option<PathBuf>, out: &Path, default: &str) -> Result<PathBuf, Failure> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => {
            let p = out.join(default);
            if p.exists() {
                Ok(p)
            } else {
                Err(Failure::usage(format!("{} not found and no path configured", p.display())))
            }
        }
    }
}

fn load_feeder(path: &Path) -> Result<Feeder, Failure> {
    let f = Feeder::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let bad = network::validate(&f);
    if !bad.is_empty() {
        let list: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
        return Err(Failure::data(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(f)
}

fn load_measurements(path: &Path) -> Result<MeasurementSet, Failure> {
    load_csv(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn save_feeder(f: &Feeder, path: &Path) -> Result<(), Failure> {
    f.save(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn save_measurements(ms: &MeasurementSet, path: &Path) -> Result<(), Failure> {
    save_csv(ms, path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn reduce(input: Option<PathBuf>, c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let path = input.or(cfg.feeder).ok_or_else(|| Failure::usage("no feeder given (--in or config feeder)"))?;
    if !path.exists() {
        return Err(Failure::usage(format!("{} does not exist", path.display())));
    }
    let f = load_feeder(&path)?;
    let r = network::reduce(&f).map_err(Failure::data)?;
    fs::create_dir_all(&c.out)?;
    save_feeder(&r, &c.out.join("feeder_reduced.json"))?;
    println!("buses {} -> {}", f.buses.len(), r.buses.len());
    println!("branches {} -> {}", f.branches.len(), r.branches.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulationSummary {
    seed: u64,
    steps: usize,
    excluded: Vec<usize>,
    train_steps: Vec<usize>,
    validation_steps: Vec<usize>,
}

pub fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let seed = cfg.seed()?;
    let mut truth = cfg.truth_feeder()?;
    if cfg.simulate.reduce {
        truth = network::reduce(&truth).map_err(Failure::data)?;
    }
    let bad = network::validate(&truth);
    if let Some(v) = bad.first() {
        return Err(Failure::data(format!("truth feeder: {v}")));
    }
    let s = &cfg.simulate;
    let opts = ExperimentOptions {
        scenario: ScenarioOptions {
            steps: s.steps,
            aggregate: s.aggregate,
            mean_kw: s.mean_kw,
            spread: s.spread,
            noisy: s.noisy,
            noise: cfg.noise.clone(),
        },
        train_steps: s.train_steps,
        validation_steps: s.validation_steps,
        length_perturbation: s.length_perturbation,
        exact: cfg.build.pinned.iter().cloned().collect(),
    };
    let exp = experiment(&truth, &opts, seed).map_err(|e| match e {
        SynthError::UnknownBranch(_) => Failure::usage(e),
        _ => Failure::data(e),
    })?;
    fs::create_dir_all(&c.out)?;
    save_feeder(&exp.truth, &c.out.join("feeder_true.json"))?;
    save_feeder(&exp.input, &c.out.join("feeder_input.json"))?;
    save_measurements(&exp.train, &c.out.join("train.csv"))?;
    save_measurements(&exp.validation, &c.out.join("validation.csv"))?;
    save_measurements(&exp.validation_clean, &c.out.join("validation_clean.csv"))?;
    let summary = SimulationSummary {
        seed,
        steps: s.steps,
        excluded: exp.selection.excluded.clone(),
        train_steps: exp.train_steps.clone(),
        validation_steps: exp.validation_steps.clone(),
    };
    write_json(&summary, &c.out.join("simulation.json"))?;
    println!(
        "{} steps -> {} train + {} validation",
        exp.train_steps.len() + exp.validation_steps.len(),
        exp.train_steps.len(),
        exp.validation_steps.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateSummary {
    mode: Mode,
    status: SolveStatus,
    iterations: usize,
    objective: f64,
    max_violation: f64,
    flagged: bool,
    timesteps: Vec<usize>,
    lengths_m: BTreeMap<String, f64>,
    normalized_residuals: Option<Quantiles>,
}

fn estimation_failure(e: EstimationError) -> Failure {
    match e {
        EstimationError::Solver(_) => Failure::solver(e),
        _ => Failure::data(e),
    }
}

pub fn estimate(c: &Common) -> Result<(), Failure> {
    let mut cfg = load(c)?;
    cfg.solver.verbosity = cfg.solver.verbosity.max(c.verbose);
    let feeder = load_feeder(&path_or(&cfg.feeder, &c.out, "feeder_input.json")?)?;
    let mut train = load_measurements(&path_or(&cfg.measurements, &c.out, "train.csv")?)?;
    if let Some(n) = cfg.selection {
        train = select_steps(&train, &feeder, n).map_err(Failure::data)?.set;
    }
    fs::create_dir_all(&c.out)?;
    if let Some(ladder) = &cfg.training_ladder {
        let validation = load_measurements(&path_or(&cfg.validation, &c.out, "validation.csv")?)?;
        let candidates = candidate_ladder(&train, &feeder, ladder.step, ladder.count);
        let sel = select_training_set(&candidates, &feeder, &train, &validation, cfg.mode, &cfg.build, &cfg.solver)
            .map_err(Failure::solver)?;
        write_json(&sel.trace, &c.out.join("ladder.json"))?;
        let keep: BTreeSet<usize> = candidates[sel.best].iter().copied().collect();
        train = train.filter_steps(&keep);
        log::info!("training ladder picked {} steps", keep.len());
    }
    let problem = build(&feeder, &train, cfg.mode, &cfg.build).map_err(estimation_failure)?;
    log::info!("{} variables, {} constraints", problem.num_variables(), problem.num_constraints());
    let (result, outcome) = solve(&problem, &cfg.solver).map_err(estimation_failure)?;
    if c.verbose > 0 {
        let file = fs::File::create(c.out.join("iterations.csv"))?;
        write_iteration_log(&outcome.log, std::io::BufWriter::new(file))?;
    }
    save_feeder(&result.feeder, &c.out.join("feeder_est.json"))?;
    let normalized: Vec<f64> = result.residuals.iter().map(|r| r.normalized).collect();
    let summary = EstimateSummary {
        mode: cfg.mode,
        status: outcome.status,
        iterations: outcome.iterations,
        objective: result.objective,
        max_violation: result.max_violation,
        flagged: result.flagged,
        timesteps: result.timesteps.clone(),
        lengths_m: result.lengths_m.clone(),
        normalized_residuals: Quantiles::of(&normalized),
    };
    write_json(&summary, &c.out.join("estimate.json"))?;
    println!(
        "{}: {:?} after {} iterations, objective {:.6e}",
        cfg.mode.name(),
        outcome.status,
        outcome.iterations,
        result.objective
    );
    if outcome.status != SolveStatus::OptimalLocal {
        return Err(Failure::solver(format!("solver stopped with {:?}", outcome.status)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfSource {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeObjective {
    pub timestep: usize,
    pub objective: Option<f64>,
    pub measurements: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summaries {
    pub pf_abs_diff_pu: Option<Quantiles>,
    pub cumulative_r_pct: Option<Quantiles>,
    pub cumulative_x_pct: Option<Quantiles>,
    pub se_objective: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Which validation P/Q fed the power flows.
    pub pf_source: PfSource,
    pub pf: PfValidation,
    pub cumulative: Vec<CumulativeError>,
    pub se_objectives: Vec<SeObjective>,
    pub summaries: Summaries,
}

pub fn build_report(
    est: &Feeder,
    reference: &Feeder,
    pf_data: &MeasurementSet,
    pf_source: PfSource,
    se_data: Option<&MeasurementSet>,
    solver: &impest_nlp::SolverOptions,
) -> Result<Report, Failure> {
    let injections = pf_data.injections(reference);
    let pf = pf_validate(est, reference, &injections, &pf_data.timesteps(), &PfOptions::default()).map_err(Failure::data)?;
    let cumulative = cumulative_error(reference, est).map_err(Failure::data)?;
    let se_objectives: Vec<SeObjective> = se_data
        .map(|v| se_objective_validate(est, v, solver))
        .unwrap_or_default()
        .into_iter()
        .map(|o| SeObjective {
            timestep: o.timestep,
            objective: o.objective.is_finite().then_some(o.objective),
            measurements: o.measurements,
            flagged: o.flagged,
        })
        .collect();
    let r: Vec<f64> = cumulative.iter().filter(|e| !e.r_absolute).map(|e| e.r).collect();
    let x: Vec<f64> = cumulative.iter().filter(|e| !e.x_absolute).map(|e| e.x).collect();
    let se: Vec<f64> = se_objectives.iter().filter(|o| !o.flagged).filter_map(|o| o.objective).collect();
    let summaries = Summaries {
        pf_abs_diff_pu: pf.summary,
        cumulative_r_pct: Quantiles::of(&r),
        cumulative_x_pct: Quantiles::of(&x),
        se_objective: Quantiles::of(&se),
    };
    Ok(Report { pf_source, pf, cumulative, se_objectives, summaries })
}

pub fn validate(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let est = load_feeder(&path_or(&cfg.estimated, &c.out, "feeder_est.json")?)?;
    let reference = load_feeder(&path_or(&cfg.truth, &c.out, "feeder_true.json")?)?;
    let noisy = match path_or(&cfg.validation, &c.out, "validation.csv") {
        Ok(p) => Some(load_measurements(&p)?),
        Err(_) => None,
    };
    let clean = match path_or(&cfg.validation_clean, &c.out, "validation_clean.csv") {
        Ok(p) => Some(load_measurements(&p)?),
        Err(_) => None,
    };
    let (pf_data, source) = match (&clean, &noisy) {
        (Some(m), _) => (m, PfSource::Clean),
        (None, Some(m)) => (m, PfSource::Noisy),
        (None, None) => return Err(Failure::usage("no validation measurements found")),
    };
    let report = build_report(&est, &reference, pf_data, source, noisy.as_ref(), &cfg.solver)?;
    fs::create_dir_all(&c.out)?;
    write_json(&report, &c.out.join("report.json"))?;
    if let Some(q) = &report.summaries.pf_abs_diff_pu {
        let name = if source == PfSource::Clean { "clean" } else { "noisy" };
        println!("pf |dV| ({name}): median {:.3e} p95 {:.3e} max {:.3e}", q.median, q.p95, q.max);
    }
    if !report.pf.flagged.is_empty() {
        println!("pf failed at steps {:?}", report.pf.flagged);
    }
    report_from(&report, &c.out)
}

/// Column order of the quantile tables, equal to the `Quantiles` fields.
pub const TABLE_COLUMNS: [&str; 8] = ["series", "count", "min", "p25", "median", "p75", "p95", "max"];

fn table(rows: &[(&str, Option<Quantiles>)]) -> String {
    let mut s = TABLE_COLUMNS.join(",");
    s.push('\n');
    for (name, q) in rows {
        let Some(q) = q else { continue };
        s.push_str(&format!("{name},{},{},{},{},{},{},{}\n", q.count, q.min, q.p25, q.median, q.p75, q.p95, q.max));
    }
    s
}

fn report_from(report: &Report, dir: &Path) -> Result<(), Failure> {
    let tables = dir.join("tables");
    let figures = dir.join("figures");
    fs::create_dir_all(&tables)?;
    fs::create_dir_all(&figures)?;
    let s = &report.summaries;

    let mut by_phase: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for d in &report.pf.diffs {
        by_phase.entry(format!("phase_{}", d.phase)).or_default().push(d.abs_pu);
    }
    let mut pf_rows: Vec<(String, Option<Quantiles>)> = vec![("all".into(), s.pf_abs_diff_pu)];
    pf_rows.extend(by_phase.iter().map(|(k, v)| (k.clone(), Quantiles::of(v))));
    let pf_rows: Vec<(&str, Option<Quantiles>)> = pf_rows.iter().map(|(k, q)| (k.as_str(), *q)).collect();
    let cum_rows = [("r_pct", s.cumulative_r_pct), ("x_pct", s.cumulative_x_pct)];
    let se_rows = [("objective", s.se_objective)];

    fs::write(tables.join("pf_validation.csv"), table(&pf_rows))?;
    fs::write(tables.join("cumulative_impedance.csv"), table(&cum_rows))?;
    fs::write(tables.join("se_objective.csv"), table(&se_rows))?;

    fs::write(figures.join("pf_validation.svg"), svg::boxplot("PF validation |dV| (p.u.)", &pf_rows))?;
    fs::write(figures.join("cumulative_impedance.svg"), svg::boxplot("Cumulative impedance error (%)", &cum_rows))?;
    fs::write(figures.join("se_objective.svg"), svg::boxplot("SE objective per validation step", &se_rows))?;
    Ok(())
}

pub fn report(dir: &Path) -> Result<(), Failure> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    report_from(&report, dir)
}
