use std::path::{Path, PathBuf};

use impest_core::estimation::{BuildOptions, Mode};
use impest_core::measurements::NoiseModel;
use impest_core::network::Feeder;
use impest_core::synth;
use impest_nlp::SolverOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    TwentyBus,
    TwentyFiveBus,
    EltfLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Output timesteps before selection.
    pub steps: usize,
    pub aggregate: bool,
    pub noisy: bool,
    pub mean_kw: f64,
    pub spread: f64,
    pub train_steps: usize,
    pub validation_steps: usize,
    pub length_perturbation: f64,
    /// Reduce the truth feeder before simulating.
    pub reduce: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            steps: 288,
            aggregate: true,
            noisy: true,
            mean_kw: 2.0,
            spread: 0.6,
            train_steps: 50,
            validation_steps: 10,
            length_perturbation: 0.3,
            reduce: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub step: usize,
    pub count: usize,
}

/// Everything a run depends on. Paths left empty default to files in the
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Input feeder for `reduce` and `estimate`, truth for `simulate`.
    pub feeder: Option<PathBuf>,
    /// Synthetic truth used by `simulate` when `feeder` is empty.
    pub fixture: Option<Fixture>,
    /// Reference feeder for `validate`.
    pub truth: Option<PathBuf>,
    /// Estimated feeder for `validate`.
    pub estimated: Option<PathBuf>,
    /// Training measurements for `estimate`.
    pub measurements: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Noise-free validation measurements, preferred for PF validation.
    pub validation_clean: Option<PathBuf>,
    /// Keep only the N most loaded timesteps of `measurements`.
    pub selection: Option<usize>,
    pub mode: Mode,
    pub solver: SolverOptions,
    pub noise: NoiseModel,
    pub simulate: SimulateConfig,
    pub build: BuildOptions,
    /// Candidate training sets of `step`, `2 step`, ... most loaded steps.
    pub training_ladder: Option<LadderConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            feeder: None,
            fixture: None,
            truth: None,
            estimated: None,
            measurements: None,
            validation: None,
            validation_clean: None,
            selection: None,
            mode: Mode::Lle,
            solver: SolverOptions::default(),
            noise: NoiseModel::default(),
            simulate: SimulateConfig::default(),
            build: BuildOptions::default(),
            training_ladder: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Failure::usage(format!("config: {e}")))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<(), Failure> {
        let paths = [
            &self.feeder,
            &self.truth,
            &self.estimated,
            &self.measurements,
            &self.validation,
            &self.validation_clean,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(Failure::usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| Failure::usage("synthetic runs need a seed"))
    }

    pub fn truth_feeder(&self) -> Result<Feeder, Failure> {
        match (&self.feeder, self.fixture) {
            (Some(p), _) => Feeder::load(p).map_err(Failure::data),
            (None, Some(Fixture::TwentyBus)) => Ok(synth::twenty_bus()),
            (None, Some(Fixture::TwentyFiveBus)) => Ok(synth::twenty_five_bus()),
            (None, Some(Fixture::EltfLike)) => Ok(synth::eltf_like(self.seed()?)),
            (None, None) => Err(Failure::usage("set either feeder or fixture")),
        }
    }
}

/// `a.b.c=value`; the value is read as JSON and falls back to a string.
fn apply_override(root: &mut Value, item: &str) -> Result<(), Failure> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Failure::usage(format!("--set {item}: expected key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::usage(format!("--set {item}: empty key")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
