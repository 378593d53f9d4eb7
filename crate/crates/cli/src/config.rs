//! JSON run configurations, one per subcommand. Unknown fields are rejected.

use std::path::{Path as FsPath, PathBuf};

use jdlan::density::DiagnosticPlan;
use jdlan::inference::{BayesGrid, FitOptions, Prior};
use jdlan::lan::LanConfig;
use jdlan::model::ModelSpec;
use jdlan::quad::QuadSpec;
use jdlan::quasi_lik::ThresholdRule;
use jdlan::sim::SimConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelSpec,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesConfig {
    #[serde(default = "flat")]
    pub prior: Prior,
    #[serde(default)]
    pub grid: BayesGrid,
}

fn flat() -> Prior {
    Prior::Flat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelSpec,
    /// Observed path, `.csv` or `.bin`, relative to the config file.
    pub path: PathBuf,
    /// Starting `α`; the model's parameters if absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub rule: ThresholdRule,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub bayes: Option<BayesConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    LanExpansion,
    EstimatorAsymptotics,
    TestPower,
    JumpDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanVerifyConfig {
    pub lan: LanConfig,
    #[serde(default = "default_experiments")]
    pub experiments: Vec<Experiment>,
}

fn default_experiments() -> Vec<Experiment> {
    vec![Experiment::LanExpansion, Experiment::EstimatorAsymptotics]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDirection {
    pub label: String,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityDiagConfig {
    pub model: ModelSpec,
    pub plan: DiagnosticPlan,
    #[serde(default)]
    pub rule: ThresholdRule,
    #[serde(default)]
    pub quad: QuadSpec,
    /// Run the L¹ series (needs an exact transition density).
    #[serde(default = "yes")]
    pub l1: bool,
    /// Directions for the normalizer-derivative series; σ and θ unit
    /// directions if absent.
    #[serde(default)]
    pub directions: Option<Vec<NamedDirection>>,
}

fn yes() -> bool {
    true
}

pub fn load<T: DeserializeOwned>(path: &FsPath) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
