//! Scenario files: flat TOML keys for the trial, the simulation and any
//! policy field. Keys that are not scenario keys are applied to every policy
//! named on the command line.

use std::path::Path;

use dosefind::hybrid::EpsilonMode;
use dosefind::simulate::Estimator;
use dosefind::{Myopic, Policy, PolicySpec, PriorSpec, Resolution, Scenario, TrialConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioKeys {
    pub x_min: f64,
    pub x_max: f64,
    pub q: f64,
    pub p: f64,
    pub omega: f64,
    pub n: usize,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub policies: Option<Vec<String>>,
    /// uniform | fixed | fixed-eta
    pub truth: String,
    pub truth_rho: Option<f64>,
    /// On the scenario's own dose axis.
    pub truth_eta: Option<f64>,
    pub m_rho: usize,
    pub m_eta: usize,
    pub dose_points: usize,
    pub design_stride: usize,
    pub start_at_x_min: bool,
    pub estimator: Estimator,
    pub risk_loss: Myopic,
    pub iterations: Option<usize>,
    pub sample_trials: Option<usize>,
    pub blocks: usize,
    pub epsilon_mode: EpsilonMode,
}

impl Default for ScenarioKeys {
    fn default() -> Self {
        let cfg = TrialConfig::unit_example();
        let res = Resolution::default();
        ScenarioKeys {
            x_min: cfg.x_min,
            x_max: cfg.x_max,
            q: cfg.q,
            p: cfg.p,
            omega: cfg.omega,
            n: cfg.n,
            reps: None,
            seed: None,
            policies: None,
            truth: "uniform".into(),
            truth_rho: None,
            truth_eta: None,
            m_rho: res.m_rho,
            m_eta: res.m_eta,
            dose_points: dosefind::policies::DEFAULT_DOSE_POINTS,
            design_stride: 4,
            start_at_x_min: false,
            estimator: Estimator::Design,
            risk_loss: Myopic::Ewoc,
            iterations: None,
            sample_trials: None,
            blocks: 1,
            epsilon_mode: EpsilonMode::Clamped,
        }
    }
}

/// Parsed scenario file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioFile {
    pub keys: ScenarioKeys,
    /// Policy fields shared by every policy.
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

const SCENARIO_KEYS: &[&str] = &[
    "x_min", "x_max", "q", "p", "omega", "n", "reps", "seed", "policies", "truth", "truth_rho", "truth_eta", "m_rho",
    "m_eta", "dose_points", "design_stride", "start_at_x_min", "estimator", "risk_loss", "iterations",
    "sample_trials", "blocks", "epsilon_mode",
];

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Validation(format!("scenario: {e}")))?;
        let mut keys = toml::Table::new();
        let mut overrides = serde_json::Map::new();
        for (k, v) in table {
            if SCENARIO_KEYS.contains(&k.as_str()) {
                let v = match (k.as_str(), v) {
                    ("policies", toml::Value::String(s)) => toml::Value::Array(split_list(&s).into_iter().map(toml::Value::String).collect()),
                    (_, v) => v,
                };
                keys.insert(k, v);
            } else {
                let json = serde_json::to_value(v).map_err(|e| CliError::Validation(format!("scenario key {k}: {e}")))?;
                overrides.insert(k, json);
            }
        }
        let keys = ScenarioKeys::deserialize(keys).map_err(|e| CliError::Validation(format!("scenario: {e}")))?;
        Ok(ScenarioFile { keys, overrides })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ScenarioFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read scenario {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn cfg(&self) -> TrialConfig {
        let k = &self.keys;
        TrialConfig { x_min: k.x_min, x_max: k.x_max, q: k.q, p: k.p, omega: k.omega, n: k.n }
    }

    pub fn truth(&self) -> Result<PriorSpec, CliError> {
        let k = &self.keys;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| CliError::Validation(format!("truth {:?} needs {name}", k.truth)));
        match k.truth.as_str() {
            "uniform" => Ok(PriorSpec::UniformProduct),
            "fixed" => Ok(PriorSpec::Fixed { rho: need(k.truth_rho, "truth_rho")?, eta: need(k.truth_eta, "truth_eta")? }),
            "fixed-eta" => Ok(PriorSpec::FixedEta { eta: need(k.truth_eta, "truth_eta")? }),
            other => Err(CliError::Validation(format!("unknown truth {other:?} (uniform, fixed, fixed-eta)"))),
        }
    }

    /// Policy spec for `name` with the shared overrides and an optional replicate count.
    pub fn spec(&self, name: &str, replicates: Option<usize>) -> Result<PolicySpec, CliError> {
        let mut value = serde_json::to_value(PolicySpec::named(name)).map_err(|e| CliError::Runtime(e.to_string()))?;
        let obj = value.as_object_mut().ok_or_else(|| CliError::Runtime("policy spec is not an object".into()))?;
        for (k, v) in &self.overrides {
            obj.insert(k.clone(), v.clone());
        }
        let mut spec: PolicySpec =
            serde_json::from_value(value).map_err(|e| CliError::Validation(format!("policy {name}: {e}")))?;
        if let Some(b) = replicates {
            spec.b = b;
        }
        Ok(spec)
    }

    /// Scenario on the unit axis ready for simulation.
    pub fn scenario(&self, policy: Policy, reps: usize, seed: u64) -> Result<Scenario, CliError> {
        let cfg = self.cfg();
        cfg.validate()?;
        let k = &self.keys;
        let mut s = Scenario::new(cfg, self.truth()?, policy, reps, seed);
        s.resolution = Resolution::new(k.m_rho, k.m_eta);
        s.settings.dose_grid = dosefind::DoseGrid::uniform(&s.cfg, k.dose_points);
        s.settings.design_stride = k.design_stride.max(1);
        s.settings.start_at_x_min = k.start_at_x_min;
        s.estimator = k.estimator;
        s.risk_loss = k.risk_loss;
        s.validate()?;
        Ok(s)
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}
