//! Flat key-value description of a policy, as used in scenario files and
//! API requests.

use serde::{Deserialize, Serialize};

use super::escalation::uniform_levels;
use super::{Myopic, Policy};
use crate::error::{DoseError, Result};
use crate::hybrid::{EpsilonMode, HybridCoefficients};
use crate::model::TrialConfig;
use crate::posterior::Resolution;
use crate::rollout::RolloutConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// ewoc | crm | copt | dopt | wu | sa | 3p3 | two-stage | hybrid | rollout
    pub policy: String,
    pub c0: f64,
    pub c1: f64,
    pub eps: f64,
    pub sa_step: f64,
    /// Number of equally spaced ladder levels for 3p3 and two-stage.
    pub levels: usize,
    /// Explicit ladder doses; overrides `levels`.
    pub level_doses: Option<Vec<f64>>,
    /// Patients in the first stage of two-stage; defaults to `n / 4`.
    pub switch_k: Option<usize>,
    /// Second-stage policy of two-stage.
    pub inner: Option<Box<PolicySpec>>,
    /// Policy being rolled out.
    pub base: Option<Box<PolicySpec>>,
    pub beta0: f64,
    pub beta1: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub mode: EpsilonMode,
    /// Learning policy of hybrid (default copt).
    pub learning: Option<Box<PolicySpec>>,
    pub myopic: Myopic,
    /// Plain coefficients are ignored when this is set.
    pub coefficients: Option<HybridCoefficients>,
    #[serde(rename = "B")]
    pub b: usize,
    pub candidates: usize,
    pub rollout_seed: u64,
    pub include_terminal: bool,
    pub rollout_m_rho: usize,
    pub rollout_m_eta: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        let rc = RolloutConfig::default();
        let res = rc.resolution.unwrap_or(crate::rollout::DEFAULT_ROLLOUT_RESOLUTION);
        PolicySpec {
            policy: "ewoc".into(),
            c0: 0.0,
            c1: 1.0,
            eps: 0.05,
            sa_step: 1.0,
            levels: 10,
            level_doses: None,
            switch_k: None,
            inner: None,
            base: None,
            beta0: 0.096,
            beta1: 0.02,
            s_lo: 0.0,
            s_hi: 1.0,
            mode: EpsilonMode::Clamped,
            learning: None,
            myopic: Myopic::Ewoc,
            coefficients: None,
            b: rc.replicates,
            candidates: rc.candidates,
            rollout_seed: rc.seed,
            include_terminal: rc.include_terminal,
            rollout_m_rho: res.m_rho,
            rollout_m_eta: res.m_eta,
        }
    }
}

impl PolicySpec {
    /// Defaults for a policy name. `3p3_<L>` selects `L` ladder levels.
    pub fn named(name: &str) -> Self {
        let name = name.trim().to_ascii_lowercase();
        if let Some(l) = name.strip_prefix("3p3_").and_then(|s| s.parse().ok()) {
            return PolicySpec { policy: "3p3".into(), levels: l, ..Default::default() };
        }
        PolicySpec { policy: name, ..Default::default() }
    }

    fn ladder(&self, cfg: &TrialConfig) -> Vec<f64> {
        match &self.level_doses {
            Some(v) => v.clone(),
            None => uniform_levels(cfg.x_min, cfg.x_max, self.levels),
        }
    }

    fn sub(spec: &Option<Box<PolicySpec>>, default: &str, cfg: &TrialConfig) -> Result<Policy> {
        match spec {
            Some(s) => s.build(cfg),
            None => PolicySpec::named(default).build(cfg),
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            replicates: self.b,
            candidates: self.candidates,
            resolution: Some(Resolution::new(self.rollout_m_rho, self.rollout_m_eta)),
            seed: self.rollout_seed,
            include_terminal: self.include_terminal,
            ..RolloutConfig::default()
        }
    }

    /// Policy on `cfg`'s dose axis.
    pub fn build(&self, cfg: &TrialConfig) -> Result<Policy> {
        let policy = match self.policy.as_str() {
            "ewoc" => Policy::Ewoc,
            "crm" => Policy::Crm,
            "copt" => Policy::COpt { c: [self.c0, self.c1] },
            "dopt" => Policy::DOpt { eps: self.eps },
            "wu" => Policy::Wu,
            "sa" => Policy::Sa { step: self.sa_step },
            "3p3" => Policy::ThreePlusThree { levels: self.ladder(cfg) },
            "two-stage" => Policy::ModifiedTwoStage {
                levels: self.ladder(cfg),
                switch_k: self.switch_k.unwrap_or(cfg.n / 4),
                inner: Box::new(Self::sub(&self.inner, "ewoc", cfg)?),
            },
            "hybrid" => {
                let coeffs = match &self.coefficients {
                    Some(c) => c.clone(),
                    None => HybridCoefficients {
                        s_lo: self.s_lo,
                        s_hi: self.s_hi,
                        mode: self.mode,
                        ..HybridCoefficients::single(self.beta0, self.beta1, cfg.n)
                    },
                };
                coeffs.validate(cfg.n)?;
                Policy::Hybrid { coeffs, learning: Box::new(Self::sub(&self.learning, "copt", cfg)?), myopic: self.myopic }
            }
            "rollout" => Policy::Rollout { base: Box::new(Self::sub(&self.base, "ewoc", cfg)?), config: self.rollout_config() },
            other => return Err(DoseError::InvalidPolicy(format!("unknown policy {other:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_build() {
        let cfg = TrialConfig::five_fu();
        for name in ["ewoc", "crm", "copt", "dopt", "wu", "sa", "3p3", "3p3_20", "two-stage", "hybrid", "rollout"] {
            PolicySpec::named(name).build(&cfg).unwrap();
        }
        assert!(PolicySpec::named("nope").build(&cfg).is_err());
        match PolicySpec::named("3p3_20").build(&cfg).unwrap() {
            Policy::ThreePlusThree { levels } => {
                assert_eq!(levels.len(), 20);
                assert_eq!((levels[0], levels[19]), (140.0, 425.0));
            }
            p => panic!("{p:?}"),
        }
        match PolicySpec::named("two-stage").build(&cfg).unwrap() {
            Policy::ModifiedTwoStage { switch_k, .. } => assert_eq!(switch_k, 6),
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn nested_rollout_rejected() {
        let spec = PolicySpec {
            policy: "rollout".into(),
            base: Some(Box::new(PolicySpec::named("rollout"))),
            ..Default::default()
        };
        assert!(spec.build(&TrialConfig::unit_example()).is_err());
    }

    #[test]
    fn from_json_keys() {
        let spec: PolicySpec = serde_json::from_str(r#"{"policy":"rollout","B":30,"base":{"policy":"crm"}}"#).unwrap();
        match spec.build(&TrialConfig::unit_example()).unwrap() {
            Policy::Rollout { base, config } => {
                assert_eq!(*base, Policy::Crm);
                assert_eq!(config.replicates, 30);
            }
            p => panic!("{p:?}"),
        }
    }
}
