//! Recommendations for a live trial, computed on the unit dose axis and
//! reported on the trial's own axis.

use dosefind::posterior::DEFAULT_RESOLUTION;
use dosefind::{
    posterior_from_history, Decision, DoseContext, Policy, PolicySettings, PolicySpec, PosteriorGrid, PriorSpec,
    TrialConfig, TrialHistory,
};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Absent once the trial is complete or stopped.
    pub next_dose: Option<f64>,
    pub myopic_dose: Option<f64>,
    pub learning_dose: Option<f64>,
    pub epsilon: Option<f64>,
    pub eta_mean: f64,
    pub eta_sd: f64,
    /// Next dose if the patient given `next_dose` has a toxicity.
    pub what_if_toxic: Option<f64>,
    pub what_if_nontoxic: Option<f64>,
    pub patients: usize,
    pub complete: bool,
    pub stopped: bool,
    pub declared_mtd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensitySample {
    pub eta: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorView {
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub samples: Vec<DensitySample>,
}

/// A trial's configuration and policy, ready to evaluate histories.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: TrialConfig,
    unit: TrialConfig,
    policy: Policy,
    settings: PolicySettings,
}

impl Engine {
    pub fn new(cfg: TrialConfig, spec: &PolicySpec) -> Result<Self, ApiError> {
        if cfg.q >= cfg.p {
            return Err(ApiError::invalid(format!("q ({}) must be below p ({})", cfg.q, cfg.p)));
        }
        cfg.validate()?;
        let unit = cfg.unit();
        let policy = spec.build(&cfg)?.to_unit(&cfg);
        Ok(Engine { cfg, unit, settings: PolicySettings::new(&unit), policy })
    }

    pub fn cfg(&self) -> &TrialConfig {
        &self.cfg
    }

    fn unit_history(&self, outcomes: &[(f64, bool)]) -> Result<TrialHistory, ApiError> {
        let mut h = TrialHistory::new(self.unit);
        for &(dose, toxic) in outcomes {
            h.push(self.cfg.to_unit(dose).clamp(0.0, 1.0), toxic)?;
        }
        Ok(h)
    }

    fn posterior(&self, history: &TrialHistory) -> Result<PosteriorGrid, ApiError> {
        Ok(posterior_from_history(history, &PriorSpec::UniformProduct, DEFAULT_RESOLUTION)?)
    }

    fn decide(&self, history: &TrialHistory, post: &PosteriorGrid) -> Result<dosefind::policies::DoseDetail, ApiError> {
        let ctx = DoseContext { history, posterior: post, settings: &self.settings, stream: 0 };
        Ok(self.policy.explain(&ctx)?)
    }

    fn next_dose(&self, history: &TrialHistory) -> Result<Option<f64>, ApiError> {
        if history.len() >= self.unit.n {
            return Ok(None);
        }
        let post = self.posterior(history)?;
        Ok(self.decide(history, &post)?.decision.dose().map(|x| self.cfg.from_unit(x)))
    }

    pub fn check_dose(&self, dose: f64) -> Result<(), ApiError> {
        if !(dose.is_finite() && dose >= self.cfg.x_min && dose <= self.cfg.x_max) {
            return Err(ApiError::invalid(format!("dose {dose} outside [{}, {}]", self.cfg.x_min, self.cfg.x_max)));
        }
        Ok(())
    }

    pub fn recommend(&self, outcomes: &[(f64, bool)]) -> Result<Recommendation, ApiError> {
        let history = self.unit_history(outcomes)?;
        let post = self.posterior(&history)?;
        let range = self.cfg.range();
        let mut rec = Recommendation {
            next_dose: None,
            myopic_dose: None,
            learning_dose: None,
            epsilon: None,
            eta_mean: self.cfg.from_unit(post.eta_mean()),
            eta_sd: post.eta_sd() * range,
            what_if_toxic: None,
            what_if_nontoxic: None,
            patients: history.len(),
            complete: history.len() >= self.unit.n,
            stopped: false,
            declared_mtd: None,
        };
        if rec.complete {
            return Ok(rec);
        }
        let detail = match self.decide(&history, &post) {
            Ok(d) => d,
            Err(ApiError::Engine(dosefind::DoseError::StoppedTrial)) => {
                rec.stopped = true;
                return Ok(rec);
            }
            Err(e) => return Err(e),
        };
        let to_axis = |x: Option<f64>| x.map(|v| self.cfg.from_unit(v));
        rec.myopic_dose = to_axis(detail.myopic_dose);
        rec.learning_dose = to_axis(detail.learning_dose);
        rec.epsilon = detail.epsilon;
        match detail.decision {
            Decision::Dose(x) => {
                let dose = self.cfg.from_unit(x);
                rec.next_dose = Some(dose);
                rec.what_if_toxic = self.next_dose(&history.appended(x, true)?)?;
                rec.what_if_nontoxic = self.next_dose(&history.appended(x, false)?)?;
            }
            Decision::Stop { declared_mtd, .. } => {
                rec.stopped = true;
                rec.declared_mtd = Some(self.cfg.from_unit(declared_mtd));
            }
        }
        Ok(rec)
    }

    pub fn posterior_view(&self, outcomes: &[(f64, bool)]) -> Result<PosteriorView, ApiError> {
        let post = self.posterior(&self.unit_history(outcomes)?)?;
        let range = self.cfg.range();
        Ok(PosteriorView {
            eta_mean: self.cfg.from_unit(post.eta_mean()),
            eta_sd: post.eta_sd() * range,
            samples: post
                .eta_density()
                .into_iter()
                .map(|(e, d)| DensitySample { eta: self.cfg.from_unit(e), density: d / range })
                .collect(),
        })
    }
}

impl Engine {
    /// Dose the policy would give the next patient; `None` once the trial is
    /// complete or the escalation rule has stopped it.
    pub fn pending_dose(&self, outcomes: &[(f64, bool)]) -> Result<Option<f64>, ApiError> {
        match self.next_dose(&self.unit_history(outcomes)?) {
            Err(ApiError::Engine(dosefind::DoseError::StoppedTrial)) => Ok(None),
            other => other,
        }
    }
}
