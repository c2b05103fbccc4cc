//! Single-step dosing rules.
//!
//! A [`Policy`] maps the current trial state (history plus posterior) to the
//! next dose, or to a stop decision for the rule-based escalation designs.
//! Every rule is a pure function of its [`DoseContext`]; randomized rules
//! (rollouts) draw from a stream derived from `DoseContext::stream` and the
//! stage index.

pub mod design;
pub mod escalation;
pub mod mle;
pub mod myopic;
pub mod spec;

use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::hybrid::HybridCoefficients;
use crate::model::{LossSpec, TrialConfig};
use crate::posterior::{PosteriorGrid, TrialHistory};
use crate::rollout::RolloutConfig;

pub use design::{c_optimal_dose, d_optimal_dose, information_matrix, DesignNodes, Sym2};
pub use escalation::{modified_two_stage_dose, three_plus_three_step, StepOutcome, StepUpDownState};
pub use mle::{logistic_mle, sa_dose, wu_dose};
pub use myopic::myopic_dose;
pub use spec::PolicySpec;

pub const DEFAULT_DOSE_POINTS: usize = 101;

/// Sorted candidate doses spanning `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    doses: Vec<f64>,
}

impl DoseGrid {
    pub fn uniform(cfg: &TrialConfig, points: usize) -> Self {
        let points = points.max(2);
        let doses = (0..points)
            .map(|i| cfg.from_unit(i as f64 / (points - 1) as f64))
            .collect();
        DoseGrid { doses }
    }

    /// Explicit doses; must be strictly increasing.
    pub fn from_doses(doses: Vec<f64>) -> Result<Self> {
        if doses.is_empty() || doses.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DoseError::InvalidPolicy("dose grid must be non-empty and strictly increasing".into()));
        }
        Ok(DoseGrid { doses })
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    /// Largest spacing between neighbouring doses.
    pub fn step(&self) -> f64 {
        self.doses.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Argmin of `f` over the grid; ties resolve to the lowest dose.
    pub fn argmin<F: FnMut(f64) -> f64>(&self, mut f: F) -> (f64, f64) {
        let mut best = (self.doses[0], f(self.doses[0]));
        for &x in &self.doses[1..] {
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
        }
        best
    }

    /// Argmin of a convex `f`; stops scanning once `f` starts increasing.
    pub fn argmin_convex<F: FnMut(f64) -> f64>(&self, mut f: F) -> (f64, f64) {
        let mut best = (self.doses[0], f(self.doses[0]));
        for &x in &self.doses[1..] {
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            } else if v > best.1 {
                break;
            }
        }
        best
    }

    /// Evenly spread subset of at most `count` doses, always keeping both ends.
    pub fn subgrid(&self, count: usize) -> DoseGrid {
        let len = self.doses.len();
        if count >= len || len < 2 {
            return self.clone();
        }
        let count = count.max(2);
        let mut doses: Vec<f64> = (0..count)
            .map(|i| self.doses[((i * (len - 1)) as f64 / (count - 1) as f64).round() as usize])
            .collect();
        doses.dedup();
        DoseGrid { doses }
    }
}

/// Which myopic rule a composite design uses for its treatment dose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Myopic {
    #[default]
    Ewoc,
    Crm,
}

impl Myopic {
    pub fn loss(&self, cfg: &TrialConfig) -> LossSpec {
        match self {
            Myopic::Ewoc => LossSpec::ewoc(cfg.omega),
            Myopic::Crm => LossSpec::crm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Crm,
    Ewoc,
    /// Sequential Bayesian c-optimal design.
    COpt { c: [f64; 2] },
    /// Sequential Bayesian D-optimal design under `P(x > eta) <= eps`.
    DOpt { eps: f64 },
    /// Maximum-likelihood plug-in.
    Wu,
    /// Adaptive Robbins-Monro stochastic approximation.
    Sa { step: f64 },
    ThreePlusThree { levels: Vec<f64> },
    /// Modified 3+3 first stage (two patients on the ladder, one at the EWOC
    /// dose per cohort) for `switch_k` patients, then `inner`.
    ModifiedTwoStage { levels: Vec<f64>, switch_k: usize, inner: Box<Policy> },
    /// Convex combination of a myopic dose and a learning dose.
    Hybrid { coeffs: HybridCoefficients, learning: Box<Policy>, myopic: Myopic },
    /// One-step rollout of a base policy.
    Rollout { base: Box<Policy>, config: RolloutConfig },
    /// Always the same dose; a reference rule for tests and oracles.
    Constant { dose: f64 },
}

/// What a policy decided for the next patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Dose(f64),
    /// The escalation rule stopped the trial. `at_floor` marks a stop at the
    /// lowest level, where the true declared MTD lies below the ladder.
    Stop { declared_mtd: f64, at_floor: bool },
}

impl Decision {
    pub fn dose(&self) -> Option<f64> {
        match *self {
            Decision::Dose(x) => Some(x),
            Decision::Stop { .. } => None,
        }
    }
}

/// Engine-wide numerical settings shared by every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    pub dose_grid: DoseGrid,
    /// Candidates searched by the c- and D-optimal designs; `None` uses `dose_grid`.
    pub design_grid: Option<DoseGrid>,
    /// Block size used to coarsen the posterior for design-criterion integrals.
    pub design_stride: usize,
    /// Give the first patient `x_min` regardless of the rule.
    pub start_at_x_min: bool,
}

impl PolicySettings {
    pub fn new(cfg: &TrialConfig) -> Self {
        PolicySettings {
            dose_grid: DoseGrid::uniform(cfg, DEFAULT_DOSE_POINTS),
            design_grid: None,
            design_stride: 4,
            start_at_x_min: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DoseContext<'a> {
    pub history: &'a TrialHistory,
    pub posterior: &'a PosteriorGrid,
    pub settings: &'a PolicySettings,
    /// Seed for randomized rules; combined with the stage index.
    pub stream: u64,
}

impl<'a> DoseContext<'a> {
    pub fn cfg(&self) -> &TrialConfig {
        &self.history.cfg
    }

    /// 1-based index of the patient about to be dosed.
    pub fn stage(&self) -> usize {
        self.history.len() + 1
    }
}

/// Components behind a recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseDetail {
    pub decision: Decision,
    pub myopic_dose: Option<f64>,
    pub learning_dose: Option<f64>,
    pub epsilon: Option<f64>,
}

impl Policy {
    /// Display name used in reports.
    pub fn name(&self) -> String {
        match self {
            Policy::Crm => "CRM".into(),
            Policy::Ewoc => "EWOC".into(),
            Policy::COpt { .. } => "c-opt".into(),
            Policy::DOpt { .. } => "D-opt".into(),
            Policy::Wu => "Wu".into(),
            Policy::Sa { .. } => "SA".into(),
            Policy::ThreePlusThree { levels } => format!("3+3_{}", levels.len()),
            Policy::ModifiedTwoStage { inner, .. } => format!("{} (two-stage)", inner.name()),
            Policy::Hybrid { .. } => "Hybrid".into(),
            Policy::Rollout { base, .. } => format!("ROLL({})", base.name()),
            Policy::Constant { .. } => "Constant".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Rollout { base, config } => {
                if base.contains_rollout() {
                    return Err(DoseError::InvalidPolicy("rollout cannot use a rollout as its base".into()));
                }
                config.validate()?;
                base.validate()
            }
            Policy::ModifiedTwoStage { levels, inner, .. } => {
                if levels.is_empty() {
                    return Err(DoseError::InvalidPolicy("two-stage design needs dose levels".into()));
                }
                if matches!(**inner, Policy::ModifiedTwoStage { .. }) {
                    return Err(DoseError::InvalidPolicy("two-stage designs cannot nest".into()));
                }
                inner.validate()
            }
            Policy::ThreePlusThree { levels } if levels.is_empty() => {
                Err(DoseError::InvalidPolicy("3+3 design needs dose levels".into()))
            }
            Policy::Hybrid { learning, .. } => learning.validate(),
            Policy::DOpt { eps } if !(*eps > 0.0 && *eps <= 1.0) => {
                Err(DoseError::InvalidPolicy(format!("D-opt eps ({eps}) must lie in (0, 1]")))
            }
            Policy::Sa { step } if !(*step > 0.0) => {
                Err(DoseError::InvalidPolicy(format!("SA step ({step}) must be positive")))
            }
            _ => Ok(()),
        }
    }

    fn contains_rollout(&self) -> bool {
        match self {
            Policy::Rollout { .. } => true,
            Policy::ModifiedTwoStage { inner, .. } => inner.contains_rollout(),
            Policy::Hybrid { learning, .. } => learning.contains_rollout(),
            _ => false,
        }
    }

    /// Same rule with dose levels and fixed doses mapped from `cfg`'s axis to the unit axis.
    pub fn to_unit(&self, cfg: &TrialConfig) -> Policy {
        let map = |v: &[f64]| v.iter().map(|&x| cfg.to_unit(x)).collect::<Vec<_>>();
        match self {
            Policy::ThreePlusThree { levels } => Policy::ThreePlusThree { levels: map(levels) },
            Policy::ModifiedTwoStage { levels, switch_k, inner } => {
                Policy::ModifiedTwoStage { levels: map(levels), switch_k: *switch_k, inner: Box::new(inner.to_unit(cfg)) }
            }
            Policy::Hybrid { coeffs, learning, myopic } => {
                Policy::Hybrid { coeffs: coeffs.clone(), learning: Box::new(learning.to_unit(cfg)), myopic: *myopic }
            }
            Policy::Rollout { base, config } => Policy::Rollout { base: Box::new(base.to_unit(cfg)), config: config.clone() },
            Policy::Constant { dose } => Policy::Constant { dose: cfg.to_unit(*dose) },
            other => other.clone(),
        }
    }

    /// The design's own estimate of the MTD once `ctx.history` is complete:
    /// the dose it would give the next patient for the myopic, hybrid,
    /// plug-in and escalation rules, and the posterior mean otherwise.
    pub fn mtd_estimate(&self, ctx: &DoseContext) -> Result<f64> {
        let cfg = *ctx.cfg();
        let grid = &ctx.settings.dose_grid;
        let post = ctx.posterior;
        Ok(match self {
            Policy::Ewoc => myopic_dose(post, &LossSpec::ewoc(cfg.omega), grid),
            Policy::Crm => myopic_dose(post, &LossSpec::crm(), grid),
            Policy::Hybrid { coeffs, learning, myopic } => crate::hybrid::hybrid_dose(ctx, coeffs, learning, *myopic)?,
            Policy::Wu => wu_dose(ctx.history, post, grid),
            Policy::Sa { step } => sa_dose(ctx.history, *step),
            Policy::ThreePlusThree { levels } => match StepUpDownState::replay(levels, ctx.history)?.decision(levels) {
                Decision::Dose(x) => x,
                Decision::Stop { declared_mtd, .. } => declared_mtd,
            },
            Policy::ModifiedTwoStage { inner, .. } => inner.mtd_estimate(ctx)?,
            Policy::COpt { .. } | Policy::DOpt { .. } | Policy::Rollout { .. } | Policy::Constant { .. } => post.eta_mean(),
        })
    }

    pub fn decide(&self, ctx: &DoseContext) -> Result<Decision> {
        match self {
            Policy::Hybrid { coeffs, learning, myopic } if !(ctx.history.is_empty() && ctx.settings.start_at_x_min) => {
                Ok(Decision::Dose(crate::hybrid::hybrid_dose(ctx, coeffs, learning, *myopic)?))
            }
            Policy::ModifiedTwoStage { switch_k, inner, .. } if ctx.history.len() >= *switch_k => inner.decide(ctx),
            _ => Ok(self.explain(ctx)?.decision),
        }
    }

    /// Decision plus the myopic/learning components where the rule has them.
    pub fn explain(&self, ctx: &DoseContext) -> Result<DoseDetail> {
        let cfg = *ctx.cfg();
        let plain = |x: f64| DoseDetail { decision: Decision::Dose(cfg.clamp_dose(x)), myopic_dose: None, learning_dose: None, epsilon: None };
        if ctx.history.is_empty() && ctx.settings.start_at_x_min {
            return Ok(plain(cfg.x_min));
        }
        let grid = &ctx.settings.dose_grid;
        let post = ctx.posterior;
        let detail = match self {
            Policy::Crm => {
                let m = myopic_dose(post, &LossSpec::crm(), grid);
                DoseDetail { myopic_dose: Some(m), ..plain(m) }
            }
            Policy::Ewoc => {
                let m = myopic_dose(post, &LossSpec::ewoc(cfg.omega), grid);
                DoseDetail { myopic_dose: Some(m), ..plain(m) }
            }
            Policy::COpt { c } => {
                let dgrid = ctx.settings.design_grid.as_ref().unwrap_or(grid);
                let l = c_optimal_dose(post, ctx.history, *c, dgrid, ctx.settings.design_stride);
                DoseDetail { learning_dose: Some(l), ..plain(l) }
            }
            Policy::DOpt { eps } => {
                let dgrid = ctx.settings.design_grid.as_ref().unwrap_or(grid);
                let l = d_optimal_dose(post, ctx.history, *eps, dgrid, ctx.settings.design_stride);
                DoseDetail { learning_dose: Some(l), ..plain(l) }
            }
            Policy::Wu => plain(wu_dose(ctx.history, post, grid)),
            Policy::Sa { step } => plain(sa_dose(ctx.history, *step)),
            Policy::ThreePlusThree { levels } => {
                let state = StepUpDownState::replay(levels, ctx.history)?;
                let decision = state.decision(levels);
                DoseDetail { decision, ..plain(cfg.x_min) }
            }
            Policy::ModifiedTwoStage { levels, switch_k, inner } => {
                if ctx.history.len() < *switch_k {
                    if escalation::TwoStageState::replay(levels, ctx.history).stopped {
                        let decision = Decision::Stop { declared_mtd: levels[0], at_floor: true };
                        DoseDetail { decision, ..plain(cfg.x_min) }
                    } else {
                        plain(modified_two_stage_dose(levels, ctx.history, post, grid)?)
                    }
                } else {
                    inner.explain(ctx)?
                }
            }
            Policy::Hybrid { coeffs, learning, myopic } => {
                let h = crate::hybrid::hybrid_components(ctx, coeffs, learning, *myopic, true)?;
                DoseDetail {
                    decision: Decision::Dose(h.dose),
                    myopic_dose: Some(h.myopic),
                    learning_dose: h.learning,
                    epsilon: Some(h.epsilon),
                }
            }
            Policy::Rollout { base, config } => {
                let x = crate::rollout::rollout_dose(ctx, base, config)?;
                plain(x)
            }
            Policy::Constant { dose } => plain(*dose),
        };
        Ok(detail)
    }
}
