//! Replicated-trial simulation and operating characteristics.
//!
//! Scenarios are converted to the unit dose axis on construction, so every
//! loss, bias and RMSE is reported on the rescaled axis.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::model::{logistic, loss_h, LossSpec, ModelPoint, TrialConfig};
use crate::policies::{Decision, DoseContext, Myopic, Policy, PolicySettings};
use crate::posterior::{GridGeometry, PosteriorGrid, PriorSpec, Resolution, TrialHistory};
use crate::rng::{derive, stream};
use crate::rollout::{CostBreakdown, Estimate};

/// How the final MTD estimate of a trial is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// The design's own estimate (`Policy::mtd_estimate`).
    #[default]
    Design,
    PosteriorMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Configuration on the unit axis.
    pub cfg: TrialConfig,
    pub truth: PriorSpec,
    pub policy: Policy,
    pub n_reps: usize,
    pub seed: u64,
    pub settings: PolicySettings,
    pub resolution: Resolution,
    /// Per-patient loss in the global risk.
    pub risk_loss: Myopic,
    pub estimator: Estimator,
}

impl Scenario {
    /// `cfg`, `truth` and dose levels inside `policy` are given on the
    /// original axis and rescaled here.
    pub fn new(cfg: TrialConfig, truth: PriorSpec, policy: Policy, n_reps: usize, seed: u64) -> Self {
        let unit = cfg.unit();
        let truth = match truth {
            PriorSpec::UniformProduct => PriorSpec::UniformProduct,
            PriorSpec::Fixed { rho, eta } => PriorSpec::Fixed { rho, eta: cfg.to_unit(eta) },
            PriorSpec::FixedEta { eta } => PriorSpec::FixedEta { eta: cfg.to_unit(eta) },
        };
        Scenario {
            cfg: unit,
            truth,
            policy: policy.to_unit(&cfg),
            n_reps,
            seed,
            settings: PolicySettings::new(&unit),
            resolution: Resolution::default(),
            risk_loss: Myopic::Ewoc,
            estimator: Estimator::Design,
        }
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        Scenario { policy, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.policy.validate()?;
        if self.n_reps < 2 {
            return Err(DoseError::InvalidConfig(vec![format!("n_reps ({}) must be at least 2", self.n_reps)]));
        }
        Ok(())
    }

    fn risk_spec(&self) -> LossSpec {
        self.risk_loss.loss(&self.cfg)
    }
}

/// One simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub truth: ModelPoint,
    pub history: TrialHistory,
    pub eta_hat: f64,
    /// `h(x_i, eta)` at the true `eta` for every administered dose.
    pub stage_losses: Vec<f64>,
    /// `(eta_hat - eta)^2`.
    pub terminal_loss: f64,
    pub stopped: bool,
}

impl TrialOutcome {
    pub fn total_loss(&self) -> f64 {
        self.stage_losses.iter().sum::<f64>() + self.terminal_loss
    }

    pub fn dlt_rate(&self) -> f64 {
        self.history.toxicities() as f64 / self.history.len().max(1) as f64
    }

    pub fn od_rate(&self) -> f64 {
        let over = self.history.records().iter().filter(|r| r.dose > self.truth.eta).count();
        over as f64 / self.history.len().max(1) as f64
    }
}

/// Stage hook: sees the context before each decision and may replace it.
pub type StageHook<'a> = dyn FnMut(&DoseContext) -> Result<Option<Decision>> + 'a;

pub fn run_trial(scenario: &Scenario, rep: usize) -> Result<TrialOutcome> {
    run_trial_with(scenario, rep, &mut |_| Ok(None))
}

/// Runs trial `rep`. The truth, the response uniforms and the policy stream
/// each come from their own stream derived from `(seed, rep)`.
pub fn run_trial_with(scenario: &Scenario, rep: usize, hook: &mut StageHook) -> Result<TrialOutcome> {
    let cfg = scenario.cfg;
    let spec = scenario.risk_spec();
    let truth = scenario.truth.sample(&cfg, &mut stream(scenario.seed, &[rep as u64, 0]));
    let (alpha, beta) = truth.params(&cfg)?;
    let mut responses = stream(scenario.seed, &[rep as u64, 1]);
    let policy_stream = derive(scenario.seed, &[rep as u64, 2]);
    let geom = shared_geometry(&cfg, scenario.resolution)?;
    let mut post = PosteriorGrid::prior(geom);
    let mut history = TrialHistory::new(cfg);
    let mut stage_losses = Vec::with_capacity(cfg.n);
    let mut declared = None;
    while history.len() < cfg.n {
        let ctx = DoseContext { history: &history, posterior: &post, settings: &scenario.settings, stream: policy_stream };
        let decision = match hook(&ctx)? {
            Some(d) => d,
            None => scenario.policy.decide(&ctx)?,
        };
        let x = match decision {
            Decision::Dose(x) => cfg.clamp_dose(x),
            Decision::Stop { declared_mtd, .. } => {
                declared = Some(declared_mtd);
                break;
            }
        };
        stage_losses.push(loss_h(x, truth.eta, &spec));
        let toxic = responses.gen::<f64>() < logistic(alpha + beta * x);
        post.update(x, toxic)?;
        history.push(x, toxic)?;
    }
    let eta_hat = match (declared, scenario.estimator) {
        (Some(d), _) => d,
        (None, Estimator::PosteriorMean) => post.eta_mean(),
        (None, Estimator::Design) => {
            let ctx = DoseContext { history: &history, posterior: &post, settings: &scenario.settings, stream: policy_stream };
            scenario.policy.mtd_estimate(&ctx)?
        }
    };
    Ok(TrialOutcome {
        truth,
        terminal_loss: (eta_hat - truth.eta) * (eta_hat - truth.eta),
        history,
        eta_hat,
        stage_losses,
        stopped: declared.is_some(),
    })
}

thread_local! {
    static SIM_GEOMETRY: std::cell::RefCell<Option<(TrialConfig, Resolution, std::sync::Arc<GridGeometry>)>> =
        const { std::cell::RefCell::new(None) };
}

fn shared_geometry(cfg: &TrialConfig, res: Resolution) -> Result<std::sync::Arc<GridGeometry>> {
    if let Some(g) = SIM_GEOMETRY.with(|c| {
        c.borrow().as_ref().filter(|(c0, r0, _)| c0 == cfg && *r0 == res).map(|(_, _, g)| g.clone())
    }) {
        return Ok(g);
    }
    let g = GridGeometry::midpoint(cfg, res)?;
    SIM_GEOMETRY.with(|c| *c.borrow_mut() = Some((*cfg, res, g.clone())));
    Ok(g)
}

/// Operating characteristics of one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: String,
    pub reps: usize,
    pub risk: Estimate,
    pub bias: Estimate,
    pub rmse: Estimate,
    pub dlt: Estimate,
    pub od: Estimate,
    pub breakdown: CostBreakdown,
    /// Fraction of trials halted early by an escalation rule.
    pub stopped_fraction: f64,
}

pub const CSV_HEADER: &str = "design,risk,risk_se,bias,bias_se,rmse,rmse_se,dlt,dlt_se,od,od_se";

impl SimReport {
    pub fn from_outcomes(design: String, outcomes: &[TrialOutcome], n: usize) -> Self {
        let reps = outcomes.len();
        let errs: Vec<f64> = outcomes.iter().map(|o| o.eta_hat - o.truth.eta).collect();
        let sq: Vec<f64> = errs.iter().map(|e| e * e).collect();
        let mse = Estimate::from_samples(&sq);
        let rmse = mse.mean.sqrt();
        let rmse_se = if rmse > 0.0 { mse.se / (2.0 * rmse) } else { 0.0 };
        let doses: usize = outcomes.iter().map(|o| o.history.len()).sum();
        let tox: usize = outcomes.iter().map(|o| o.history.toxicities()).sum();
        let over: usize = outcomes
            .iter()
            .map(|o| o.history.records().iter().filter(|r| r.dose > o.truth.eta).count())
            .sum();
        let per_trial_se = |f: &dyn Fn(&TrialOutcome) -> f64| {
            Estimate::from_samples(&outcomes.iter().map(f).collect::<Vec<_>>()).se
        };
        let stages: Vec<Vec<f64>> = outcomes.iter().map(|o| o.stage_losses.clone()).collect();
        let terminal: Vec<f64> = outcomes.iter().map(|o| o.terminal_loss).collect();
        let breakdown = CostBreakdown::from_trials(&stages, &terminal, n);
        SimReport {
            design,
            reps,
            risk: breakdown.total,
            bias: Estimate::from_samples(&errs),
            rmse: Estimate { mean: rmse, se: rmse_se },
            dlt: Estimate { mean: tox as f64 / doses.max(1) as f64, se: per_trial_se(&|o| o.dlt_rate()) },
            od: Estimate { mean: over as f64 / doses.max(1) as f64, se: per_trial_se(&|o| o.od_rate()) },
            breakdown,
            stopped_fraction: outcomes.iter().filter(|o| o.stopped).count() as f64 / reps.max(1) as f64,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.design,
            self.risk.mean,
            self.risk.se,
            self.bias.mean,
            self.bias.se,
            self.rmse.mean,
            self.rmse.se,
            self.dlt.mean,
            self.dlt.se,
            self.od.mean,
            self.od.se
        )
    }
}

pub fn reports_csv(reports: &[SimReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Fixed-width table: risk (SE), bias, RMSE, DLT% (SE), OD% (SE).
pub fn format_table(reports: &[SimReport]) -> String {
    let width = reports.iter().map(|r| r.design.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>13}  {:>7}  {:>6}  {:>14}  {:>14}\n",
        "Design", "Risk (SE)", "Bias", "RMSE", "DLT (SE)", "OD (SE)"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>13}  {:>7.3}  {:>6.3}  {:>14}  {:>14}\n",
            r.design,
            format!("{:.2} ({:.2})", r.risk.mean, r.risk.se),
            r.bias.mean,
            r.rmse.mean,
            format!("{:.1}% ({:.1}%)", 100.0 * r.dlt.mean, 100.0 * r.dlt.se),
            format!("{:.1}% ({:.1}%)", 100.0 * r.od.mean, 100.0 * r.od.se),
        ));
    }
    out
}

/// All `n_reps` trials of a scenario, in replicate order.
pub fn simulate_trials(scenario: &Scenario) -> Result<Vec<TrialOutcome>> {
    scenario.validate()?;
    (0..scenario.n_reps).into_par_iter().map(|rep| run_trial(scenario, rep)).collect()
}

pub fn operating_characteristics(scenario: &Scenario) -> Result<SimReport> {
    let outcomes = simulate_trials(scenario)?;
    Ok(SimReport::from_outcomes(scenario.policy.name(), &outcomes, scenario.cfg.n))
}

/// True MTD fixed at the given percentile of the dose range, `rho` uniform;
/// the policies keep the nominal uniform prior.
pub fn misspecification_study(percentile: f64, scenario: &Scenario) -> Result<SimReport> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(DoseError::InvalidConfig(vec![format!("percentile ({percentile}) must lie in (0, 1)")]));
    }
    let eta = scenario.cfg.from_unit(percentile);
    let s = Scenario { truth: PriorSpec::FixedEta { eta }, ..scenario.clone() };
    operating_characteristics(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Consecutive patient pairs examined.
    pub pairs: usize,
    /// Escalations beyond one grid step right after a toxicity.
    pub up_after_toxic: usize,
    /// De-escalations beyond one grid step right after a non-toxicity.
    pub down_after_nontoxic: usize,
}

impl CoherenceReport {
    pub fn violation_rate(&self) -> f64 {
        (self.up_after_toxic + self.down_after_nontoxic) as f64 / self.pairs.max(1) as f64
    }
}

/// Counts incoherent moves over the scenario's simulated trials.
pub fn coherence_audit(policy: &Policy, scenario: &Scenario) -> Result<CoherenceReport> {
    let outcomes = simulate_trials(&scenario.with_policy(policy.clone()))?;
    let step = scenario.settings.dose_grid.step();
    let mut report = CoherenceReport { pairs: 0, up_after_toxic: 0, down_after_nontoxic: 0 };
    for o in &outcomes {
        for w in o.history.records().windows(2) {
            report.pairs += 1;
            if w[0].toxic && w[1].dose > w[0].dose + step + 1e-12 {
                report.up_after_toxic += 1;
            }
            if !w[0].toxic && w[1].dose < w[0].dose - step - 1e-12 {
                report.down_after_nontoxic += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub states: usize,
    /// States where the dose after a toxicity exceeds the dose after a
    /// non-toxicity by more than one grid step.
    pub violations: usize,
    pub max_excess: f64,
}

/// Compares the next dose under both hypothetical responses at `states`
/// histories sampled from the scenario's trials.
pub fn what_if_audit(policy: &Policy, scenario: &Scenario, states: usize) -> Result<WhatIfReport> {
    let source = Scenario { n_reps: states.max(2), ..scenario.clone() };
    let outcomes = simulate_trials(&source)?;
    let step = scenario.settings.dose_grid.step();
    let cfg = scenario.cfg;
    let results: Vec<f64> = outcomes
        .par_iter()
        .take(states)
        .enumerate()
        .map(|(i, o)| -> Result<f64> {
            let mut pick = stream(scenario.seed, &[i as u64, 7]);
            let len = pick.gen_range(0..cfg.n.min(o.history.len().max(1)));
            let base = o.history.prefix(len);
            let x = match base.records().last() {
                Some(r) => r.dose,
                None => cfg.x_min,
            };
            let dose_after = |toxic: bool| -> Result<Option<f64>> {
                let h = base.appended(x, toxic)?;
                if h.len() >= cfg.n {
                    return Ok(None);
                }
                let post = PosteriorGrid::from_history(shared_geometry(&cfg, scenario.resolution)?, &h)?;
                let ctx = DoseContext { history: &h, posterior: &post, settings: &scenario.settings, stream: derive(scenario.seed, &[i as u64, 8]) };
                Ok(policy.decide(&ctx)?.dose())
            };
            match (dose_after(true)?, dose_after(false)?) {
                (Some(t), Some(s)) => Ok(t - s),
                _ => Ok(f64::NEG_INFINITY),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = WhatIfReport { states: 0, violations: 0, max_excess: f64::NEG_INFINITY };
    for d in results.into_iter().filter(|d| d.is_finite()) {
        report.states += 1;
        report.max_excess = report.max_excess.max(d);
        if d > step + 1e-12 {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(policy: Policy, reps: usize) -> Scenario {
        let mut s = Scenario::new(TrialConfig { n: 5, ..TrialConfig::unit_example() }, PriorSpec::UniformProduct, policy, reps, 3);
        s.resolution = Resolution::new(24, 48);
        s
    }

    #[test]
    fn seeded_trial_is_reproducible() {
        let s = small(Policy::Ewoc, 4);
        assert_eq!(run_trial(&s, 2).unwrap(), run_trial(&s, 2).unwrap());
        assert_ne!(run_trial(&s, 1).unwrap().truth, run_trial(&s, 2).unwrap().truth);
    }

    #[test]
    fn oracle_dose_has_zero_stage_loss() {
        let s = Scenario::new(TrialConfig::unit_example(), PriorSpec::Fixed { rho: 0.1, eta: 0.4 }, Policy::Constant { dose: 0.4 }, 2, 1);
        let mut s = s;
        s.settings.start_at_x_min = false;
        let o = run_trial(&s, 0).unwrap();
        assert!(o.stage_losses.iter().all(|&l| l == 0.0));
        assert!((o.total_loss() - o.terminal_loss).abs() < 1e-15);
    }

    #[test]
    fn report_invariants() {
        let s = small(Policy::Ewoc, 40);
        let r = operating_characteristics(&s).unwrap();
        assert!(r.rmse.mean >= r.bias.mean.abs());
        assert!((0.0..=1.0).contains(&r.dlt.mean) && (0.0..=1.0).contains(&r.od.mean));
        assert!(r.risk.se > 0.0);
        let parts: f64 = r.breakdown.stage.iter().map(|e| e.mean).sum::<f64>() + r.breakdown.terminal.mean;
        assert!((parts - r.risk.mean).abs() < 1e-10);
        assert!(r.breakdown.cumulative.windows(2).all(|w| w[1].mean >= w[0].mean));
        assert_eq!(reports_csv(&[r.clone()]).lines().count(), 2);
        assert!(format_table(&[r]).contains("EWOC"));
    }

    #[test]
    fn rescaled_scenario() {
        let s = Scenario::new(TrialConfig::five_fu(), PriorSpec::FixedEta { eta: 282.5 }, Policy::Ewoc, 2, 0);
        assert_eq!(s.cfg.x_min, 0.0);
        assert_eq!(s.truth, PriorSpec::FixedEta { eta: 0.5 });
    }

    #[test]
    fn three_plus_three_is_coherent() {
        let levels = crate::policies::escalation::uniform_levels(0.0, 1.0, 6);
        let s = small(Policy::ThreePlusThree { levels: levels.clone() }, 30);
        let r = coherence_audit(&Policy::ThreePlusThree { levels }, &s).unwrap();
        assert_eq!(r.up_after_toxic + r.down_after_nontoxic, 0);
    }
}
