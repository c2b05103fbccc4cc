//! Monte Carlo cost-to-go and one-step rollout of a base policy.
//!
//! The cost of giving dose `x` to the next patient is the expected loss of
//! that patient plus the expected losses of all later patients when the trial
//! continues under the base policy. Future losses are Rao-Blackwellized:
//! each simulated stage contributes its posterior expected loss rather than
//! the loss at the sampled parameter, and the last response is integrated out
//! exactly. Candidate doses share parameter draws and uniform streams.

use std::cell::RefCell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::model::{logistic, LossSpec, TrialConfig};
use crate::policies::{Decision, DoseContext, DoseGrid, Myopic, Policy, PolicySettings};
use crate::posterior::{GridGeometry, PosteriorGrid, Resolution, TrialHistory};
use crate::rng::{derive, stream};
use rand::Rng;

pub const DEFAULT_REPLICATES: usize = 50;
pub const DEFAULT_CANDIDATES: usize = 25;
pub const DEFAULT_ROLLOUT_RESOLUTION: Resolution = Resolution { m_rho: 20, m_eta: 40 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Simulated continuations per candidate dose.
    pub replicates: usize,
    /// Size of the candidate subgrid searched for the argmin.
    pub candidates: usize,
    /// Posterior grid used inside simulated continuations; `None` reuses the
    /// caller's posterior grid.
    pub resolution: Option<Resolution>,
    pub seed: u64,
    /// Fold the terminal estimation loss into the final stage.
    pub include_terminal: bool,
    /// Per-patient loss being minimized.
    pub loss: Myopic,
    /// Block size for design criteria evaluated inside continuations.
    pub design_stride: usize,
    /// Candidate doses for design criteria inside continuations.
    pub design_points: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            replicates: DEFAULT_REPLICATES,
            candidates: DEFAULT_CANDIDATES,
            resolution: Some(DEFAULT_ROLLOUT_RESOLUTION),
            seed: 0,
            include_terminal: true,
            loss: Myopic::Ewoc,
            design_stride: 4,
            design_points: 26,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.replicates < 1 {
            errs.push("rollout replicates must be at least 1".to_string());
        }
        if self.candidates < 2 {
            errs.push("rollout needs at least 2 candidate doses".to_string());
        }
        if let Some(r) = self.resolution {
            if r.m_rho < 2 || r.m_eta < 2 {
                errs.push(format!("rollout resolution {}x{} is too coarse", r.m_rho, r.m_eta));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DoseError::InvalidPolicy(errs.join("; ")))
        }
    }

    pub fn loss_spec(&self, cfg: &TrialConfig) -> LossSpec {
        self.loss.loss(cfg)
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Estimate { mean, se: (var / n).sqrt() }
    }
}

thread_local! {
    static GEOMETRY_CACHE: RefCell<Vec<(u64, Arc<GridGeometry>)>> = const { RefCell::new(Vec::new()) };
}

fn geometry_key(cfg: &TrialConfig, res: Resolution, grid: &DoseGrid) -> u64 {
    let mut parts = vec![
        cfg.x_min.to_bits(),
        cfg.x_max.to_bits(),
        cfg.q.to_bits(),
        cfg.p.to_bits(),
        res.m_rho as u64,
        res.m_eta as u64,
    ];
    parts.extend(grid.doses().iter().map(|d| d.to_bits()));
    derive(0x5eed, &parts)
}

/// Midpoint geometry with a toxicity table on `grid`, cached per thread.
fn rollout_geometry(cfg: &TrialConfig, res: Resolution, grid: &DoseGrid) -> Result<Arc<GridGeometry>> {
    let key = geometry_key(cfg, res, grid);
    if let Some(g) = GEOMETRY_CACHE.with(|c| c.borrow().iter().find(|(k, _)| *k == key).map(|(_, g)| g.clone())) {
        return Ok(g);
    }
    let geom = GridGeometry::midpoint(cfg, res)?.with_toxicity_table(grid.doses());
    GEOMETRY_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= 8 {
            c.remove(0);
        }
        c.push((key, geom.clone()));
    });
    Ok(geom)
}

/// Everything a set of cost-to-go evaluations at one decision point shares.
struct RolloutState<'a> {
    history: &'a TrialHistory,
    /// Posterior at the caller's resolution (exact current-stage terms).
    posterior: &'a PosteriorGrid,
    /// Posterior used inside simulated continuations.
    sim_posterior: PosteriorGrid,
    node_cdf: Vec<f64>,
    settings: PolicySettings,
    spec: LossSpec,
    include_terminal: bool,
    seed: u64,
    replicates: usize,
}

impl<'a> RolloutState<'a> {
    fn new(ctx: &DoseContext<'a>, rc: &RolloutConfig) -> Result<Self> {
        let cfg = *ctx.cfg();
        if ctx.history.len() >= cfg.n {
            return Err(DoseError::InvalidPolicy(format!("no stages left to roll out (n = {})", cfg.n)));
        }
        let sim_posterior = match rc.resolution {
            Some(res) => {
                PosteriorGrid::from_history(rollout_geometry(&cfg, res, &ctx.settings.dose_grid)?, ctx.history)?
            }
            None => ctx.posterior.clone(),
        };
        let node_cdf = sim_posterior.node_cdf();
        let mut settings = ctx.settings.clone();
        settings.design_stride = rc.design_stride.max(1);
        settings.design_grid = Some(ctx.settings.dose_grid.subgrid(rc.design_points.max(2)));
        Ok(RolloutState {
            history: ctx.history,
            posterior: ctx.posterior,
            sim_posterior,
            node_cdf,
            settings,
            spec: rc.loss_spec(&cfg),
            include_terminal: rc.include_terminal,
            seed: derive(rc.seed, &[ctx.stream, ctx.stage() as u64]),
            replicates: rc.replicates,
        })
    }

    fn cfg(&self) -> &TrialConfig {
        &self.history.cfg
    }

    /// `h_{k-1}(x)`, including the exact terminal term when `x` goes to the last patient.
    fn immediate(&self, x: f64) -> f64 {
        let mut v = self.posterior.expected_loss(x, &self.spec);
        if self.include_terminal && self.history.len() + 1 == self.cfg().n {
            v += self.posterior.preposterior_eta_variance(x);
        }
        v
    }

    /// Future cost of one simulated continuation after dosing `x`.
    fn continuation(&self, x: f64, replicate: usize, base: &Policy) -> Result<f64> {
        let cfg = *self.cfg();
        let n = cfg.n;
        let mut rng = stream(self.seed, &[replicate as u64]);
        let node = PosteriorGrid::node_for(&self.node_cdf, rng.gen());
        let geom = self.sim_posterior.geometry();
        let (a, b) = (geom.alpha[node], geom.beta[node]);
        let mut post = self.sim_posterior.clone();
        let mut hist = self.history.clone();
        let toxic = rng.gen::<f64>() < logistic(a + b * x);
        post.update(x, toxic)?;
        hist.push(x, toxic)?;
        let mut cost = 0.0;
        while hist.len() < n {
            let ctx = DoseContext { history: &hist, posterior: &post, settings: &self.settings, stream: self.seed };
            let xi = match base.decide(&ctx)? {
                Decision::Dose(d) => d,
                Decision::Stop { declared_mtd, .. } => {
                    if self.include_terminal {
                        let mean = post.eta_mean();
                        cost += post.eta_variance() + (declared_mtd - mean) * (declared_mtd - mean);
                    }
                    return Ok(cost);
                }
            };
            cost += post.expected_loss(xi, &self.spec);
            if hist.len() + 1 == n {
                if self.include_terminal {
                    cost += post.preposterior_eta_variance(xi);
                }
                break;
            }
            let toxic = rng.gen::<f64>() < logistic(a + b * xi);
            post.update(xi, toxic)?;
            hist.push(xi, toxic)?;
        }
        Ok(cost)
    }

    fn cost(&self, x: f64, base: &Policy) -> Result<(Estimate, Vec<f64>)> {
        let now = self.immediate(x);
        if self.history.len() + 1 == self.cfg().n {
            return Ok((Estimate { mean: now, se: 0.0 }, vec![now]));
        }
        let samples = (0..self.replicates)
            .map(|r| self.continuation(x, r, base).map(|c| now + c))
            .collect::<Result<Vec<_>>>()?;
        Ok((Estimate::from_samples(&samples), samples))
    }
}

/// Estimated `h_{k-1}(x) + E[sum of future losses under base | data, x]`.
pub fn cost_to_go(ctx: &DoseContext, x: f64, base: &Policy, rc: &RolloutConfig) -> Result<Estimate> {
    Ok(RolloutState::new(ctx, rc)?.cost(x, base)?.0)
}

/// Cost-to-go of every candidate dose, using common random numbers.
pub fn cost_curve(ctx: &DoseContext, base: &Policy, rc: &RolloutConfig) -> Result<Vec<(f64, Estimate)>> {
    let state = RolloutState::new(ctx, rc)?;
    ctx.settings
        .dose_grid
        .subgrid(rc.candidates)
        .doses()
        .iter()
        .map(|&x| state.cost(x, base).map(|(e, _)| (x, e)))
        .collect()
}

/// Candidate dose with the smallest estimated cost-to-go; ties go to the lower dose.
pub fn rollout_dose(ctx: &DoseContext, base: &Policy, rc: &RolloutConfig) -> Result<f64> {
    let curve = cost_curve(ctx, base, rc)?;
    let mut best = curve[0];
    for &(x, e) in &curve[1..] {
        if e.mean < best.1.mean {
            best = (x, e);
        }
    }
    Ok(best.0)
}

/// `(x_roll - m) / (l - m)` when the myopic and learning doses differ by more
/// than one grid step; zero otherwise.
pub fn perturbation_fraction(x_roll: f64, m: f64, l: f64, step: f64) -> f64 {
    if (l - m).abs() > step + 1e-12 {
        (x_roll - m) / (l - m)
    } else {
        0.0
    }
}

/// Expected per-stage and terminal losses with their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// `E[h_{i-1}(x_i)]` for `i = 1..=n`.
    pub stage: Vec<Estimate>,
    pub terminal: Estimate,
    pub total: Estimate,
    /// Cumulative `R_k = sum_{i<=k} E[h_{i-1}(x_i)]`.
    pub cumulative: Vec<Estimate>,
}

impl CostBreakdown {
    /// Builds the breakdown from per-trial stage losses and terminal losses.
    pub fn from_trials(stage_losses: &[Vec<f64>], terminal: &[f64], n: usize) -> Self {
        let per_stage = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> { stage_losses.iter().map(|s| f(s)).collect() };
        let stage: Vec<Estimate> =
            (0..n).map(|i| Estimate::from_samples(&per_stage(&|s| s.get(i).copied().unwrap_or(0.0)))).collect();
        let cumulative: Vec<Estimate> = (0..n)
            .map(|k| Estimate::from_samples(&per_stage(&|s| s.iter().take(k + 1).sum())))
            .collect();
        let totals: Vec<f64> = stage_losses.iter().zip(terminal).map(|(s, g)| s.iter().sum::<f64>() + g).collect();
        CostBreakdown {
            stage,
            terminal: Estimate::from_samples(terminal),
            total: Estimate::from_samples(&totals),
            cumulative,
        }
    }

    /// CSV with header `k,R_k,se`.
    pub fn risk_curve_csv(&self) -> String {
        let mut out = String::from("k,R_k,se\n");
        for (k, e) in self.cumulative.iter().enumerate() {
            out.push_str(&format!("{},{:.6},{:.6}\n", k + 1, e.mean, e.se));
        }
        out
    }
}

/// Global risk of `policy` over `reps` trials with truths drawn from `truth`.
pub fn global_risk(
    policy: &Policy,
    truth: &crate::posterior::PriorSpec,
    cfg: &TrialConfig,
    reps: usize,
    seed: u64,
) -> Result<CostBreakdown> {
    let scenario = crate::simulate::Scenario::new(*cfg, truth.clone(), policy.clone(), reps, seed);
    Ok(crate::simulate::operating_characteristics(&scenario)?.breakdown)
}
