//! Hybrid designs `(1 - eps) m_k + eps l_k` between a myopic dose `m_k` and a
//! learning dose `l_k`, with `eps` a truncated linear function of the
//! posterior spread `s = nu_{k-1} / nu_0` fitted to rollout decisions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::policies::{myopic_dose, Decision, DoseContext, Myopic, Policy};
use crate::rng::derive;
use crate::rollout::{perturbation_fraction, rollout_dose, RolloutConfig};
use crate::simulate::{operating_characteristics, run_trial_with, Scenario, SimReport};

/// Records with `|e|` above this are dropped before fitting.
pub const OUTLIER_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    /// Truncated linear function for every `s`.
    #[default]
    Clamped,
    /// Linear to zero below the sample range, constant above it.
    Extended,
}

/// Coefficients for the stages `first..=last` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBlock {
    pub first: usize,
    pub last: usize,
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridCoefficients {
    pub blocks: Vec<CoefficientBlock>,
    /// Smallest and largest `s` in the fitting sample.
    pub s_lo: f64,
    pub s_hi: f64,
    pub mode: EpsilonMode,
}

impl HybridCoefficients {
    /// One block covering stages `1..=n`.
    pub fn single(beta0: f64, beta1: f64, n: usize) -> Self {
        HybridCoefficients {
            blocks: vec![CoefficientBlock { first: 1, last: n.max(1), beta0, beta1 }],
            s_lo: 0.0,
            s_hi: 1.0,
            mode: EpsilonMode::Clamped,
        }
    }

    pub fn block_index(&self, stage: usize) -> usize {
        self.blocks
            .iter()
            .position(|b| stage >= b.first && stage <= b.last)
            .unwrap_or(if stage < self.blocks[0].first { 0 } else { self.blocks.len() - 1 })
    }

    fn truncated(&self, block: usize, s: f64) -> f64 {
        let b = &self.blocks[block];
        (b.beta0 + b.beta1 * s).max(0.0).min(1.0)
    }

    /// Largest `eps` used above the sample range in extended mode.
    pub fn cap(&self, block: usize) -> f64 {
        self.truncated(block, self.s_hi)
    }

    pub fn epsilon_in_block(&self, block: usize, s: f64) -> f64 {
        epsilon_in_block(self, block, s, self.mode)
    }

    /// `(stage, block)` pairs are validated to partition `1..=n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut next = 1;
        for b in &self.blocks {
            if b.first != next || b.last < b.first || !b.beta0.is_finite() || !b.beta1.is_finite() {
                return Err(DoseError::InvalidPolicy("hybrid blocks must partition the stages 1..=n".into()));
            }
            next = b.last + 1;
        }
        if self.blocks.is_empty() || next != n + 1 {
            return Err(DoseError::InvalidPolicy("hybrid blocks must partition the stages 1..=n".into()));
        }
        Ok(())
    }
}

fn epsilon_in_block(coeffs: &HybridCoefficients, block: usize, s: f64, mode: EpsilonMode) -> f64 {
    let s = s.max(0.0);
    match mode {
        EpsilonMode::Clamped => coeffs.truncated(block, s),
        EpsilonMode::Extended => {
            if s < coeffs.s_lo {
                s * coeffs.truncated(block, coeffs.s_lo) / coeffs.s_lo
            } else if s > coeffs.s_hi {
                coeffs.cap(block)
            } else {
                coeffs.truncated(block, s)
            }
        }
    }
}

/// `eps_k` at posterior spread `s` for stage `k`.
pub fn epsilon_of(s: f64, coeffs: &HybridCoefficients, stage: usize, mode: EpsilonMode) -> f64 {
    epsilon_in_block(coeffs, coeffs.block_index(stage), s, mode)
}

/// Ratio of the current posterior sd of `eta` to its prior sd.
pub fn spread_ratio(ctx: &DoseContext) -> f64 {
    ctx.posterior.eta_sd() / ctx.posterior.prior_eta_sd()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridParts {
    pub dose: f64,
    pub myopic: f64,
    /// Not computed when `eps = 0` unless requested.
    pub learning: Option<f64>,
    pub epsilon: f64,
    pub s: f64,
}

fn learning_dose(ctx: &DoseContext, learning: &Policy, fallback: f64) -> Result<f64> {
    Ok(match learning.decide(ctx)? {
        Decision::Dose(x) => x,
        Decision::Stop { .. } => fallback,
    })
}

pub fn hybrid_components(
    ctx: &DoseContext,
    coeffs: &HybridCoefficients,
    learning: &Policy,
    myopic: Myopic,
    always_learning: bool,
) -> Result<HybridParts> {
    let cfg = *ctx.cfg();
    let m = myopic_dose(ctx.posterior, &myopic.loss(&cfg), &ctx.settings.dose_grid);
    let s = spread_ratio(ctx);
    let epsilon = epsilon_of(s, coeffs, ctx.stage(), coeffs.mode);
    let learning = if epsilon > 0.0 || always_learning { Some(learning_dose(ctx, learning, m)?) } else { None };
    let dose = match learning {
        Some(l) => cfg.clamp_dose((1.0 - epsilon) * m + epsilon * l),
        None => m,
    };
    Ok(HybridParts { dose, myopic: m, learning, epsilon, s })
}

pub fn hybrid_dose(ctx: &DoseContext, coeffs: &HybridCoefficients, learning: &Policy, myopic: Myopic) -> Result<f64> {
    Ok(hybrid_components(ctx, coeffs, learning, myopic, false)?.dose)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub stage: usize,
    pub s: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutSample {
    pub records: Vec<SampleRecord>,
}

/// Simulates `scenario.n_reps` trials dosed by the rollout of `base` and
/// records `(k, s_k, e_k)` at every stage. Stage-one components are computed
/// even when the protocol fixes the first dose.
pub fn collect_rollout_sample(
    base: &Policy,
    learning: &Policy,
    myopic: Myopic,
    scenario: &Scenario,
    rc: &RolloutConfig,
) -> Result<RolloutSample> {
    scenario.validate()?;
    let cfg = scenario.cfg;
    let step = scenario.settings.dose_grid.step();
    let per_trial: Vec<Vec<SampleRecord>> = (0..scenario.n_reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<SampleRecord>> {
            let mut records = Vec::with_capacity(cfg.n);
            let mut hook = |ctx: &DoseContext| -> Result<Option<Decision>> {
                let m = myopic_dose(ctx.posterior, &myopic.loss(&cfg), &ctx.settings.dose_grid);
                let l = learning_dose(ctx, learning, m)?;
                let x = rollout_dose(ctx, base, rc)?;
                records.push(SampleRecord { stage: ctx.stage(), s: spread_ratio(ctx), e: perturbation_fraction(x, m, l, step) });
                let forced = ctx.history.is_empty() && ctx.settings.start_at_x_min;
                Ok(Some(Decision::Dose(if forced { cfg.x_min } else { x })))
            };
            run_trial_with(scenario, rep, &mut hook)?;
            Ok(records)
        })
        .collect::<Result<_>>()?;
    Ok(RolloutSample { records: per_trial.into_iter().flatten().collect() })
}

/// Least-squares fit of `e = beta0 + beta1 s` in `blocks` equal stage blocks.
pub fn fit_epsilon(sample: &RolloutSample, blocks: usize, n: usize, mode: EpsilonMode) -> Result<HybridCoefficients> {
    let blocks = blocks.clamp(1, n.max(1));
    let kept: Vec<&SampleRecord> = sample.records.iter().filter(|r| r.e.is_finite() && r.e.abs() <= OUTLIER_LIMIT).collect();
    let mut out = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let first = b * n / blocks + 1;
        let last = (b + 1) * n / blocks;
        let rows: Vec<&&SampleRecord> = kept.iter().filter(|r| r.stage >= first && r.stage <= last).collect();
        let m = rows.len() as f64;
        let sbar = rows.iter().map(|r| r.s).sum::<f64>() / m;
        let ebar = rows.iter().map(|r| r.e).sum::<f64>() / m;
        let sxx: f64 = rows.iter().map(|r| (r.s - sbar) * (r.s - sbar)).sum();
        let sxy: f64 = rows.iter().map(|r| (r.s - sbar) * (r.e - ebar)).sum();
        let distinct = rows.iter().any(|r| (r.s - rows[0].s).abs() > 1e-12 * (1.0 + sbar.abs()));
        if rows.len() < 2 || !distinct || !(sxx > 0.0) {
            return Err(DoseError::UnderdeterminedFit { block: b + 1 });
        }
        let beta1 = sxy / sxx;
        out.push(CoefficientBlock { first, last, beta0: ebar - beta1 * sbar, beta1 });
    }
    let s_lo = kept.iter().map(|r| r.s).fold(f64::INFINITY, f64::min);
    let s_hi = kept.iter().map(|r| r.s).fold(f64::NEG_INFINITY, f64::max);
    Ok(HybridCoefficients { blocks: out, s_lo, s_hi, mode })
}

/// Settings for the rollout-and-fit cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    pub learning: Policy,
    pub myopic: Myopic,
    pub rollout: RolloutConfig,
    /// Trials simulated to collect each fitting sample.
    pub sample_trials: usize,
    pub blocks: usize,
    pub mode: EpsilonMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub coefficients: HybridCoefficients,
    pub sample_size: usize,
    /// Operating characteristics of the fitted hybrid on the evaluation scenario.
    pub report: SimReport,
}

/// Iteration 1 rolls out `base`; iteration `j + 1` rolls out the hybrid
/// fitted in iteration `j`. Each hybrid is evaluated on `eval`, whose seed is
/// shared across iterations.
pub fn iterate(base: &Policy, plan: &IterationPlan, iterations: usize, eval: &Scenario) -> Result<Vec<IterationResult>> {
    if iterations < 1 {
        return Err(DoseError::InvalidConfig(vec!["iterations must be at least 1".into()]));
    }
    let n = eval.cfg.n;
    let mut current = base.clone();
    let mut out = Vec::with_capacity(iterations);
    for j in 0..iterations {
        let sampling = Scenario {
            n_reps: plan.sample_trials.max(2),
            seed: derive(eval.seed, &[0x5a5a, j as u64]),
            truth: crate::posterior::PriorSpec::UniformProduct,
            ..eval.clone()
        };
        let rc = RolloutConfig { seed: derive(plan.rollout.seed, &[j as u64]), ..plan.rollout.clone() };
        let sample = collect_rollout_sample(&current, &plan.learning, plan.myopic, &sampling, &rc)?;
        let coefficients = fit_epsilon(&sample, plan.blocks, n, plan.mode)?;
        let hybrid = Policy::Hybrid { coeffs: coefficients.clone(), learning: Box::new(plan.learning.clone()), myopic: plan.myopic };
        let mut report = operating_characteristics(&eval.with_policy(hybrid.clone()))?;
        report.design = format!("Hybrid{}", j + 1);
        out.push(IterationResult { coefficients, sample_size: sample.records.len(), report });
        current = hybrid;
    }
    Ok(out)
}

/// CSV lookup table with header `block,s,epsilon`.
pub fn export_lookup_table(coeffs: &HybridCoefficients, s_values: &[f64]) -> String {
    let mut out = String::from("block,s,epsilon\n");
    for block in 0..coeffs.blocks.len() {
        for &s in s_values {
            out.push_str(&format!("{},{:.6},{:.6}\n", block + 1, s, coeffs.epsilon_in_block(block, s)));
        }
    }
    out
}

/// `count` equally spaced values on `[0, hi]`.
pub fn s_grid(hi: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count).map(|i| hi * i as f64 / (count - 1) as f64).collect()
}

/// A parsed lookup table; `epsilon` interpolates linearly between rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    /// Per block, rows sorted by `s`.
    pub blocks: Vec<Vec<(f64, f64)>>,
}

impl LookupTable {
    pub fn parse(csv: &str) -> Result<Self> {
        let mut blocks: Vec<Vec<(f64, f64)>> = Vec::new();
        let mut lines = csv.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(h) if h.trim() == "block,s,epsilon" => {}
            other => return Err(DoseError::Parse(format!("expected header block,s,epsilon, got {other:?}"))),
        }
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || DoseError::Parse(format!("line {}: {line:?}", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            let block: usize = f[0].parse().map_err(|_| bad())?;
            let s: f64 = f[1].parse().map_err(|_| bad())?;
            let e: f64 = f[2].parse().map_err(|_| bad())?;
            if block == 0 || !(0.0..=1.0).contains(&e) {
                return Err(bad());
            }
            if blocks.len() < block {
                blocks.resize(block, Vec::new());
            }
            blocks[block - 1].push((s, e));
        }
        if blocks.iter().any(Vec::is_empty) || blocks.is_empty() {
            return Err(DoseError::Parse("lookup table has an empty block".into()));
        }
        for b in &mut blocks {
            b.sort_by(|a, c| a.0.total_cmp(&c.0));
        }
        Ok(LookupTable { blocks })
    }

    /// `block` is 1-based.
    pub fn epsilon(&self, block: usize, s: f64) -> f64 {
        let rows = &self.blocks[block.clamp(1, self.blocks.len()) - 1];
        let i = rows.partition_point(|r| r.0 < s);
        if i == 0 {
            return rows[0].1;
        }
        if i == rows.len() {
            return rows[rows.len() - 1].1;
        }
        let (s0, e0) = rows[i - 1];
        let (s1, e1) = rows[i];
        if s1 == s0 {
            e1
        } else {
            e0 + (e1 - e0) * (s - s0) / (s1 - s0)
        }
    }
}
