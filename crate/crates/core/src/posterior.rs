//! Grid posterior for `(rho, eta)` under the uniform product prior.
//!
//! Nodes sit at cell midpoints of `[0, q] x [x_min, x_max]`, so the
//! degenerate edges `rho = 0` and `eta = x_min` (where the logistic
//! reparametrization breaks down) are never evaluated. Each node carries an
//! equal share of prior mass; the posterior is the discrete distribution
//! proportional to likelihood times that mass.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::model::{logistic, params_from_rho_eta, psi, ModelPoint, TrialConfig};

pub const DEFAULT_RESOLUTION: Resolution = Resolution { m_rho: 101, m_eta: 201 };
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dose: f64,
    pub toxic: bool,
}

/// Doses and binary toxicity outcomes observed so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialHistory {
    pub cfg: TrialConfig,
    records: Vec<Observation>,
}

impl TrialHistory {
    pub fn new(cfg: TrialConfig) -> Self {
        TrialHistory { cfg, records: Vec::new() }
    }

    pub fn from_records(cfg: TrialConfig, records: Vec<Observation>) -> Result<Self> {
        let mut h = TrialHistory::new(cfg);
        for r in records {
            h.push(r.dose, r.toxic)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, dose: f64, toxic: bool) -> Result<()> {
        let tol = 1e-9 * self.cfg.range();
        if !(dose >= self.cfg.x_min - tol && dose <= self.cfg.x_max + tol) {
            return Err(DoseError::DoseOutOfRange { dose, lo: self.cfg.x_min, hi: self.cfg.x_max });
        }
        self.records.push(Observation { dose: self.cfg.clamp_dose(dose), toxic });
        Ok(())
    }

    /// A new history with one more record.
    pub fn appended(&self, dose: f64, toxic: bool) -> Result<Self> {
        let mut h = self.clone();
        h.push(dose, toxic)?;
        Ok(h)
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn prefix(&self, k: usize) -> TrialHistory {
        TrialHistory { cfg: self.cfg, records: self.records[..k.min(self.records.len())].to_vec() }
    }

    pub fn toxicities(&self) -> usize {
        self.records.iter().filter(|r| r.toxic).count()
    }
}

/// Where simulated truths come from. Posterior grids always use the nominal
/// uniform density `1 / (q (x_max - x_min))` on `[0, q] x [x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PriorSpec {
    #[default]
    UniformProduct,
    /// Point mass at a given truth.
    Fixed { rho: f64, eta: f64 },
    /// `eta` fixed, `rho` uniform on `[0, q]`.
    FixedEta { eta: f64 },
}

impl PriorSpec {
    pub fn sample<R: Rng + ?Sized>(&self, cfg: &TrialConfig, rng: &mut R) -> ModelPoint {
        // Two uniforms are always consumed so truth streams line up across specs.
        let u_rho: f64 = rng.gen();
        let u_eta: f64 = rng.gen();
        match *self {
            PriorSpec::UniformProduct => ModelPoint::new(u_rho * cfg.q, cfg.from_unit(u_eta)),
            PriorSpec::Fixed { rho, eta } => ModelPoint::new(rho, eta),
            PriorSpec::FixedEta { eta } => ModelPoint::new(u_rho * cfg.q, eta),
        }
    }

    pub fn density(&self, cfg: &TrialConfig, point: &ModelPoint) -> f64 {
        let inside = point.rho >= 0.0
            && point.rho <= cfg.q
            && point.eta >= cfg.x_min
            && point.eta <= cfg.x_max;
        if inside {
            1.0 / (cfg.q * cfg.range())
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub m_rho: usize,
    pub m_eta: usize,
}

impl Resolution {
    pub fn new(m_rho: usize, m_eta: usize) -> Self {
        Resolution { m_rho, m_eta }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        DEFAULT_RESOLUTION
    }
}

/// Node coordinates and the linear predictor coefficients at every node.
/// Shared between all posteriors built on the same grid.
#[derive(Debug)]
pub struct GridGeometry {
    pub cfg: TrialConfig,
    pub rho: Vec<f64>,
    pub eta: Vec<f64>,
    /// Lower and upper edge of the eta axis used by the interpolated CDF.
    eta_lo: f64,
    eta_hi: f64,
    /// Node `j * m_rho + i` has intercept `alpha[idx]` and slope `beta[idx]`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Optional precomputed `F(dose)` rows for a fixed set of doses.
    table: Option<ToxicityTable>,
}

#[derive(Debug)]
struct ToxicityTable {
    doses: Vec<f64>,
    /// Row `d` holds `F(doses[d])` at every node.
    prob: Vec<f64>,
}

impl GridGeometry {
    pub fn midpoint(cfg: &TrialConfig, res: Resolution) -> Result<Arc<Self>> {
        let rho = (0..res.m_rho).map(|i| (i as f64 + 0.5) * cfg.q / res.m_rho as f64).collect();
        let eta = (0..res.m_eta)
            .map(|j| cfg.from_unit((j as f64 + 0.5) / res.m_eta as f64))
            .collect();
        Self::from_axes(cfg, rho, eta)
    }

    /// Arbitrary sorted node axes.
    pub fn from_axes(cfg: &TrialConfig, rho: Vec<f64>, eta: Vec<f64>) -> Result<Arc<Self>> {
        if rho.is_empty() || eta.is_empty() {
            return Err(DoseError::ResolutionTooSmall { m_rho: rho.len(), m_eta: eta.len() });
        }
        let mut alpha = Vec::with_capacity(rho.len() * eta.len());
        let mut beta = Vec::with_capacity(rho.len() * eta.len());
        for &e in &eta {
            for &r in &rho {
                let (a, b) = params_from_rho_eta(r, e, cfg)?;
                alpha.push(a);
                beta.push(b);
            }
        }
        let (eta_lo, eta_hi) = if eta.len() == 1 {
            (cfg.x_min, cfg.x_max)
        } else {
            let m = eta.len();
            (
                (eta[0] - 0.5 * (eta[1] - eta[0])).max(cfg.x_min),
                (eta[m - 1] + 0.5 * (eta[m - 1] - eta[m - 2])).min(cfg.x_max),
            )
        };
        Ok(Arc::new(GridGeometry { cfg: *cfg, rho, eta, eta_lo, eta_hi, alpha, beta, table: None }))
    }

    /// Copy of the geometry that caches `F(x)` at every node for the given
    /// sorted doses, so updates at those doses skip the logistic evaluation.
    pub fn with_toxicity_table(&self, doses: &[f64]) -> Arc<Self> {
        let mut prob = Vec::with_capacity(doses.len() * self.len());
        for &x in doses {
            prob.extend(self.alpha.iter().zip(&self.beta).map(|(&a, &b)| logistic(a + b * x)));
        }
        Arc::new(GridGeometry {
            cfg: self.cfg,
            rho: self.rho.clone(),
            eta: self.eta.clone(),
            eta_lo: self.eta_lo,
            eta_hi: self.eta_hi,
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            table: Some(ToxicityTable { doses: doses.to_vec(), prob }),
        })
    }

    fn table_row(&self, dose: f64) -> Option<&[f64]> {
        let t = self.table.as_ref()?;
        let i = t.doses.partition_point(|&d| d < dose - 1e-12);
        if i < t.doses.len() && (t.doses[i] - dose).abs() <= 1e-12 {
            let n = self.len();
            Some(&t.prob[i * n..(i + 1) * n])
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn m_rho(&self) -> usize {
        self.rho.len()
    }

    pub fn m_eta(&self) -> usize {
        self.eta.len()
    }

    pub fn node(&self, idx: usize) -> ModelPoint {
        ModelPoint::new(self.rho[idx % self.m_rho()], self.eta[idx / self.m_rho()])
    }
}

thread_local! {
    static LIK_SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Log-likelihood of one observation at linear predictor `z`.
#[inline]
fn log_lik(z: f64, toxic: bool) -> f64 {
    // log sigma(z) = -softplus(-z)
    let t = if toxic { -z } else { z };
    -(t.max(0.0) + (-t.abs()).exp().ln_1p())
}

/// Normalized discrete posterior on a fixed grid.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    geom: Arc<GridGeometry>,
    weights: Vec<f64>,
    eta_mass: Vec<f64>,
    /// `log C`: log marginal likelihood of the data under the prior.
    log_norm: f64,
}

/// Posterior after `history` on a midpoint grid of the given resolution.
pub fn posterior_from_history(
    history: &TrialHistory,
    _prior: &PriorSpec,
    res: Resolution,
) -> Result<PosteriorGrid> {
    if res.m_rho < MIN_RESOLUTION || res.m_eta < MIN_RESOLUTION {
        return Err(DoseError::ResolutionTooSmall { m_rho: res.m_rho, m_eta: res.m_eta });
    }
    let geom = GridGeometry::midpoint(&history.cfg, res)?;
    PosteriorGrid::from_history(geom, history)
}

impl PosteriorGrid {
    pub fn prior(geom: Arc<GridGeometry>) -> Self {
        let n = geom.len();
        let w = 1.0 / n as f64;
        let mut post = PosteriorGrid { weights: vec![w; n], eta_mass: vec![0.0; geom.m_eta()], geom, log_norm: 0.0 };
        post.refresh_marginal();
        post
    }

    /// Batch construction with log-space accumulation.
    pub fn from_history(geom: Arc<GridGeometry>, history: &TrialHistory) -> Result<Self> {
        if history.is_empty() {
            return Ok(Self::prior(geom));
        }
        let recs = history.records();
        let mut logw: Vec<f64> = geom
            .alpha
            .iter()
            .zip(&geom.beta)
            .map(|(&a, &b)| recs.iter().map(|r| log_lik(a + b * r.dose, r.toxic)).sum())
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DoseError::AllZeroWeight);
        }
        let mut total = 0.0;
        for lw in logw.iter_mut() {
            *lw = (*lw - max).exp();
            total += *lw;
        }
        for w in logw.iter_mut() {
            *w /= total;
        }
        let n = geom.len() as f64;
        let log_norm = max + total.ln() - n.ln();
        let mut post = PosteriorGrid { eta_mass: vec![0.0; geom.m_eta()], weights: logw, geom, log_norm };
        post.refresh_marginal();
        Ok(post)
    }

    /// Custom node axes with equal prior mass per node; used for small exact instances.
    pub fn from_axes(cfg: &TrialConfig, rho: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        Ok(Self::prior(GridGeometry::from_axes(cfg, rho, eta)?))
    }

    fn refresh_marginal(&mut self) {
        let m = self.geom.m_rho();
        for (mass, col) in self.eta_mass.iter_mut().zip(self.weights.chunks_exact(m)) {
            *mass = col.iter().sum();
        }
    }

    /// Condition on one more observation in place.
    pub fn update(&mut self, dose: f64, toxic: bool) -> Result<()> {
        LIK_SCRATCH.with(|cell| {
            let mut lik = cell.borrow_mut();
            lik.clear();
            let mut total = 0.0;
            if let Some(row) = self.geom.table_row(dose) {
                for (w, &f) in self.weights.iter().zip(row) {
                    let l = if toxic { f } else { 1.0 - f };
                    total += w * l;
                    lik.push(l);
                }
            } else {
                for ((w, &a), &b) in self.weights.iter().zip(&self.geom.alpha).zip(&self.geom.beta) {
                    let f = logistic(a + b * dose);
                    let l = if toxic { f } else { 1.0 - f };
                    total += w * l;
                    lik.push(l);
                }
            }
            if !(total > 1e-280) {
                return self.update_log_space(dose, toxic);
            }
            let inv = 1.0 / total;
            let m = self.geom.m_rho();
            for ((mass, col), lcol) in
                self.eta_mass.iter_mut().zip(self.weights.chunks_exact_mut(m)).zip(lik.chunks_exact(m))
            {
                let mut s = 0.0;
                for (w, l) in col.iter_mut().zip(lcol) {
                    *w *= l * inv;
                    s += *w;
                }
                *mass = s;
            }
            self.log_norm += total.ln();
            Ok(())
        })
    }

    // Used when the linear-space product underflows everywhere.
    fn update_log_space(&mut self, dose: f64, toxic: bool) -> Result<()> {
        let logw: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.geom.alpha)
            .zip(&self.geom.beta)
            .map(|((w, &a), &b)| w.ln() + log_lik(a + b * dose, toxic))
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DoseError::AllZeroWeight);
        }
        let mut total = 0.0;
        for (w, lw) in self.weights.iter_mut().zip(&logw) {
            *w = (lw - max).exp();
            total += *w;
        }
        for w in self.weights.iter_mut() {
            *w /= total;
        }
        self.log_norm += max + total.ln();
        self.refresh_marginal();
        Ok(())
    }

    pub fn updated(&self, dose: f64, toxic: bool) -> Result<Self> {
        let mut p = self.clone();
        p.update(dose, toxic)?;
        Ok(p)
    }

    pub fn geometry(&self) -> &Arc<GridGeometry> {
        &self.geom
    }

    pub fn cfg(&self) -> &TrialConfig {
        &self.geom.cfg
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eta_nodes(&self) -> &[f64] {
        &self.geom.eta
    }

    /// Posterior mass at each eta node (the discretized marginal).
    pub fn eta_mass(&self) -> &[f64] {
        &self.eta_mass
    }

    /// `log C`, the log marginal likelihood of the observed data.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn eta_mean(&self) -> f64 {
        self.eta_mass.iter().zip(&self.geom.eta).map(|(w, e)| w * e).sum()
    }

    pub fn eta_variance(&self) -> f64 {
        let mean = self.eta_mean();
        let v: f64 = self.eta_mass.iter().zip(&self.geom.eta).map(|(w, e)| w * (e - mean) * (e - mean)).sum();
        v.max(0.0)
    }

    pub fn eta_sd(&self) -> f64 {
        self.eta_variance().sqrt()
    }

    /// Standard deviation of `eta` under the grid prior (equal mass per node).
    pub fn prior_eta_sd(&self) -> f64 {
        let eta = &self.geom.eta;
        let m = eta.len() as f64;
        let mean = eta.iter().sum::<f64>() / m;
        (eta.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / m).sqrt()
    }

    pub fn rho_mean(&self) -> f64 {
        let m = self.geom.m_rho();
        self.weights.iter().enumerate().map(|(idx, w)| w * self.geom.rho[idx % m]).sum()
    }

    /// Knots `(eta, cdf)` of the piecewise-linear CDF: zero at the lower edge,
    /// mid-cumulative mass at each node, one at the upper edge.
    fn cdf_knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mut cum = 0.0;
        let inner = self.geom.eta.iter().zip(&self.eta_mass).map(move |(&e, &w)| {
            let mid = cum + 0.5 * w;
            cum += w;
            (e, mid)
        });
        std::iter::once((self.geom.eta_lo, 0.0))
            .chain(inner)
            .chain(std::iter::once((self.geom.eta_hi, 1.0)))
    }

    /// `P(eta <= x)` from the interpolated CDF.
    pub fn eta_cdf(&self, x: f64) -> f64 {
        let mut prev: Option<(f64, f64)> = None;
        for (e, c) in self.cdf_knots() {
            if x < e {
                return match prev {
                    None => 0.0,
                    Some((e0, c0)) => c0 + (c - c0) * (x - e0) / (e - e0),
                };
            }
            prev = Some((e, c));
        }
        1.0
    }

    /// Inverse of the interpolated CDF; flat stretches resolve to the lowest dose.
    pub fn eta_quantile(&self, w: f64) -> f64 {
        let w = w.clamp(0.0, 1.0);
        let mut prev: Option<(f64, f64)> = None;
        for (e, c) in self.cdf_knots() {
            if c >= w {
                return match prev {
                    Some((e0, c0)) if c > c0 => e0 + (e - e0) * (w - c0) / (c - c0),
                    Some((e0, _)) => e0,
                    None => e,
                };
            }
            prev = Some((e, c));
        }
        self.geom.eta_hi
    }

    /// `E[h(x, eta) | data]` under the discrete marginal.
    pub fn expected_loss(&self, x: f64, spec: &crate::model::LossSpec) -> f64 {
        self.eta_mass
            .iter()
            .zip(&self.geom.eta)
            .map(|(w, &e)| w * crate::model::loss_h(x, e, spec))
            .sum()
    }

    /// Predictive toxicity probability at `dose`.
    pub fn predictive_toxicity(&self, dose: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.geom.alpha)
            .zip(&self.geom.beta)
            .map(|((w, a), b)| w * logistic(a + b * dose))
            .sum()
    }

    /// `E[Var(eta | data, y)]` over the predictive distribution of a response at `dose`.
    pub fn preposterior_eta_variance(&self, dose: f64) -> f64 {
        let m = self.geom.m_rho();
        let (mut a1, mut m1, mut m_all, mut s_all) = (0.0, 0.0, 0.0, 0.0);
        let row = self.geom.table_row(dose);
        for (j, (col, &e)) in self.weights.chunks_exact(m).zip(&self.geom.eta).enumerate() {
            let mut c = 0.0;
            let mut tot = 0.0;
            for (i, w) in col.iter().enumerate() {
                let idx = j * m + i;
                let f = match row {
                    Some(r) => r[idx],
                    None => logistic(self.geom.alpha[idx] + self.geom.beta[idx] * dose),
                };
                c += w * f;
                tot += w;
            }
            a1 += c;
            m1 += c * e;
            m_all += tot * e;
            s_all += tot * e * e;
        }
        let a0 = 1.0 - a1;
        let m0 = m_all - m1;
        let mut v = s_all;
        if a1 > 0.0 {
            v -= m1 * m1 / a1;
        }
        if a0 > 0.0 {
            v -= m0 * m0 / a0;
        }
        v.max(0.0)
    }

    /// `(eta, density)` pairs of the eta marginal on the grid's dose axis.
    pub fn eta_density(&self) -> Vec<(f64, f64)> {
        let eta = &self.geom.eta;
        let m = eta.len();
        (0..m)
            .map(|j| {
                let lo = if j == 0 { self.geom.eta_lo } else { 0.5 * (eta[j - 1] + eta[j]) };
                let hi = if j + 1 == m { self.geom.eta_hi } else { 0.5 * (eta[j] + eta[j + 1]) };
                (eta[j], self.eta_mass[j] / (hi - lo))
            })
            .collect()
    }

    /// CSV with header `eta_node,density`.
    pub fn eta_density_csv(&self) -> String {
        let mut out = String::from("eta_node,density\n");
        for (e, d) in self.eta_density() {
            out.push_str(&format!("{e:.6},{d:.6}\n"));
        }
        out
    }

    /// Cumulative node masses for categorical sampling.
    pub fn node_cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }

    /// Node index for a uniform draw `u` against `node_cdf`.
    pub fn node_for(cdf: &[f64], u: f64) -> usize {
        let target = u * cdf.last().copied().unwrap_or(1.0);
        cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
    }
}

/// Unnormalized log-likelihood of the history at a continuous parameter point.
pub fn log_likelihood(history: &TrialHistory, point: &ModelPoint) -> Result<f64> {
    let cfg = &history.cfg;
    history
        .records()
        .iter()
        .map(|r| psi(r.dose, point.rho, point.eta, cfg).map(|z| log_lik(z, r.toxic)))
        .sum()
}

/// Independent draws from the continuous posterior by rejection from the
/// uniform prior rectangle. The envelope is the grid maximum of the
/// likelihood with a safety margin, raised on the fly if a proposal exceeds it.
pub fn rejection_sample<R: Rng + ?Sized>(
    history: &TrialHistory,
    post: &PosteriorGrid,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ModelPoint>> {
    let cfg = history.cfg;
    let recs = history.records();
    let geom = post.geometry();
    let mut log_env = geom
        .alpha
        .iter()
        .zip(&geom.beta)
        .map(|(&a, &b)| recs.iter().map(|r| log_lik(a + b * r.dose, r.toxic)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
        + 0.25f64.ln_1p();
    if !log_env.is_finite() {
        return Err(DoseError::AllZeroWeight);
    }
    let mut out = Vec::with_capacity(count);
    let mut proposals: u64 = 0;
    while out.len() < count {
        proposals += 1;
        let u_rho: f64 = rng.gen();
        let u_eta: f64 = rng.gen();
        let point = ModelPoint::new(u_rho * cfg.q, cfg.from_unit(u_eta));
        let ll = if point.eta - cfg.x_min <= 0.0 { f64::NEG_INFINITY } else { log_likelihood(history, &point)? };
        if ll > log_env {
            log_env = ll;
        }
        let accept: f64 = rng.gen();
        if accept.ln() < ll - log_env {
            out.push(point);
        }
        if proposals >= 100_000 && (out.len() as f64) < 1e-4 * proposals as f64 {
            return Err(DoseError::EnvelopeFailure { rate: out.len() as f64 / proposals as f64 });
        }
    }
    Ok(out)
}
