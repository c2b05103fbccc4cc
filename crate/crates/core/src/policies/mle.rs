//! Likelihood-based comparator rules.

use super::{myopic_dose, DoseGrid};
use crate::model::{logistic, mtd_from_params, params_from_rho_eta, LossSpec};
use crate::posterior::{PosteriorGrid, TrialHistory};

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;
/// Coefficient magnitude treated as divergence to infinity.
const DIVERGENCE: f64 = 1e6;

/// Whether the logistic MLE exists: both outcomes present and not completely
/// separated by dose.
pub fn mle_exists(history: &TrialHistory) -> bool {
    let (mut lo0, mut hi0, mut lo1, mut hi1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in history.records() {
        if r.toxic {
            lo1 = lo1.min(r.dose);
            hi1 = hi1.max(r.dose);
        } else {
            lo0 = lo0.min(r.dose);
            hi0 = hi0.max(r.dose);
        }
    }
    hi0 > lo1 && hi1 > lo0
}

fn log_likelihood(history: &TrialHistory, a: f64, b: f64) -> f64 {
    history
        .records()
        .iter()
        .map(|r| {
            let z = a + b * r.dose;
            let t = if r.toxic { -z } else { z };
            -(t.max(0.0) + (-t.abs()).exp().ln_1p())
        })
        .sum()
}

/// Maximum-likelihood `(alpha, beta)` by damped Newton–Raphson, or `None`
/// when the estimate does not exist.
pub fn logistic_mle(history: &TrialHistory) -> Option<(f64, f64)> {
    if !mle_exists(history) {
        return None;
    }
    let n = history.len() as f64;
    let ybar = history.toxicities() as f64 / n;
    let (mut a, mut b) = ((ybar / (1.0 - ybar)).ln(), 0.0);
    let mut ll = log_likelihood(history, a, b);
    for _ in 0..NEWTON_MAX_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in history.records() {
            let f = logistic(a + b * r.dose);
            let e = r.toxic as u8 as f64 - f;
            let w = f * (1.0 - f);
            g0 += e;
            g1 += e * r.dose;
            h00 += w;
            h01 += w * r.dose;
            h11 += w * r.dose * r.dose;
        }
        let det = h00 * h11 - h01 * h01;
        if det <= 0.0 || !det.is_finite() {
            return None;
        }
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        let mut t = 1.0;
        let (mut na, mut nb, mut nll);
        loop {
            na = a + t * da;
            nb = b + t * db;
            nll = log_likelihood(history, na, nb);
            if nll >= ll - 1e-12 || t < 1e-8 {
                break;
            }
            t *= 0.5;
        }
        let step = (na - a).abs().max((nb - b).abs());
        a = na;
        b = nb;
        ll = nll;
        if a.abs() > DIVERGENCE || b.abs() > DIVERGENCE {
            return None;
        }
        if step < NEWTON_TOL * (1.0 + a.abs().max(b.abs())) {
            return Some((a, b));
        }
    }
    Some((a, b))
}

/// Plug-in MTD of the current MLE; the EWOC dose while the MLE is unavailable
/// or has a non-positive slope.
pub fn wu_dose(history: &TrialHistory, post: &PosteriorGrid, grid: &DoseGrid) -> f64 {
    let cfg = &history.cfg;
    match logistic_mle(history) {
        Some((a, b)) if b > 0.0 => match mtd_from_params(a, b, cfg) {
            Ok(x) => cfg.clamp_dose(x),
            Err(_) => myopic_dose(post, &LossSpec::ewoc(cfg.omega), grid),
        },
        _ => myopic_dose(post, &LossSpec::ewoc(cfg.omega), grid),
    }
}

/// Slope of the prior-mean curve, `beta(q/2, midpoint)`.
fn prior_slope(history: &TrialHistory) -> f64 {
    let cfg = &history.cfg;
    params_from_rho_eta(0.5 * cfg.q, 0.5 * (cfg.x_min + cfg.x_max), cfg).map(|(_, b)| b).unwrap_or(1.0)
}

/// Adaptive Robbins–Monro step from the latest observation:
/// `x_{k+1} = x_k - c (y_k - p) / (k b_k)` with `b_k = beta_hat p (1-p)`.
/// The slope estimate is kept within `[0.1, 10]` times the prior-mean slope.
pub fn sa_dose(history: &TrialHistory, step: f64) -> f64 {
    let cfg = &history.cfg;
    let Some(last) = history.records().last() else {
        return cfg.x_min;
    };
    let k = history.len() as f64;
    let b0 = prior_slope(history);
    let slope = match logistic_mle(history) {
        Some((_, b)) if b > 0.0 => b.clamp(0.1 * b0, 10.0 * b0),
        _ => b0,
    };
    let bk = slope * cfg.p * (1.0 - cfg.p);
    let y = last.toxic as u8 as f64;
    cfg.clamp_dose(last.dose - step * (y - cfg.p) / (k * bk))
}
