//! Two-parameter logistic dose-toxicity model.
//!
//! The toxicity probability at dose `x` is `1 / (1 + exp(-(alpha + beta x)))`.
//! The engine works in the `(rho, eta)` coordinates, where `rho` is the
//! toxicity probability at `x_min` and `eta` is the MTD (the dose whose
//! toxicity probability equals the target `p`).
//!
//! Every function here accepts doses on whatever axis `cfg` describes. The
//! engine itself runs on the unit axis (`TrialConfig::unit`), so losses and
//! summaries are comparable across dose ranges.

use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logit.
pub const PROB_CLAMP: f64 = 1e-9;

/// `|eta - x_min|` below this (relative to the dose range) is degenerate.
pub const GEOMETRY_TOL: f64 = 1e-12;

/// `|beta|` below this makes the MTD undefined.
pub const SLOPE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Upper bound on the toxicity probability at `x_min`.
    pub q: f64,
    /// Target toxicity probability defining the MTD.
    pub p: f64,
    /// EWOC feasibility bound.
    pub omega: f64,
    /// Trial size.
    pub n: usize,
}

impl TrialConfig {
    /// Unit-range benchmark: unit dose range, `q = p = 1/3`, `omega = 1/4`, ten patients.
    pub fn unit_example() -> Self {
        TrialConfig { x_min: 0.0, x_max: 1.0, q: 1.0 / 3.0, p: 1.0 / 3.0, omega: 0.25, n: 10 }
    }

    /// The 5-FU trial: 140-425 mg/m^2, `q = 0.2`, `omega = 0.25`, 24 patients.
    pub fn five_fu() -> Self {
        TrialConfig { x_min: 140.0, x_max: 425.0, q: 0.2, p: 1.0 / 3.0, omega: 0.25, n: 24 }
    }

    /// Checks every field and reports all offending ones at once.
    ///
    /// `q == p` is accepted: the prior support `[0, q]` then touches the flat
    /// curve `rho = p` only on a set of measure zero.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            bad.push(format!("x_min ({}) must be finite and below x_max ({})", self.x_min, self.x_max));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            bad.push(format!("q ({}) must lie in (0, 1)", self.q));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            bad.push(format!("p ({}) must lie in (0, 1)", self.p));
        }
        if !(self.omega > 0.0 && self.omega < 0.5) {
            bad.push(format!("omega ({}) must lie in (0, 1/2)", self.omega));
        }
        if self.n < 1 {
            bad.push("n must be at least 1".to_string());
        }
        if self.q > self.p {
            bad.push(format!("q ({}) must not exceed p ({})", self.q, self.p));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DoseError::InvalidConfig(bad))
        }
    }

    pub fn range(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.x_min) / self.range()
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.x_min + u * self.range()
    }

    /// The same configuration on the rescaled `[0, 1]` dose axis.
    pub fn unit(&self) -> TrialConfig {
        TrialConfig { x_min: 0.0, x_max: 1.0, ..*self }
    }

    pub fn clamp_dose(&self, x: f64) -> f64 {
        x.clamp(self.x_min, self.x_max)
    }

    /// `log(1/p - 1)`.
    pub fn target_logit_neg(&self) -> f64 {
        neg_logit(self.p)
    }
}

/// `log(1/v - 1)` with `v` clamped away from 0 and 1.
pub fn neg_logit(v: f64) -> f64 {
    let v = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (-v).ln_1p() - v.ln()
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A parameter pair in `(rho, eta)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub rho: f64,
    pub eta: f64,
}

impl ModelPoint {
    pub fn new(rho: f64, eta: f64) -> Self {
        ModelPoint { rho, eta }
    }

    pub fn params(&self, cfg: &TrialConfig) -> Result<(f64, f64)> {
        params_from_rho_eta(self.rho, self.eta, cfg)
    }

    pub fn from_params(alpha: f64, beta: f64, cfg: &TrialConfig) -> Result<Self> {
        let eta = mtd_from_params(alpha, beta, cfg)?;
        let rho = logistic(alpha + beta * cfg.x_min);
        Ok(ModelPoint { rho, eta })
    }
}

fn check_geometry(eta: f64, cfg: &TrialConfig) -> Result<f64> {
    let span = eta - cfg.x_min;
    if span.abs() <= GEOMETRY_TOL * cfg.range().abs().max(1.0) {
        return Err(DoseError::DegenerateGeometry { tol: GEOMETRY_TOL });
    }
    Ok(span)
}

/// Linear predictor `alpha + beta x` expressed in `(rho, eta)`.
pub fn psi(x: f64, rho: f64, eta: f64, cfg: &TrialConfig) -> Result<f64> {
    let span = check_geometry(eta, cfg)?;
    Ok(((x - eta) * neg_logit(rho) - (x - cfg.x_min) * cfg.target_logit_neg()) / span)
}

pub fn toxicity_prob(x: f64, point: &ModelPoint, cfg: &TrialConfig) -> Result<f64> {
    Ok(logistic(psi(x, point.rho, point.eta, cfg)?))
}

/// `(alpha, beta)` from `(rho, eta)`.
pub fn params_from_rho_eta(rho: f64, eta: f64, cfg: &TrialConfig) -> Result<(f64, f64)> {
    let span = check_geometry(eta, cfg)?;
    let l_rho = neg_logit(rho);
    let l_p = cfg.target_logit_neg();
    let alpha = (cfg.x_min * l_p - eta * l_rho) / span;
    let beta = (l_rho - l_p) / span;
    Ok((alpha, beta))
}

/// Dose at which the toxicity probability equals `p`.
pub fn mtd_from_params(alpha: f64, beta: f64, cfg: &TrialConfig) -> Result<f64> {
    if beta.abs() < SLOPE_TOL {
        return Err(DoseError::ZeroSlope { beta });
    }
    Ok(((cfg.p / (1.0 - cfg.p)).ln() - alpha) / beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    /// Squared error `(x - eta)^2`.
    Crm,
    /// Asymmetric linear loss with overdose weight `1 - omega`.
    Ewoc { omega: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalLoss {
    SquaredError,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub terminal: TerminalLoss,
}

impl LossSpec {
    pub fn ewoc(omega: f64) -> Self {
        LossSpec { kind: LossKind::Ewoc { omega }, terminal: TerminalLoss::SquaredError }
    }

    pub fn crm() -> Self {
        LossSpec { kind: LossKind::Crm, terminal: TerminalLoss::SquaredError }
    }

    pub fn without_terminal(self) -> Self {
        LossSpec { terminal: TerminalLoss::None, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Ewoc { omega } if !(omega > 0.0 && omega < 0.5) => Err(DoseError::InvalidConfig(
                vec![format!("EWOC omega ({omega}) must lie in (0, 1/2)")],
            )),
            _ => Ok(()),
        }
    }
}

/// Per-patient loss.
#[inline]
pub fn loss_h(x: f64, eta: f64, spec: &LossSpec) -> f64 {
    match spec.kind {
        LossKind::Crm => (x - eta) * (x - eta),
        LossKind::Ewoc { omega } => omega * (eta - x).max(0.0) + (1.0 - omega) * (x - eta).max(0.0),
    }
}

/// Post-trial estimation loss.
#[inline]
pub fn loss_terminal(eta_hat: f64, eta: f64, spec: &LossSpec) -> f64 {
    match spec.terminal {
        TerminalLoss::SquaredError => (eta_hat - eta) * (eta_hat - eta),
        TerminalLoss::None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg01() -> TrialConfig {
        TrialConfig { x_min: 0.0, x_max: 1.0, q: 0.3, p: 1.0 / 3.0, omega: 0.25, n: 10 }
    }

    #[test]
    fn psi_at_mtd_and_floor() {
        let cfg = cfg01();
        let (rho, eta) = (0.1, 0.5);
        let at_eta = psi(eta, rho, eta, &cfg).unwrap();
        assert!((at_eta - (cfg.p / (1.0 - cfg.p)).ln()).abs() < 1e-12);
        let at_min = psi(cfg.x_min, rho, eta, &cfg).unwrap();
        assert!((at_min + (1.0 / rho - 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn psi_matches_linear_predictor() {
        let cfg = cfg01();
        let (rho, eta, x) = (0.1f64, 0.5f64, 0.75f64);
        // Direct evaluation of alpha and beta, written out independently.
        let lr = (1.0 / rho - 1.0).ln();
        let lp = (1.0 / cfg.p - 1.0).ln();
        let alpha = (cfg.x_min * lp - eta * lr) / (eta - cfg.x_min);
        let beta = (lr - lp) / (eta - cfg.x_min);
        let v = psi(x, rho, eta, &cfg).unwrap();
        assert!((v - (alpha + beta * x)).abs() < 1e-12);
        // ((x - eta) log 9 - x log 2) / eta at these values.
        let expected = 2.0 * (0.25 * 9f64.ln() - 0.75 * 2f64.ln());
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn degenerate_eta_rejected() {
        let cfg = cfg01();
        assert!(matches!(psi(0.3, 0.1, 0.0, &cfg), Err(DoseError::DegenerateGeometry { .. })));
    }

    #[test]
    fn toxicity_rises_to_one() {
        let cfg = cfg01();
        let pt = ModelPoint::new(0.1, 0.5);
        let mut prev = 0.0;
        for i in 0..200 {
            let x = i as f64 * 0.5;
            let f = toxicity_prob(x, &pt, &cfg).unwrap();
            assert!(f >= prev);
            prev = f;
        }
        assert!(prev > 1.0 - 1e-12);
    }

    #[test]
    fn params_round_trip_and_inverse() {
        let cfg = cfg01();
        let (a, b) = params_from_rho_eta(0.1, 0.5, &cfg).unwrap();
        assert!(b > 0.0);
        assert!((mtd_from_params(a, b, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let beta = 2f64.ln() / 0.5;
        assert!((mtd_from_params(0.0, beta, &cfg).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(mtd_from_params(0.0, 0.0, &cfg), Err(DoseError::ZeroSlope { .. })));
    }

    #[test]
    fn losses() {
        let ewoc = LossSpec::ewoc(0.25);
        let crm = LossSpec::crm();
        assert_eq!(loss_h(0.4, 0.4, &ewoc), 0.0);
        assert_eq!(loss_h(0.4, 0.4, &crm), 0.0);
        let d = 0.2;
        assert!((loss_h(0.5 + d, 0.5, &ewoc) - 0.75 * d).abs() < 1e-15);
        assert!((loss_h(0.5 - d, 0.5, &ewoc) - 0.25 * d).abs() < 1e-15);
        assert!((loss_h(0.5 + d, 0.5, &crm) - loss_h(0.5 - d, 0.5, &crm)).abs() < 1e-15);
        assert!((loss_h(0.5 + d, 0.5, &crm) - d * d).abs() < 1e-15);
        assert_eq!(loss_terminal(0.3, 0.3, &ewoc), 0.0);
        assert!((loss_terminal(0.4, 0.3, &ewoc) - 0.01).abs() < 1e-15);
        assert_eq!(loss_terminal(0.9, 0.3, &ewoc.without_terminal()), 0.0);
    }

    #[test]
    fn config_validation_lists_fields() {
        let bad = TrialConfig { x_min: 1.0, x_max: 0.0, q: 0.5, p: 0.3, omega: 0.6, n: 0 };
        match bad.validate() {
            Err(DoseError::InvalidConfig(v)) => assert_eq!(v.len(), 4),
            other => panic!("{other:?}"),
        }
        assert!(TrialConfig::unit_example().validate().is_ok());
        assert!(TrialConfig::five_fu().validate().is_ok());
    }

    proptest! {
        #[test]
        fn identities_hold(rho in 0.001f64..0.33, eta in 0.01f64..1.0) {
            let cfg = cfg01();
            let pt = ModelPoint::new(rho, eta);
            prop_assert!((toxicity_prob(cfg.x_min, &pt, &cfg).unwrap() - rho).abs() < 1e-12);
            prop_assert!((toxicity_prob(eta, &pt, &cfg).unwrap() - cfg.p).abs() < 1e-12);
            let (a, b) = pt.params(&cfg).unwrap();
            prop_assert!(b > 0.0);
            let back = ModelPoint::from_params(a, b, &cfg).unwrap();
            prop_assert!((back.rho - rho).abs() <= 1e-10 * rho);
            prop_assert!((back.eta - eta).abs() <= 1e-10 * eta);
        }

        #[test]
        fn strictly_increasing(rho in 0.001f64..0.33, eta in 0.01f64..1.0, x in 0.0f64..0.99) {
            let cfg = cfg01();
            let pt = ModelPoint::new(rho, eta);
            // psi is strictly increasing; F may saturate to 1.0 in floating point.
            let z0 = psi(x, rho, eta, &cfg).unwrap();
            let z1 = psi(x + 0.01, rho, eta, &cfg).unwrap();
            prop_assert!(z1 > z0);
            let f0 = toxicity_prob(x, &pt, &cfg).unwrap();
            let f1 = toxicity_prob(x + 0.01, &pt, &cfg).unwrap();
            prop_assert!(f1 > f0 || f0 == 1.0);
        }

        #[test]
        fn ewoc_ratio(delta in 1e-6f64..0.5, eta in 0.0f64..1.0, omega in 0.01f64..0.49) {
            let spec = LossSpec::ewoc(omega);
            let over = loss_h(eta + delta, eta, &spec);
            let under = loss_h(eta - delta, eta, &spec);
            prop_assert!(over > 0.0 && under > 0.0);
            prop_assert!((over / under - (1.0 - omega) / omega).abs() < 1e-8 * (1.0 - omega) / omega);
        }
    }
}
