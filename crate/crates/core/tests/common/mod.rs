//! Brute-force reference computations shared by the integration tests.
//! Everything here is written from the model definition, independently of
//! the crate's grid code.

#![allow(dead_code)]

use dosefind::{TrialConfig, TrialHistory};

pub fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Toxicity probability at `x` for `(rho, eta)`.
pub fn prob(x: f64, rho: f64, eta: f64, cfg: &TrialConfig) -> f64 {
    let z = logit(rho) + (logit(cfg.p) - logit(rho)) * (x - cfg.x_min) / (eta - cfg.x_min);
    1.0 / (1.0 + (-z).exp())
}

/// Marginal of `eta` on an `m x m` midpoint grid of the prior rectangle.
pub struct Marginal {
    pub eta: Vec<f64>,
    pub mass: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

pub fn oracle_marginal(history: &TrialHistory, m: usize) -> Marginal {
    let cfg = history.cfg;
    let recs = history.records();
    let mut eta = Vec::with_capacity(m);
    let mut logs = vec![0.0f64; m * m];
    for j in 0..m {
        let e = cfg.x_min + (j as f64 + 0.5) / m as f64 * (cfg.x_max - cfg.x_min);
        eta.push(e);
        for i in 0..m {
            let r = (i as f64 + 0.5) / m as f64 * cfg.q;
            let mut l = 0.0;
            for rec in recs {
                let f = prob(rec.dose, r, e, &cfg);
                l += if rec.toxic { f.ln() } else { (1.0 - f).ln() };
            }
            logs[j * m + i] = l;
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass = Vec::with_capacity(m);
    for j in 0..m {
        mass.push(logs[j * m..(j + 1) * m].iter().map(|l| (l - max).exp()).sum::<f64>());
    }
    let total: f64 = mass.iter().sum();
    for v in mass.iter_mut() {
        *v /= total;
    }
    Marginal { eta, mass, lo: cfg.x_min, hi: cfg.x_max }
}

impl Marginal {
    pub fn mean(&self) -> f64 {
        self.eta.iter().zip(&self.mass).map(|(e, w)| e * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.eta.iter().zip(&self.mass).map(|(e, w)| w * (e - m) * (e - m)).sum()
    }

    /// Quantile with each cell's mass spread uniformly over the cell.
    pub fn quantile(&self, w: f64) -> f64 {
        let width = (self.hi - self.lo) / self.eta.len() as f64;
        let mut acc = 0.0;
        for (j, &p) in self.mass.iter().enumerate() {
            if acc + p >= w && p > 0.0 {
                return self.lo + width * (j as f64 + (w - acc) / p);
            }
            acc += p;
        }
        self.hi
    }

    /// EWOC expected loss at `x`.
    pub fn ewoc_loss(&self, x: f64, omega: f64) -> f64 {
        self.eta
            .iter()
            .zip(&self.mass)
            .map(|(&e, &w)| w * (omega * (e - x).max(0.0) + (1.0 - omega) * (x - e).max(0.0)))
            .sum()
    }

    pub fn crm_loss(&self, x: f64) -> f64 {
        self.eta.iter().zip(&self.mass).map(|(&e, &w)| w * (x - e) * (x - e)).sum()
    }
}
