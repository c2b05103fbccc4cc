//! Sequential Bayesian optimal designs for learning the logistic parameters.

use super::DoseGrid;
use crate::model::{logistic, ModelPoint, TrialConfig};
use crate::posterior::{PosteriorGrid, TrialHistory};
use crate::Result;

/// Ridge added to every information matrix before inversion.
pub const INFO_RIDGE: f64 = 1e-8;

/// Symmetric 2×2 matrix `[[a, b], [b, d]]` in `(alpha, beta)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 { a: 1.0, b: 0.0, d: 1.0 };

    /// `w * (1, x)(1, x)'`.
    #[inline]
    pub fn outer(x: f64, w: f64) -> Self {
        Sym2 { a: w, b: w * x, d: w * x * x }
    }

    #[inline]
    pub fn add(self, o: Sym2) -> Self {
        Sym2 { a: self.a + o.a, b: self.b + o.b, d: self.d + o.d }
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Sym2 { a: self.a * s, b: self.b * s, d: self.d * s }
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.b
    }

    /// `c' M^{-1} c`.
    #[inline]
    pub fn inv_quad(&self, c: [f64; 2]) -> f64 {
        (c[0] * c[0] * self.d - 2.0 * c[0] * c[1] * self.b + c[1] * c[1] * self.a) / self.det()
    }
}

/// Fisher information of one Bernoulli response at `x`: `F(1-F)(1,x)(1,x)'`.
pub fn information_matrix(x: f64, point: &ModelPoint, cfg: &TrialConfig) -> Result<Sym2> {
    let (alpha, beta) = point.params(cfg)?;
    Ok(information_at(x, alpha, beta))
}

#[inline]
fn information_at(x: f64, alpha: f64, beta: f64) -> Sym2 {
    let f = logistic(alpha + beta * x);
    Sym2::outer(x, f * (1.0 - f))
}

/// Coarsened posterior quadrature nodes carrying the information of the
/// doses already given.
#[derive(Debug, Clone)]
pub struct DesignNodes {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub weight: Vec<f64>,
    pub prior_info: Vec<Sym2>,
}

impl DesignNodes {
    /// Sums posterior mass over `stride × stride` blocks and places it at the
    /// block's centre node. Blocks without appreciable mass are dropped.
    pub fn new(post: &PosteriorGrid, history: &TrialHistory, stride: usize) -> Self {
        let stride = stride.max(1);
        let geom = post.geometry();
        let (mr, me) = (geom.m_rho(), geom.m_eta());
        let w = post.weights();
        let mut nodes = DesignNodes { alpha: Vec::new(), beta: Vec::new(), weight: Vec::new(), prior_info: Vec::new() };
        let mut blocks = Vec::new();
        for j0 in (0..me).step_by(stride) {
            let j1 = (j0 + stride).min(me);
            for i0 in (0..mr).step_by(stride) {
                let i1 = (i0 + stride).min(mr);
                let mass: f64 = (j0..j1).flat_map(|j| (i0..i1).map(move |i| j * mr + i)).map(|idx| w[idx]).sum();
                let centre = ((j0 + j1 - 1) / 2) * mr + (i0 + i1 - 1) / 2;
                blocks.push((centre, mass));
            }
        }
        let max = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
        for (idx, mass) in blocks {
            if mass <= max * 1e-12 {
                continue;
            }
            let (a, b) = (geom.alpha[idx], geom.beta[idx]);
            let info = history
                .records()
                .iter()
                .fold(Sym2::IDENTITY.scale(INFO_RIDGE), |m, r| m.add(information_at(r.dose, a, b)));
            nodes.alpha.push(a);
            nodes.beta.push(b);
            nodes.weight.push(mass);
            nodes.prior_info.push(info);
        }
        let total: f64 = nodes.weight.iter().sum();
        nodes.weight.iter_mut().for_each(|v| *v /= total);
        nodes
    }

    /// Posterior expectation of `c'[M_prev + I(x)]^{-1} c`.
    pub fn c_objective(&self, x: f64, c: [f64; 2]) -> f64 {
        (0..self.weight.len())
            .map(|n| self.weight[n] * self.prior_info[n].add(information_at(x, self.alpha[n], self.beta[n])).inv_quad(c))
            .sum()
    }

    /// Posterior expectation of `-log det[M_prev + I(x)]`.
    pub fn d_objective(&self, x: f64) -> f64 {
        (0..self.weight.len())
            .map(|n| -self.weight[n] * self.prior_info[n].add(information_at(x, self.alpha[n], self.beta[n])).det().ln())
            .sum()
    }
}

/// Dose minimizing the expected posterior variance of `c'theta` after one more observation.
pub fn c_optimal_dose(post: &PosteriorGrid, history: &TrialHistory, c: [f64; 2], grid: &DoseGrid, stride: usize) -> f64 {
    let nodes = DesignNodes::new(post, history, stride);
    grid.argmin(|x| nodes.c_objective(x, c)).0
}

/// D-optimal dose among those with `P(x > eta) <= eps`; `x_min` when none qualifies.
pub fn d_optimal_dose(post: &PosteriorGrid, history: &TrialHistory, eps: f64, grid: &DoseGrid, stride: usize) -> f64 {
    let nodes = DesignNodes::new(post, history, stride);
    let (x, v) = grid.argmin(|x| if post.eta_cdf(x) <= eps { nodes.d_objective(x) } else { f64::INFINITY });
    if v.is_finite() {
        x
    } else {
        history.cfg.x_min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{posterior_from_history, PriorSpec, Resolution};

    fn point_mass(cfg: &TrialConfig, rho: f64, eta: f64) -> PosteriorGrid {
        PosteriorGrid::from_axes(cfg, vec![rho], vec![eta]).unwrap()
    }

    #[test]
    fn information_is_rank_one() {
        let cfg = TrialConfig::unit_example();
        let p = ModelPoint::new(0.1, 0.4);
        for x in [0.0, 0.3, 0.9] {
            let m = information_matrix(x, &p, &cfg).unwrap();
            assert!(m.det().abs() < 1e-15);
            assert!(m.a >= 0.0 && m.d >= 0.0);
        }
    }

    #[test]
    fn bernoulli_factor_peaks_at_half() {
        let cfg = TrialConfig::unit_example();
        let p = ModelPoint::new(0.1, 0.5);
        let (a, b) = p.params(&cfg).unwrap();
        let x50 = -a / b;
        let m = information_matrix(x50, &p, &cfg).unwrap();
        assert!((m.a - 0.25).abs() < 1e-12);
        for dx in [-0.2, -0.05, 0.05, 0.2] {
            assert!(information_matrix(x50 + dx, &p, &cfg).unwrap().a < 0.25);
        }
    }

    #[test]
    fn two_dose_determinant() {
        let cfg = TrialConfig::unit_example();
        let p = ModelPoint::new(0.1, 0.4);
        let (a, b) = p.params(&cfg).unwrap();
        let (x1, x2) = (0.2, 0.7);
        let w = |x: f64| {
            let f = logistic(a + b * x);
            f * (1.0 - f)
        };
        let m = information_matrix(x1, &p, &cfg).unwrap().add(information_matrix(x2, &p, &cfg).unwrap());
        let expect = w(x1) * w(x2) * (x2 - x1) * (x2 - x1);
        assert!((m.det() - expect).abs() < 1e-14);
    }

    #[test]
    fn c_opt_matches_fine_scan() {
        let cfg = TrialConfig::unit_example();
        let post = point_mass(&cfg, 0.12, 0.45);
        let h = TrialHistory::new(cfg).appended(0.1, false).unwrap().appended(0.8, true).unwrap();
        let coarse = DoseGrid::uniform(&cfg, 101);
        let fine = DoseGrid::uniform(&cfg, 10001);
        let nodes = DesignNodes::new(&post, &h, 1);
        let x = c_optimal_dose(&post, &h, [0.0, 1.0], &coarse, 1);
        let xf = fine.argmin(|x| nodes.c_objective(x, [0.0, 1.0])).0;
        assert!((x - xf).abs() <= coarse.step() + 1e-12, "{x} vs {xf}");
        let v = nodes.c_objective(x, [0.0, 1.0]);
        assert!(coarse.doses().iter().all(|&y| nodes.c_objective(y, [0.0, 1.0]) >= v));
    }

    #[test]
    fn d_opt_respects_constraint() {
        let cfg = TrialConfig::unit_example();
        let post = posterior_from_history(&TrialHistory::new(cfg), &PriorSpec::UniformProduct, Resolution::new(32, 64)).unwrap();
        let grid = DoseGrid::uniform(&cfg, 101);
        let h = TrialHistory::new(cfg);
        let x = d_optimal_dose(&post, &h, 0.05, &grid, 2);
        assert!(x <= post.eta_quantile(0.05) + grid.step());
        let free = d_optimal_dose(&post, &h, 1.0, &grid, 2);
        let nodes = DesignNodes::new(&post, &h, 2);
        let best = grid.argmin(|x| nodes.d_objective(x)).0;
        assert_eq!(free, best);
    }

    #[test]
    fn d_opt_falls_back_to_floor() {
        let cfg = TrialConfig::unit_example();
        let post = point_mass(&cfg, 0.1, 0.5);
        let grid = DoseGrid::from_doses(vec![0.6, 0.8]).unwrap();
        assert_eq!(d_optimal_dose(&post, &TrialHistory::new(cfg), 0.05, &grid, 1), 0.0);
    }
}
