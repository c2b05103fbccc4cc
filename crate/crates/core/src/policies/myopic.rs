//! Myopic rules: minimize the posterior expected loss of the current patient.

use super::DoseGrid;
use crate::model::LossSpec;
use crate::posterior::PosteriorGrid;

/// `argmin_x E[h(x, eta) | data]` over the dose grid. With squared loss this
/// is the posterior mean of `eta` (CRM); with the asymmetric loss it is the
/// `omega`-quantile (EWOC). Both objectives are convex in `x`.
pub fn myopic_dose(post: &PosteriorGrid, spec: &LossSpec, grid: &DoseGrid) -> f64 {
    grid.argmin_convex(|x| post.expected_loss(x, spec)).0
}
