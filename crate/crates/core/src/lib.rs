//! Bayesian dose finding for Phase I trials.
//!
//! The crate covers the two-parameter logistic toxicity model ([`model`]),
//! grid posterior inference ([`posterior`]), single-step dosing rules
//! ([`policies`]), Monte Carlo rollout of a base policy ([`rollout`]),
//! hybrid myopic/learning designs fitted from rollouts ([`hybrid`]) and
//! replicated-trial operating characteristics ([`simulate`]).

pub mod error;
pub mod hybrid;
pub mod model;
pub mod policies;
pub mod posterior;
pub mod rng;
pub mod rollout;
pub mod simulate;

pub use error::{DoseError, Result};
pub use model::{LossKind, LossSpec, ModelPoint, TerminalLoss, TrialConfig};
pub use posterior::{posterior_from_history, PosteriorGrid, PriorSpec, Resolution, TrialHistory};
pub use policies::{Decision, DoseContext, DoseGrid, Myopic, Policy, PolicySettings, PolicySpec};
pub use rollout::RolloutConfig;
pub use simulate::{Scenario, SimReport};
