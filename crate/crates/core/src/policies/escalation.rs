//! Rule-based step-up/down designs on a fixed dose ladder.

use serde::{Deserialize, Serialize};

use super::{myopic_dose, Decision, DoseGrid};
use crate::error::{DoseError, Result};
use crate::model::LossSpec;
use crate::posterior::{PosteriorGrid, TrialHistory};

pub const COHORT_SIZE: usize = 3;

/// `count` equally spaced levels including both ends of the dose range.
pub fn uniform_levels(x_min: f64, x_max: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![x_min];
    }
    (0..count).map(|i| x_min + (x_max - x_min) * i as f64 / (count - 1) as f64).collect()
}

/// State of a classic 3+3 escalation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepUpDownState {
    /// Index into the dose ladder.
    pub level: usize,
    pub levels: usize,
    /// Patients already evaluated at the current level (0 or 3).
    pub treated_at_level: u32,
    pub toxicities_at_level: u32,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    /// Treat the next cohort at this level.
    Next(usize),
    /// Stop; `declared` is the ladder index of the MTD. `at_floor` marks a stop
    /// at the lowest level, where the MTD lies below the ladder and `declared`
    /// is reported as 0.
    Stop { declared: usize, at_floor: bool },
}

impl StepUpDownState {
    pub fn new(levels: usize) -> Self {
        StepUpDownState { level: 0, levels, treated_at_level: 0, toxicities_at_level: 0, stopped: false }
    }

    /// Folds the complete cohorts of `history` through the transition rule.
    pub fn replay(levels: &[f64], history: &TrialHistory) -> Result<Self> {
        let mut state = StepUpDownState::new(levels.len());
        for cohort in history.records().chunks_exact(COHORT_SIZE) {
            if state.stopped {
                break;
            }
            let tox = cohort.iter().filter(|r| r.toxic).count() as u32;
            state = three_plus_three_step(state, tox)?.0;
        }
        Ok(state)
    }

    fn stop_outcome(&self) -> StepOutcome {
        StepOutcome::Stop { declared: self.level.saturating_sub(1), at_floor: self.level == 0 }
    }

    pub fn decision(&self, levels: &[f64]) -> Decision {
        if self.stopped {
            match self.stop_outcome() {
                StepOutcome::Stop { declared, at_floor } => Decision::Stop { declared_mtd: levels[declared], at_floor },
                StepOutcome::Next(_) => unreachable!(),
            }
        } else {
            Decision::Dose(levels[self.level])
        }
    }
}

/// One cohort of three through the 3+3 rule.
pub fn three_plus_three_step(state: StepUpDownState, cohort_toxicities: u32) -> Result<(StepUpDownState, StepOutcome)> {
    if cohort_toxicities > COHORT_SIZE as u32 {
        return Err(DoseError::InvalidCohortCount(cohort_toxicities));
    }
    if state.stopped {
        return Err(DoseError::StoppedTrial);
    }
    let mut next = state;
    let escalate = |s: &mut StepUpDownState| {
        s.level = (s.level + 1).min(s.levels - 1);
        s.treated_at_level = 0;
        s.toxicities_at_level = 0;
        StepOutcome::Next(s.level)
    };
    let outcome = if state.treated_at_level == 0 {
        match cohort_toxicities {
            0 => escalate(&mut next),
            1 => {
                next.treated_at_level = COHORT_SIZE as u32;
                next.toxicities_at_level = 1;
                StepOutcome::Next(next.level)
            }
            _ => {
                next.stopped = true;
                next.stop_outcome()
            }
        }
    } else if state.toxicities_at_level + cohort_toxicities <= 1 {
        escalate(&mut next)
    } else {
        next.stopped = true;
        next.stop_outcome()
    };
    Ok((next, outcome))
}

/// Ladder state of the modified first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoStageState {
    pub level: usize,
    pub stopped: bool,
}

impl TwoStageState {
    /// Each cohort is `[EWOC dose, d_k, d_k]`; the ladder moves on the cohort's DLT count.
    pub fn replay(levels: &[f64], history: &TrialHistory) -> Self {
        let mut state = TwoStageState { level: 0, stopped: false };
        for cohort in history.records().chunks_exact(COHORT_SIZE) {
            if state.stopped {
                break;
            }
            match cohort.iter().filter(|r| r.toxic).count() {
                0 => state.level = (state.level + 1).min(levels.len() - 1),
                1 => {}
                _ if state.level == 0 => state.stopped = true,
                _ => state.level -= 1,
            }
        }
        state
    }
}

/// Dose for the next patient of the modified 3+3 first stage. The first
/// patient of each cohort receives the EWOC dose computed from all previous
/// cohorts; the other two receive the current ladder dose.
pub fn modified_two_stage_dose(
    levels: &[f64],
    history: &TrialHistory,
    post: &PosteriorGrid,
    grid: &DoseGrid,
) -> Result<f64> {
    let state = TwoStageState::replay(levels, history);
    if state.stopped {
        return Err(DoseError::StoppedTrial);
    }
    if history.len() % COHORT_SIZE == 0 {
        Ok(myopic_dose(post, &LossSpec::ewoc(history.cfg.omega), grid))
    } else {
        Ok(levels[state.level])
    }
}
