//! Learning-rate schedules, evaluated per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// The rate halves at every listed epoch.
    StepHalving { milestones: Vec<u32> },
    /// `lr0 · (1 − epoch/epochs)^gamma`.
    Polynomial { gamma: f64 },
    Constant,
}

impl LrSchedule {
    /// Learning rate used throughout `epoch` (0-based) of a run lasting
    /// `epochs` epochs.
    pub fn lr(&self, lr0: f64, epoch: u32, epochs: u32) -> f64 {
        match self {
            LrSchedule::StepHalving { milestones } => {
                let halvings = milestones.iter().filter(|&&m| epoch >= m).count();
                lr0 * 0.5f64.powi(halvings as i32)
            }
            LrSchedule::Polynomial { gamma } => {
                let t = (epoch as f64 / epochs.max(1) as f64).min(1.0);
                lr0 * (1.0 - t).powf(*gamma)
            }
            LrSchedule::Constant => lr0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Polynomial { gamma } if !(gamma.is_finite() && *gamma >= 0.0) => {
                Err(Error::Config(format!("polynomial gamma must be non-negative, got {gamma}")))
            }
            _ => Ok(()),
        }
    }
}
