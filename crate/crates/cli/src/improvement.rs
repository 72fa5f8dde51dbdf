use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

/// Share of the gap between the undistilled student and the best teacher
/// that distillation closed, in percent. Above 100 means the student beat
/// the teacher; negative means distillation hurt.
///
/// For higher-better metrics both differences flip sign, which leaves the
/// ratio itself unchanged.
pub fn improvement_percent(base: f64, distilled: f64, best_teacher: f64, direction: Direction) -> Result<f64> {
    let gap = match direction {
        Direction::LowerBetter => base - best_teacher,
        Direction::HigherBetter => best_teacher - base,
    };
    if gap == 0.0 || !gap.is_finite() {
        return Err(CliError::UndefinedImprovement(base));
    }
    let gained = match direction {
        Direction::LowerBetter => base - distilled,
        Direction::HigherBetter => distilled - base,
    };
    Ok(gained / gap * 100.0)
}
