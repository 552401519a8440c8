use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Chronological partition of the period axis.
///
/// With zero-based periods the segments are `train = [0, train_end)`,
/// `calibration = [train_end, cal_end)` and `test = [cal_end, cal_end + horizon)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChronoSplit {
    pub train_end: usize,
    pub cal_end: usize,
    pub horizon: usize,
}

impl ChronoSplit {
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn calibration(&self) -> Range<usize> {
        self.train_end..self.cal_end
    }

    pub fn test(&self) -> Range<usize> {
        self.cal_end..self.cal_end + self.horizon
    }

    /// Revalidates the split against a panel length.
    pub fn check(&self, n_periods: usize) -> Result<()> {
        chrono_split(n_periods, self.train_end, self.cal_end, self.horizon).map(|_| ())
    }
}

pub fn chrono_split(
    n_periods: usize,
    train_end: usize,
    cal_end: usize,
    horizon: usize,
) -> Result<ChronoSplit> {
    if train_end == 0 {
        return Err(Error::BadSplit("training segment is empty".into()));
    }
    if train_end >= cal_end {
        return Err(Error::BadSplit(format!(
            "training end {train_end} must precede calibration end {cal_end}"
        )));
    }
    if horizon == 0 {
        return Err(Error::BadSplit("forecast horizon must be at least one period".into()));
    }
    if cal_end + horizon > n_periods {
        return Err(Error::BadSplit(format!(
            "calibration end {cal_end} plus horizon {horizon} exceeds {n_periods} periods"
        )));
    }
    Ok(ChronoSplit { train_end, cal_end, horizon })
}
