//! Panel container, intra-month aggregation and chronological splits.

mod io;
mod split;

pub use io::{load_dataset, save_dataset, PANEL_FILE, POSTS_FILE};
pub use split::{chrono_split, ChronoSplit};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// High-frequency observations of one (unit, month) cell, already aggregated to days.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonthObs {
    pub days: Vec<i64>,
    /// Day-level embeddings, `days.len() * d_x` values, row-major.
    pub x: Vec<f64>,
    /// Day-level surrogate scores.
    pub scores: Vec<f64>,
}

impl MonthObs {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn embedding(&self, k: usize, d_x: usize) -> &[f64] {
        &self.x[k * d_x..(k + 1) * d_x]
    }
}

/// An outcome lag stored in one of the macro covariate columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaggedOutcome {
    pub column: usize,
    pub lag: usize,
}

/// Balanced panel of `n_units x n_periods` cells.
///
/// Outcomes and covariates are stored row-major by unit then period. Months
/// without posts carry an empty [`MonthObs`].
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_units: usize,
    n_periods: usize,
    d_x: usize,
    d_z: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    cells: Vec<MonthObs>,
    pub unit_labels: Vec<String>,
    pub period_labels: Vec<i64>,
    /// Covariate columns that hold lagged outcomes, used by recursive forecasting.
    pub lagged_outcomes: Vec<LaggedOutcome>,
}

impl PanelDataset {
    pub fn new(
        n_units: usize,
        n_periods: usize,
        d_x: usize,
        d_z: usize,
        y: Vec<f64>,
        z: Vec<f64>,
        cells: Vec<MonthObs>,
    ) -> Result<Self> {
        let n_cells = n_units * n_periods;
        if n_units == 0 || n_periods == 0 {
            return Err(Error::InsufficientData("panel has no cells".into()));
        }
        check_len(y.len(), n_cells)?;
        check_len(z.len(), n_cells * d_z)?;
        check_len(cells.len(), n_cells)?;
        for (idx, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "outcome of unit {} period {}",
                    idx / n_periods,
                    idx % n_periods
                )));
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("macro covariates".into()));
        }
        for cell in &cells {
            check_len(cell.scores.len(), cell.days.len())?;
            check_len(cell.x.len(), cell.days.len() * d_x)?;
        }
        Ok(Self {
            n_units,
            n_periods,
            d_x,
            d_z,
            y,
            z,
            cells,
            unit_labels: (0..n_units).map(|i| i.to_string()).collect(),
            period_labels: (0..n_periods as i64).collect(),
            lagged_outcomes: Vec::new(),
        })
    }

    pub fn with_lagged_outcomes(mut self, lags: Vec<LaggedOutcome>) -> Result<Self> {
        for l in &lags {
            if l.column >= self.d_z || l.lag == 0 {
                return Err(Error::Config(format!(
                    "lagged outcome column {} lag {} is invalid for {} covariates",
                    l.column, l.lag, self.d_z
                )));
            }
        }
        self.lagged_outcomes = lags;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    fn idx(&self, i: usize, t: usize) -> usize {
        debug_assert!(i < self.n_units && t < self.n_periods);
        i * self.n_periods + t
    }

    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[self.idx(i, t)]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_periods..(i + 1) * self.n_periods]
    }

    pub fn z(&self, i: usize, t: usize) -> &[f64] {
        let c = self.idx(i, t);
        &self.z[c * self.d_z..(c + 1) * self.d_z]
    }

    pub fn cell(&self, i: usize, t: usize) -> &MonthObs {
        &self.cells[self.idx(i, t)]
    }

    pub fn k_t(&self, i: usize, t: usize) -> usize {
        self.cell(i, t).len()
    }

    /// Max-pooled month embedding of cell (i, t).
    pub fn month_features(&self, i: usize, t: usize) -> Result<Vec<f64>> {
        let cell = self.cell(i, t);
        pool_embeddings((0..cell.len()).map(|k| cell.embedding(k, self.d_x)))
    }

    /// As [`Self::month_features`], with empty months imputed as the zero vector.
    pub fn month_features_or_zero(&self, i: usize, t: usize) -> Vec<f64> {
        self.month_features(i, t)
            .unwrap_or_else(|_| vec![0.0; self.d_x])
    }

    /// Month-level surrogate score: average of the day scores, `None` for empty months.
    pub fn month_score(&self, i: usize, t: usize) -> Option<f64> {
        average_scores(&self.cell(i, t).scores).ok()
    }
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::DimMismatch { expected, found });
    }
    Ok(())
}

/// Standardises official index values: `(raw - 100) / s_i`, where `s_i` is the
/// sample standard deviation of unit i's series `raw[i, .] - 100`.
pub fn normalize_cpi(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, t) = raw.shape();
    if t < 2 {
        return Err(Error::InsufficientData(
            "at least two periods are needed to standardise".into(),
        ));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw index values".into()));
    }
    let mut out = raw.add_scalar(-100.0);
    for i in 0..n {
        let row = out.row(i);
        let mean = row.mean();
        let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (t - 1) as f64).sqrt();
        if sd <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(Error::ZeroDispersion { unit: i });
        }
        out.row_mut(i).unscale_mut(sd);
    }
    Ok(out)
}

/// Coordinate-wise maximum over post (or day) embeddings.
pub fn pool_embeddings<'a, I>(posts: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = posts.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::EmptyGroup("no embeddings to pool".into()))?;
    let mut out = first.to_vec();
    for v in iter {
        if v.len() != out.len() {
            return Err(Error::DimMismatch { expected: out.len(), found: v.len() });
        }
        for (o, &x) in out.iter_mut().zip(v) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean of post (or day) level scores.
pub fn average_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyGroup("no scores to average".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
