//! Linear panel baselines and the PMSE metric.
//!
//! Both baselines are unit fixed-effects regressions estimated by the within
//! transformation: LPM uses the macro covariates `z`, LPM-E adds the month
//! embeddings reduced to rank `r_0` by a truncated SVD fitted on training
//! cells only.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deep_panel::recursive_forecast;
use crate::numerics::{ols_fit, EmbeddingProjection};
use crate::panel::{LaggedOutcome, PanelDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    MacroOnly,
    WithEmbeddings { rank: usize },
}

#[derive(Debug, Clone)]
pub struct LinearPanelModel {
    pub fixed_effects: Vec<f64>,
    pub slope: DVector<f64>,
    pub spec: FeatureSpec,
    pub projection: Option<EmbeddingProjection>,
    pub lagged_outcomes: Vec<LaggedOutcome>,
}

fn features(ds: &PanelDataset, proj: Option<&EmbeddingProjection>, i: usize, t: usize, z: &[f64]) -> Vec<f64> {
    let mut f = z.to_vec();
    if let Some(p) = proj {
        f.extend(p.apply_row(&ds.month_features_or_zero(i, t)));
    }
    f
}

/// Within-transformation OLS: unit fixed effects plus pooled slopes.
pub fn fit_lpm(ds: &PanelDataset, spec: FeatureSpec, periods: Range<usize>) -> Result<LinearPanelModel> {
    if periods.is_empty() || periods.end > ds.n_periods() {
        return Err(Error::BadSplit(format!("training periods {periods:?} do not fit {} periods", ds.n_periods())));
    }
    let projection = match spec {
        FeatureSpec::MacroOnly => None,
        FeatureSpec::WithEmbeddings { rank } => {
            let rows: Vec<Vec<f64>> = (0..ds.n_units())
                .flat_map(|i| periods.clone().map(move |t| (i, t)))
                .map(|(i, t)| ds.month_features_or_zero(i, t))
                .collect();
            let x = DMatrix::from_fn(rows.len(), ds.d_x(), |r, c| rows[r][c]);
            Some(EmbeddingProjection::fit(&x, rank)?)
        }
    };
    let n = ds.n_units();
    let m = periods.len();
    let feats: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| periods.clone().map(|t| features(ds, projection.as_ref(), i, t, ds.z(i, t))).collect())
        .collect();
    let k = feats[0][0].len();
    let mut means_x = vec![vec![0.0; k]; n];
    let mut means_y = vec![0.0; n];
    for i in 0..n {
        for (s, t) in periods.clone().enumerate() {
            means_y[i] += ds.y(i, t) / m as f64;
            for j in 0..k {
                means_x[i][j] += feats[i][s][j] / m as f64;
            }
        }
    }
    let slope = if k == 0 {
        DVector::zeros(0)
    } else {
        let mut x = DMatrix::zeros(n * m, k);
        let mut y = DVector::zeros(n * m);
        for i in 0..n {
            for (s, t) in periods.clone().enumerate() {
                let r = i * m + s;
                y[r] = ds.y(i, t) - means_y[i];
                for j in 0..k {
                    x[(r, j)] = feats[i][s][j] - means_x[i][j];
                }
            }
        }
        // Columns without within-unit variation carry no information; their slope is zero.
        let active: Vec<usize> = (0..k).filter(|&j| x.column(j).iter().any(|v| *v != 0.0)).collect();
        let mut slope = DVector::zeros(k);
        if !active.is_empty() {
            let coef = ols_fit(&x.select_columns(&active), &y)?;
            for (c, &j) in active.iter().enumerate() {
                slope[j] = coef[c];
            }
        }
        slope
    };
    let fixed_effects = (0..n)
        .map(|i| means_y[i] - means_x[i].iter().zip(slope.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(LinearPanelModel { fixed_effects, slope, spec, projection, lagged_outcomes: ds.lagged_outcomes.clone() })
}

/// LPM-E: macro covariates plus rank-`r0` embedding projections.
pub fn fit_lpm_e(ds: &PanelDataset, r0: usize, periods: Range<usize>) -> Result<LinearPanelModel> {
    fit_lpm(ds, FeatureSpec::WithEmbeddings { rank: r0 }, periods)
}

impl LinearPanelModel {
    pub fn predict_with(&self, ds: &PanelDataset, i: usize, t: usize, z: &[f64]) -> f64 {
        let f = features(ds, self.projection.as_ref(), i, t, z);
        self.fixed_effects[i] + f.iter().zip(self.slope.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict_one_step(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        self.predict_with(ds, i, t, ds.z(i, t))
    }

    /// Recursive forecasts for `start..start+h`, substituting earlier predictions for lagged outcomes.
    pub fn predict_h_step(&self, ds: &PanelDataset, i: usize, start: usize, h: usize) -> Result<Vec<f64>> {
        recursive_forecast(&self.lagged_outcomes, ds, i, start, h, |t, z| Ok(self.predict_with(ds, i, t, z)))
    }
}

/// Mean squared error over aligned predictions and truths.
pub fn pmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}
