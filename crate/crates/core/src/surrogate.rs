//! Stage 1: per-region surrogate networks and their residuals.
//!
//! Each region gets its own net `G_i` mapping one post embedding plus the
//! previous `q` surrogate scores of that region (zero-padded at the start of the
//! sequence) to the post's score. Residuals `y_s - G_i(...)` are summarised per
//! month into a fixed-length vector for the target model.

use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mlp::{
    batch_from_rows, fit_regression, Activation, AdamConfig, FeedForwardNet, RegressionData, Standardizer,
    TrainOptions,
};
use crate::panel::PanelDataset;
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Length of the per-month residual summary.
pub const RESIDUAL_FEATURES: usize = 3;

/// Number of trailing posts averaged in the last summary coordinate.
const TAIL: usize = 5;

fn default_lags() -> usize { 7 }
fn default_hidden() -> Vec<usize> { vec![32, 16] }
fn default_epochs() -> usize { 200 }
fn default_batch() -> usize { 64 }
fn default_lr() -> f64 { 1e-3 }
fn default_patience() -> usize { 20 }
fn default_val_fraction() -> f64 { 0.2 }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default = "default_lags")]
    pub n_lags: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Chronologically last share of the training posts held out for early stopping.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub unit: usize,
    pub n_lags: usize,
    pub net: FeedForwardNet,
    pub input_norm: Standardizer,
    pub target_loc: f64,
    pub target_scale: f64,
}

/// Posts of unit `i` in chronological order as `(period, index within month)`.
fn post_sequence(ds: &PanelDataset, i: usize) -> Vec<(usize, usize)> {
    (0..ds.n_periods()).flat_map(|t| (0..ds.k_t(i, t)).map(move |k| (t, k))).collect()
}

/// Raw input rows `[x_k || y_s lags]` for every post of unit `i` whose period lies in `periods`.
fn design(ds: &PanelDataset, i: usize, n_lags: usize, periods: &Range<usize>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<(usize, usize)>) {
    let seq = post_sequence(ds, i);
    let scores: Vec<f64> = seq.iter().map(|&(t, k)| ds.cell(i, t).scores[k]).collect();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut keys = Vec::new();
    for (j, &(t, k)) in seq.iter().enumerate() {
        if !periods.contains(&t) {
            continue;
        }
        let mut row = ds.cell(i, t).embedding(k, ds.d_x()).to_vec();
        row.extend((1..=n_lags).map(|l| if j >= l { scores[j - l] } else { 0.0 }));
        rows.push(row);
        targets.push(scores[j]);
        keys.push((t, k));
    }
    (rows, targets, keys)
}

pub fn fit_surrogate(
    ds: &PanelDataset,
    i: usize,
    periods: Range<usize>,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<SurrogateModel> {
    let (rows, targets, _) = design(ds, i, cfg.n_lags, &periods);
    if rows.len() < cfg.n_lags + 1 {
        return Err(Error::InsufficientData(format!(
            "unit {i} has {} surrogate observations in training, need at least {}",
            rows.len(),
            cfg.n_lags + 1
        )));
    }
    let dim = ds.d_x() + cfg.n_lags;
    let mut x = batch_from_rows(dim, rows.iter().map(|r| r.as_slice()));
    let input_norm = Standardizer::fit(&x);
    input_norm.apply(&mut x);
    let mut y = DMatrix::from_row_slice(1, targets.len(), &targets);
    let tnorm = Standardizer::fit(&y);
    tnorm.apply(&mut y);

    let n = rows.len();
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    let n_val = if n - n_val < cfg.n_lags + 1 { 0 } else { n_val };
    let n_fit = n - n_val;
    let train = RegressionData { inputs: x.columns(0, n_fit).into_owned(), targets: y.columns(0, n_fit).into_owned() };
    let val = RegressionData { inputs: x.columns(n_fit, n_val).into_owned(), targets: y.columns(n_fit, n_val).into_owned() };

    let mut rng = rng::stream(rng::child_seed(seed, i as u64), streams::SURROGATE);
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = FeedForwardNet::new(&sizes, Activation::Relu, Activation::Identity, &mut rng);
    // Start from the mean predictor so that uninformative inputs cost nothing.
    net.layers.last_mut().expect("at least one layer").weights.fill(0.0);
    let opts = TrainOptions {
        max_epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        adam: AdamConfig::with_lr(cfg.learning_rate),
        patience: cfg.patience,
    };
    fit_regression(&mut net, &train, (n_val > 0).then_some(&val), &opts, &mut rng)?;
    Ok(SurrogateModel {
        unit: i,
        n_lags: cfg.n_lags,
        net,
        input_norm,
        target_loc: tnorm.loc[0],
        target_scale: tnorm.scale[0],
    })
}

impl SurrogateModel {
    fn predict_rows(&self, dim: usize, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut x = batch_from_rows(dim, rows.iter().map(|r| r.as_slice()));
        self.input_norm.apply(&mut x);
        let cache = self.net.forward_batch(&x)?;
        Ok(cache.output().iter().map(|v| self.target_loc + self.target_scale * v).collect())
    }
}

/// Residuals `y_s - G_i(x, lags)` of the model's unit, one vector per period in `periods`.
pub fn residuals(model: &SurrogateModel, ds: &PanelDataset, periods: Range<usize>) -> Result<Vec<Vec<f64>>> {
    let (rows, targets, keys) = design(ds, model.unit, model.n_lags, &periods);
    let pred = model.predict_rows(ds.d_x() + model.n_lags, &rows)?;
    let mut out: Vec<Vec<f64>> = periods.clone().map(|t| Vec::with_capacity(ds.k_t(model.unit, t))).collect();
    for ((&(t, _), y), g) in keys.iter().zip(&targets).zip(&pred) {
        out[t - periods.start].push(y - g);
    }
    Ok(out)
}

/// `[mean, population std, mean of the last five]` of one month's residuals; zeros for an empty month.
pub fn residual_features(res: &[f64]) -> [f64; RESIDUAL_FEATURES] {
    if res.is_empty() {
        return [0.0; RESIDUAL_FEATURES];
    }
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    let var = res.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let tail = &res[res.len().saturating_sub(TAIL)..];
    [mean, var.sqrt(), tail.iter().sum::<f64>() / tail.len() as f64]
}

/// Residual features for periods past the training window, built exactly like the in-sample ones.
pub fn forecast_residuals(
    model: &SurrogateModel,
    ds: &PanelDataset,
    periods: Range<usize>,
) -> Result<Vec<[f64; RESIDUAL_FEATURES]>> {
    if periods.end > ds.n_periods() {
        return Err(Error::InsufficientData(format!(
            "period {} requested but the panel has {}",
            periods.end - 1,
            ds.n_periods()
        )));
    }
    Ok(residuals(model, ds, periods)?.iter().map(|r| residual_features(r)).collect())
}

/// Residuals and their monthly summaries for every cell of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPanel {
    n_units: usize,
    n_periods: usize,
    eps_s: Vec<Vec<f64>>,
    eps_feat: Vec<[f64; RESIDUAL_FEATURES]>,
}

impl ResidualPanel {
    pub fn from_residuals(n_units: usize, n_periods: usize, eps_s: Vec<Vec<f64>>) -> Result<Self> {
        if eps_s.len() != n_units * n_periods {
            return Err(Error::LengthMismatch { left: eps_s.len(), right: n_units * n_periods });
        }
        let eps_feat = eps_s.iter().map(|r| residual_features(r)).collect::<Vec<_>>();
        if eps_feat.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("surrogate residual features".into()));
        }
        Ok(Self { n_units, n_periods, eps_s, eps_feat })
    }

    /// A panel whose residual features are all zero.
    pub fn zeros(n_units: usize, n_periods: usize) -> Self {
        Self::from_residuals(n_units, n_periods, vec![Vec::new(); n_units * n_periods]).expect("consistent shape")
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn residuals(&self, i: usize, t: usize) -> &[f64] {
        &self.eps_s[i * self.n_periods + t]
    }

    pub fn features(&self, i: usize, t: usize) -> &[f64; RESIDUAL_FEATURES] {
        &self.eps_feat[i * self.n_periods + t]
    }

    /// Writes `unit,period,day,residual`, one row per post.
    pub fn write_csv(&self, ds: &PanelDataset, path: &Path) -> Result<()> {
        let mut buf = String::from("unit,period,day,residual\n");
        for i in 0..self.n_units {
            for t in 0..self.n_periods {
                let days = &ds.cell(i, t).days;
                for (d, r) in days.iter().zip(self.residuals(i, t)) {
                    buf.push_str(&format!("{},{},{},{}\n", ds.unit_labels[i], ds.period_labels[t], d, r));
                }
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(buf.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Fits one surrogate per unit on `train` and computes residuals for every period.
///
/// Units are fitted in parallel; each owns a stream derived from `(seed, unit)`,
/// so results do not depend on the thread count.
pub fn build_residual_panel(
    ds: &PanelDataset,
    train: Range<usize>,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<(Vec<SurrogateModel>, ResidualPanel)> {
    let fits: Vec<Result<(SurrogateModel, Vec<Vec<f64>>)>> = (0..ds.n_units())
        .into_par_iter()
        .map(|i| {
            let model = fit_surrogate(ds, i, train.clone(), cfg, seed)?;
            let res = residuals(&model, ds, 0..ds.n_periods())?;
            Ok((model, res))
        })
        .collect();
    let mut models = Vec::with_capacity(ds.n_units());
    let mut eps = Vec::with_capacity(ds.n_units() * ds.n_periods());
    for f in fits {
        let (m, r) = f?;
        models.push(m);
        eps.extend(r);
    }
    Ok((models, ResidualPanel::from_residuals(ds.n_units(), ds.n_periods(), eps)?))
}
