//! Stage 2: deep panel training with latent group structure.
//!
//! A shared backbone maps the cell input `[pooled embedding || z || residual
//! features]` to a hidden vector `h`, which is standardised coordinate-wise to
//! `h~`. Every unit owns a linear head `(beta_i, b_i)` on `h~`, and the heads are
//! pulled towards `K_0` latent centres by a min-distance penalty. After
//! training, units are assigned to their nearest centre and each centre is
//! refitted by least squares on its group's cells.

mod diagnostics;
mod kmeans;
mod train;

pub use diagnostics::{shortcut_diagnostic, shortcut_gradients, ShortcutReport};
pub use kmeans::kmeans;
pub use train::{fit_deep_panel, grad_check_model, penalized_loss_gradient, train, TrainReport};

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::mlp::{Activation, FeedForwardNet, Standardizer};
use crate::numerics::ols_fit_with_fallback;
use crate::panel::{LaggedOutcome, PanelDataset};
use crate::surrogate::{ResidualPanel, RESIDUAL_FEATURES};
use crate::{Error, Result};

fn default_hidden() -> Vec<usize> { vec![64] }
fn default_hidden_dim() -> usize { 16 }
fn default_relu() -> Activation { Activation::Relu }
fn default_terminal() -> Activation { Activation::Sigmoid }
fn default_groups() -> usize { 3 }
fn default_lambda() -> f64 { 0.5 }
fn default_warmup() -> usize { 50 }
fn default_ramp() -> usize { 10 }
fn default_epochs() -> usize { 200 }
fn default_batch() -> usize { 64 }
fn default_lr() -> f64 { 1e-3 }
fn default_patience() -> usize { 20 }
fn default_restarts() -> usize { 10 }
fn default_val_periods() -> usize { 5 }
fn default_true() -> bool { true }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepPanelConfig {
    /// Interior widths of the backbone.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Width `d_h` of the final hidden representation.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_relu")]
    pub activation: Activation,
    /// Activation of the final backbone layer.
    #[serde(default = "default_terminal")]
    pub terminal: Activation,
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Epochs without penalty before the centres are seeded.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Epochs over which the penalty weight rises linearly to `lambda`.
    #[serde(default = "default_ramp")]
    pub ramp_epochs: usize,
    /// Maximum epochs of the penalised phase.
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    /// Trailing training periods used for early stopping.
    #[serde(default = "default_val_periods")]
    pub val_periods: usize,
    /// Replace every head by its group's least-squares refit after training.
    #[serde(default = "default_true")]
    pub refit: bool,
}

impl Default for DeepPanelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl DeepPanelConfig {
    pub fn validate(&self, n_units: usize) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.n_groups == 0 || self.n_groups > n_units {
            return Err(Error::Config(format!("n_groups {} must be in 1..={n_units}", self.n_groups)));
        }
        if !(self.lambda >= 0.0) || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lambda, learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepPanelModel {
    pub backbone: FeedForwardNet,
    pub input_norm: Standardizer,
    pub hidden_norm: Standardizer,
    /// Per-unit `[beta_i || b_i]`.
    pub heads: Vec<Vec<f64>>,
    /// Per-group `[eta_k || phi_k]`.
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub lambda: f64,
    pub lagged_outcomes: Vec<LaggedOutcome>,
    pub config: DeepPanelConfig,
    pub seed: u64,
}

/// Raw (unnormalised) backbone input for cell `(i, t)` with covariates `z`.
pub fn cell_input(ds: &PanelDataset, resid: &ResidualPanel, i: usize, t: usize, z: &[f64]) -> Result<Vec<f64>> {
    if i >= ds.n_units() || t >= ds.n_periods() {
        return Err(Error::MissingFeatures(format!("cell ({i}, {t}) is outside the panel")));
    }
    if resid.n_units() != ds.n_units() || t >= resid.n_periods() {
        return Err(Error::MissingFeatures(format!("no residual features for cell ({i}, {t})")));
    }
    let mut v = ds.month_features_or_zero(i, t);
    v.extend_from_slice(z);
    v.extend_from_slice(resid.features(i, t));
    Ok(v)
}

pub fn input_dim(ds: &PanelDataset) -> usize {
    ds.d_x() + ds.d_z() + RESIDUAL_FEATURES
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(lambda / N) * sum_i min_k ||c_k - head_i||`.
pub fn min_distance_penalty(heads: &[Vec<f64>], centers: &[Vec<f64>], lambda: f64) -> f64 {
    if heads.is_empty() || centers.is_empty() {
        return 0.0;
    }
    let total: f64 = heads.iter().map(|h| centers.iter().map(|c| dist(h, c)).fold(f64::INFINITY, f64::min)).sum();
    lambda / heads.len() as f64 * total
}

/// `(lambda / N) * sum_i prod_k ||c_k - head_i||`, reported for monitoring only.
pub fn product_penalty(heads: &[Vec<f64>], centers: &[Vec<f64>], lambda: f64) -> f64 {
    if heads.is_empty() {
        return 0.0;
    }
    let total: f64 = heads.iter().map(|h| centers.iter().map(|c| dist(h, c)).product::<f64>()).sum();
    lambda / heads.len() as f64 * total
}

/// Nearest centre for every head, lowest index on ties.
pub fn nearest_centers(heads: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    heads.iter().map(|h| kmeans::nearest(h, centers).0).collect()
}

impl DeepPanelModel {
    pub fn hidden_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn n_units(&self) -> usize {
        self.heads.len()
    }

    pub fn n_groups(&self) -> usize {
        self.centers.len()
    }

    /// Normalised hidden representation `h~` of a raw input vector.
    pub fn hidden(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let mut v = raw.to_vec();
        if v.len() != self.input_norm.dim() {
            return Err(Error::DimMismatch { expected: self.input_norm.dim(), found: v.len() });
        }
        self.input_norm.apply_vec(&mut v);
        let mut h = self.backbone.forward(&v)?;
        self.hidden_norm.apply_vec(&mut h);
        Ok(h)
    }

    /// Normalised hidden matrix (`d_h x B`) for a batch of raw inputs (`d_in x B`).
    pub fn hidden_batch(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = raw.clone();
        self.input_norm.apply(&mut x);
        let cache = self.backbone.forward_batch(&x)?;
        let mut h = cache.output().clone();
        self.hidden_norm.apply(&mut h);
        Ok(h)
    }

    /// Relu kink margin of the backbone at one raw input.
    pub fn relu_margin(&self, raw: &[f64]) -> Result<f64> {
        let mut x = DMatrix::from_column_slice(raw.len(), 1, raw);
        if x.nrows() != self.input_norm.dim() {
            return Err(Error::DimMismatch { expected: self.input_norm.dim(), found: x.nrows() });
        }
        self.input_norm.apply(&mut x);
        Ok(self.backbone.relu_margins(&x)?[0])
    }

    /// `read_out(coef, h~) = coef[..d_h] . h~ + coef[d_h]`.
    pub fn read_out(coef: &[f64], h: &[f64]) -> f64 {
        let d = h.len();
        coef[..d].iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + coef[d]
    }

    /// Coefficients used to predict unit `i`: the centre of its group.
    pub fn unit_coef(&self, i: usize) -> &[f64] {
        &self.centers[self.assignment[i]]
    }

    pub fn predict_input(&self, i: usize, raw: &[f64]) -> Result<f64> {
        if i >= self.n_units() {
            return Err(Error::MissingFeatures(format!("unit {i} is not in the model")));
        }
        Ok(Self::read_out(self.unit_coef(i), &self.hidden(raw)?))
    }

    /// One-step prediction of `y_{i,t}` from the observed covariates of period `t`.
    pub fn predict_one_step(&self, ds: &PanelDataset, resid: &ResidualPanel, i: usize, t: usize) -> Result<f64> {
        if t >= ds.n_periods() {
            return Err(Error::MissingFeatures(format!("period {t} is beyond the panel")));
        }
        self.predict_input(i, &cell_input(ds, resid, i, t, ds.z(i, t))?)
    }

    /// Recursive forecasts for periods `start..start+h`: lagged-outcome entries of `z`
    /// that point inside the forecast window are replaced by earlier predictions.
    pub fn predict_h_step(
        &self,
        ds: &PanelDataset,
        resid: &ResidualPanel,
        i: usize,
        start: usize,
        h: usize,
    ) -> Result<Vec<f64>> {
        recursive_forecast(&self.lagged_outcomes, ds, i, start, h, |t, z| {
            self.predict_input(i, &cell_input(ds, resid, i, t, z)?)
        })
    }

    pub fn assign_groups(&self) -> Vec<usize> {
        nearest_centers(&self.heads, &self.centers)
    }

    pub fn penalty(&self) -> f64 {
        min_distance_penalty(&self.heads, &self.centers, self.lambda)
    }

    pub fn product_penalty(&self) -> f64 {
        product_penalty(&self.heads, &self.centers, self.lambda)
    }

    /// Batch MSE of the per-unit heads plus the min-distance penalty at weight `lambda`.
    pub fn penalized_loss(
        &self,
        ds: &PanelDataset,
        resid: &ResidualPanel,
        cells: &[(usize, usize)],
        lambda: f64,
    ) -> Result<f64> {
        if cells.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let mut sse = 0.0;
        for &(i, t) in cells {
            let h = self.hidden(&cell_input(ds, resid, i, t, ds.z(i, t))?)?;
            let r = ds.y(i, t) - Self::read_out(&self.heads[i], &h);
            sse += r * r;
        }
        Ok(sse / cells.len() as f64 + min_distance_penalty(&self.heads, &self.centers, lambda))
    }

    /// Least-squares refit of every centre on its group's cells with the backbone frozen;
    /// heads are then set to their group's centre. Returns the groups that needed the
    /// ridge fallback.
    pub fn refit_centers(
        &mut self,
        ds: &PanelDataset,
        resid: &ResidualPanel,
        cells: &[(usize, usize)],
    ) -> Result<Vec<usize>> {
        let d = self.hidden_dim();
        let mut ridge = Vec::new();
        for k in 0..self.n_groups() {
            let members: Vec<(usize, usize)> =
                cells.iter().copied().filter(|&(i, _)| self.assignment[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let mut x = DMatrix::zeros(members.len(), d + 1);
            let mut y = DVector::zeros(members.len());
            for (r, &(i, t)) in members.iter().enumerate() {
                let h = self.hidden(&cell_input(ds, resid, i, t, ds.z(i, t))?)?;
                for j in 0..d {
                    x[(r, j)] = h[j];
                }
                x[(r, d)] = 1.0;
                y[r] = ds.y(i, t);
            }
            let fit = ols_fit_with_fallback(&x, &y)?;
            if fit.ridge {
                ridge.push(k);
            }
            self.centers[k] = fit.coef.iter().copied().collect();
        }
        for i in 0..self.n_units() {
            self.heads[i] = self.centers[self.assignment[i]].clone();
        }
        Ok(ridge)
    }

    /// Relabels and rescales the final hidden coordinates: new coordinate `j` is
    /// `scales[j]` times old coordinate `perm[j]`. Heads, centres and the hidden
    /// normalisation are transformed so that predictions are unchanged.
    pub fn apply_symmetry(&self, perm: &[usize], scales: &[f64]) -> Result<Self> {
        let d = self.hidden_dim();
        if perm.len() != d || scales.len() != d {
            return Err(Error::DimMismatch { expected: d, found: perm.len().min(scales.len()) });
        }
        let mut seen = vec![false; d];
        for &p in perm {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("{perm:?} is not a permutation of 0..{d}")));
            }
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::BadScale(format!("scale {s} is not strictly positive")));
        }
        let last = self.backbone.layers.last().expect("non-empty backbone");
        if !last.activation.is_positively_homogeneous() && scales.iter().any(|&s| s != 1.0) {
            return Err(Error::BadScale(format!(
                "{:?} final layer only admits permutations",
                last.activation
            )));
        }
        let mut out = self.clone();
        let layer = out.backbone.layers.last_mut().expect("non-empty backbone");
        for j in 0..d {
            let (p, s) = (perm[j], scales[j]);
            for c in 0..last.inputs() {
                layer.weights[(j, c)] = s * last.weights[(p, c)];
            }
            layer.bias[j] = s * last.bias[p];
            out.hidden_norm.loc[j] = s * self.hidden_norm.loc[p];
            out.hidden_norm.scale[j] = s * self.hidden_norm.scale[p];
        }
        let permute = |v: &Vec<f64>| {
            let mut w: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
            w.push(v[d]);
            w
        };
        out.heads = self.heads.iter().map(permute).collect();
        out.centers = self.centers.iter().map(permute).collect();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Shared recursion for multi-step forecasts: `step(t, z)` predicts period `t` from
/// covariates `z`, whose lagged-outcome entries inside `start..` have been replaced
/// by the earlier predictions.
pub fn recursive_forecast<F>(
    lags: &[LaggedOutcome],
    ds: &PanelDataset,
    i: usize,
    start: usize,
    h: usize,
    mut step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    if start + h > ds.n_periods() || i >= ds.n_units() {
        return Err(Error::MissingFeatures(format!(
            "forecast window {start}..{} for unit {i} exceeds the panel",
            start + h
        )));
    }
    let mut preds: Vec<f64> = Vec::with_capacity(h);
    for s in 0..h {
        let t = start + s;
        let mut z = ds.z(i, t).to_vec();
        for l in lags {
            if t >= start + l.lag {
                z[l.column] = preds[t - l.lag - start];
            }
        }
        preds.push(step(t, &z)?);
    }
    Ok(preds)
}

/// Cells of all units over a range of periods, unit-major.
pub fn cells_in(n_units: usize, periods: Range<usize>) -> Vec<(usize, usize)> {
    (0..n_units).flat_map(|i| periods.clone().map(move |t| (i, t))).collect()
}
