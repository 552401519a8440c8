//! Initial-gradient comparison between a direct surrogate regressor and a
//! surrogate-residual regressor.
//!
//! For the squared loss `mean((y - a s)^2) / 2` at `a = 0` the gradient is
//! `-mean(y s)`. With `s = y_s` (direct) the optimiser sees the whole shared
//! signal; with `s = residual` it only sees what the surrogate model left over.

use serde::{Deserialize, Serialize};

use crate::panel::PanelDataset;
use crate::surrogate::ResidualPanel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub grad_direct: f64,
    pub grad_residual: f64,
    pub n_cells: usize,
}

impl ShortcutReport {
    pub fn ratio(&self) -> f64 {
        self.grad_direct.abs() / (self.grad_residual.abs() + 1e-12)
    }
}

/// `(-mean(y * y_s), -mean(y * residual))` for already centred series.
pub fn shortcut_gradients(y: &[f64], y_s: &[f64], residual: &[f64]) -> Result<(f64, f64)> {
    if y.len() != y_s.len() || y.len() != residual.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: y_s.len().min(residual.len()) });
    }
    if y.is_empty() {
        return Err(Error::InsufficientData("no cells for the shortcut diagnostic".into()));
    }
    let n = y.len() as f64;
    let direct = -y.iter().zip(y_s).map(|(a, b)| a * b).sum::<f64>() / n;
    let resid = -y.iter().zip(residual).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok((direct, resid))
}

/// Runs [`shortcut_gradients`] on the monthly series of the given cells, each
/// series centred within unit. Months without posts are skipped.
pub fn shortcut_diagnostic(ds: &PanelDataset, resid: &ResidualPanel, cells: &[(usize, usize)]) -> Result<ShortcutReport> {
    let mut per_unit: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); ds.n_units()];
    for &(i, t) in cells {
        if let Some(s) = ds.month_score(i, t) {
            per_unit[i].push((ds.y(i, t), s, resid.features(i, t)[0]));
        }
    }
    let (mut y, mut ys, mut e) = (Vec::new(), Vec::new(), Vec::new());
    for rows in per_unit.iter().filter(|r| !r.is_empty()) {
        let m = rows.len() as f64;
        let my = rows.iter().map(|r| r.0).sum::<f64>() / m;
        let ms = rows.iter().map(|r| r.1).sum::<f64>() / m;
        let me = rows.iter().map(|r| r.2).sum::<f64>() / m;
        for r in rows {
            y.push(r.0 - my);
            ys.push(r.1 - ms);
            e.push(r.2 - me);
        }
    }
    let (grad_direct, grad_residual) = shortcut_gradients(&y, &ys, &e)?;
    Ok(ShortcutReport { grad_direct, grad_residual, n_cells: y.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_surrogate_gives_minus_mean_square() {
        let y = [0.5, -1.0, 0.25, 0.25];
        let (d, _) = shortcut_gradients(&y, &y, &[0.0; 4]).unwrap();
        assert!((d + (0.25 + 1.0 + 0.0625 + 0.0625) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (_, r) = shortcut_gradients(&[1.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, 0.0);
        assert!(shortcut_gradients(&[1.0], &[], &[]).is_err());
    }
}
