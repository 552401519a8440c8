//! Group-wise split conformal intervals and Monte-Carlo harnesses.
//!
//! Scores are absolute residuals on calibration cells. For a group with `m`
//! scores the cutoff is the order statistic at rank `ceil((m + 1)(1 - alpha))`;
//! when that rank exceeds `m` the largest score is used and the group is
//! flagged as degenerate.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    /// Ascending scores.
    pub scores: Vec<f64>,
    pub rank: usize,
    pub q: f64,
    /// The rank exceeded the number of scores and `q` is the largest score.
    pub degenerate: bool,
}

impl GroupCalibration {
    pub fn m(&self) -> usize {
        self.scores.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub groups: Vec<GroupCalibration>,
}

/// Rank `ceil((m + 1)(1 - alpha))`, guarded against representation error in the product.
pub fn conformal_rank(m: usize, alpha: f64) -> usize {
    ((m as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

/// Cutoff of ascending `scores` at level `alpha`: `(q, rank, degenerate)`.
pub fn conformal_quantile(sorted: &[f64], alpha: f64) -> (f64, usize, bool) {
    let rank = conformal_rank(sorted.len(), alpha);
    if rank > sorted.len() {
        (*sorted.last().expect("non-empty scores"), rank, true)
    } else {
        (sorted[rank - 1], rank, false)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Calibrates one cutoff per group from aligned predictions, truths and group labels.
pub fn calibrate(pred: &[f64], truth: &[f64], groups: &[usize], n_groups: usize, alpha: f64) -> Result<ConformalCalibration> {
    check_alpha(alpha)?;
    if pred.len() != truth.len() || pred.len() != groups.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len().min(groups.len()) });
    }
    let mut scores = vec![Vec::new(); n_groups];
    for ((p, y), &g) in pred.iter().zip(truth).zip(groups) {
        if g >= n_groups {
            return Err(Error::UnknownGroup(g));
        }
        scores[g].push((y - p).abs());
    }
    let groups = scores
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            if s.is_empty() {
                return Err(Error::EmptyGroup(format!("group {k} has no calibration cells")));
            }
            s.sort_by(f64::total_cmp);
            let (q, rank, degenerate) = conformal_quantile(&s, alpha);
            Ok(GroupCalibration { scores: s, rank, q, degenerate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConformalCalibration { alpha, groups })
}

impl ConformalCalibration {
    /// `[yhat - q_k, yhat + q_k]`.
    pub fn interval(&self, yhat: f64, group: usize) -> Result<(f64, f64)> {
        let g = self.groups.get(group).ok_or(Error::UnknownGroup(group))?;
        Ok((yhat - g.q, yhat + g.q))
    }
}

/// Share of truths inside their closed intervals.
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() {
        return Err(Error::LengthMismatch { left: intervals.len(), right: truths.len() });
    }
    if truths.is_empty() {
        return Err(Error::InsufficientData("no intervals".into()));
    }
    let hit = intervals.iter().zip(truths).filter(|((lo, hi), y)| lo <= *y && *y <= hi).count();
    Ok(hit as f64 / truths.len() as f64)
}

/// Coverage within each group; `None` for groups without test cells.
pub fn coverage_by_group(intervals: &[(f64, f64)], truths: &[f64], groups: &[usize], n_groups: usize) -> Result<Vec<Option<f64>>> {
    if groups.len() != truths.len() {
        return Err(Error::LengthMismatch { left: groups.len(), right: truths.len() });
    }
    (0..n_groups)
        .map(|k| {
            let idx: Vec<usize> = (0..groups.len()).filter(|&j| groups[j] == k).collect();
            if idx.is_empty() {
                return Ok(None);
            }
            let iv: Vec<(f64, f64)> = idx.iter().map(|&j| intervals[j]).collect();
            let ys: Vec<f64> = idx.iter().map(|&j| truths[j]).collect();
            coverage(&iv, &ys).map(Some)
        })
        .collect()
}

fn abs_normal(rng: &mut rng::Rng, sigma: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| (sigma * rng.sample::<f64, _>(StandardNormal)).abs()).collect()
}

/// Empirical test coverage for `n_reps` replications of i.i.d. standard normal
/// residuals: `m` calibration scores and `n_test` test residuals each.
pub fn coverage_experiment(m: usize, n_test: usize, alpha: f64, n_reps: usize, seed: u64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if m == 0 || n_test == 0 {
        return Err(Error::InsufficientData("empty calibration or test set".into()));
    }
    Ok((0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(rng::child_seed(seed, rep as u64), streams::DIAGNOSTICS);
            let mut cal = abs_normal(&mut rng, 1.0, m);
            cal.sort_by(f64::total_cmp);
            let (q, _, _) = conformal_quantile(&cal, alpha);
            let test = abs_normal(&mut rng, 1.0, n_test);
            test.iter().filter(|&&s| s <= q).count() as f64 / n_test as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRatio {
    pub mean: f64,
    pub stderr: f64,
    pub ratios: Vec<f64>,
}

/// Ratio of conformal cutoffs of the joint model (oracle scores `|N(0, sigma_e^2)|`)
/// to the target-only model (`|N(0, sigma_eps^2)|`), each calibrated on `m` scores.
pub fn length_ratio_experiment(
    sigma_eps: f64,
    sigma_e: f64,
    m: usize,
    alpha: f64,
    n_reps: usize,
    seed: u64,
) -> Result<LengthRatio> {
    if !(sigma_e > 0.0 && sigma_e <= sigma_eps && sigma_eps.is_finite()) {
        return Err(Error::BadSigma(format!("need 0 < sigma_e <= sigma_eps, got {sigma_e} and {sigma_eps}")));
    }
    check_alpha(alpha)?;
    if m == 0 || n_reps == 0 {
        return Err(Error::InsufficientData("empty experiment".into()));
    }
    let ratios: Vec<f64> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(rng::child_seed(seed, rep as u64), streams::DIAGNOSTICS);
            let mut target = abs_normal(&mut rng, sigma_eps, m);
            let mut joint = abs_normal(&mut rng, sigma_e, m);
            target.sort_by(f64::total_cmp);
            joint.sort_by(f64::total_cmp);
            conformal_quantile(&joint, alpha).0 / conformal_quantile(&target, alpha).0
        })
        .collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = if ratios.len() > 1 { ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(LengthRatio { mean, stderr: (var / n).sqrt(), ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub unit: String,
    pub period: i64,
    pub group: usize,
    pub yhat: f64,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
    pub covered: bool,
}

pub fn write_intervals_csv(rows: &[IntervalRow], path: &Path) -> Result<()> {
    let mut buf = String::from("unit,period,group,yhat,lo,hi,truth,covered\n");
    for r in rows {
        buf.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.unit, r.period, r.group, r.yhat, r.lo, r.hi, r.truth, r.covered
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(buf.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
