//! End-to-end fitting and the simulated method comparison.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_lpm, fit_lpm_e, pmse, FeatureSpec};
use crate::conformal::{calibrate, coverage, ConformalCalibration, IntervalRow};
use crate::deep_panel::{fit_deep_panel, DeepPanelConfig, DeepPanelModel, TrainReport};
use crate::panel::{ChronoSplit, PanelDataset};
use crate::rng::child_seed;
use crate::surrogate::{build_residual_panel, ResidualPanel, SurrogateConfig, SurrogateModel};
use crate::synth::{simulate_panel, SimConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpmConfig {
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub deep_panel: DeepPanelConfig,
}

#[derive(Debug, Clone)]
pub struct LdpmFit {
    pub surrogates: Vec<SurrogateModel>,
    pub residuals: ResidualPanel,
    pub model: DeepPanelModel,
    pub report: TrainReport,
}

impl LdpmFit {
    pub fn predict_h_step(&self, ds: &PanelDataset, i: usize, start: usize, h: usize) -> Result<Vec<f64>> {
        self.model.predict_h_step(ds, &self.residuals, i, start, h)
    }
}

/// Stage 1 on `train`, then Stage 2 on the same periods.
pub fn fit_ldpm(ds: &PanelDataset, train: Range<usize>, cfg: &LdpmConfig, seed: u64) -> Result<LdpmFit> {
    let (surrogates, residuals) = build_residual_panel(ds, train.clone(), &cfg.surrogate, seed)?;
    let (model, report) = fit_deep_panel(ds, &residuals, train, &cfg.deep_panel, seed)?;
    Ok(LdpmFit { surrogates, residuals, model, report })
}

#[derive(Debug, Clone)]
pub struct ConformalRun {
    pub fit: LdpmFit,
    pub calibration: ConformalCalibration,
    pub rows: Vec<IntervalRow>,
    pub coverage: f64,
}

/// Fits LDPM on the training periods, calibrates group-wise cutoffs on one-step
/// predictions of the calibration periods and builds intervals for the test window.
pub fn run_conformal(ds: &PanelDataset, split: &ChronoSplit, cfg: &LdpmConfig, alpha: f64, seed: u64) -> Result<ConformalRun> {
    split.check(ds.n_periods())?;
    let fit = fit_ldpm(ds, split.train(), cfg, seed)?;
    let model = &fit.model;
    let one_step = |periods: Range<usize>| -> Result<(Vec<f64>, Vec<f64>, Vec<(usize, usize)>)> {
        let cells: Vec<(usize, usize)> = (0..ds.n_units()).flat_map(|i| periods.clone().map(move |t| (i, t))).collect();
        let pred = cells.iter().map(|&(i, t)| model.predict_one_step(ds, &fit.residuals, i, t)).collect::<Result<Vec<_>>>()?;
        let truth = cells.iter().map(|&(i, t)| ds.y(i, t)).collect();
        Ok((pred, truth, cells))
    };
    let (pred, truth, cells) = one_step(split.calibration())?;
    let groups: Vec<usize> = cells.iter().map(|&(i, _)| model.assignment[i]).collect();
    let calibration = calibrate(&pred, &truth, &groups, model.n_groups(), alpha)?;
    let (pred, truth, cells) = one_step(split.test())?;
    let mut rows = Vec::with_capacity(cells.len());
    let mut intervals = Vec::with_capacity(cells.len());
    for ((&(i, t), &yhat), &y) in cells.iter().zip(&pred).zip(&truth) {
        let group = model.assignment[i];
        let (lo, hi) = calibration.interval(yhat, group)?;
        intervals.push((lo, hi));
        rows.push(IntervalRow {
            unit: ds.unit_labels[i].clone(),
            period: ds.period_labels[t],
            group,
            yhat,
            lo,
            hi,
            truth: y,
            covered: lo <= y && y <= hi,
        });
    }
    let coverage = coverage(&intervals, &truth)?;
    Ok(ConformalRun { fit, calibration, rows, coverage })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lpm,
    LpmE,
    Ldpm,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Lpm => "LPM",
            Method::LpmE => "LPM-E",
            Method::Ldpm => "LDPM",
        }
    }
}

/// Training periods and test window for horizon `h` on a panel of `n_periods`:
/// the last `h` periods are the test window and the period before it is left out.
pub fn horizon_split(n_periods: usize, h: usize) -> Result<(Range<usize>, Range<usize>)> {
    if h == 0 || h + 2 > n_periods {
        return Err(Error::BadSplit(format!("horizon {h} does not fit {n_periods} periods")));
    }
    Ok((0..n_periods - h - 1, n_periods - h..n_periods))
}

/// PMSE of every method over the recursive forecast window for horizon `h`.
pub fn evaluate_methods(
    ds: &PanelDataset,
    h: usize,
    methods: &[Method],
    r0: usize,
    ldpm: &LdpmConfig,
    seed: u64,
) -> Result<Vec<(Method, f64)>> {
    let (train, test) = horizon_split(ds.n_periods(), h)?;
    let truth: Vec<f64> = (0..ds.n_units()).flat_map(|i| test.clone().map(move |t| (i, t))).map(|(i, t)| ds.y(i, t)).collect();
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut pred = Vec::with_capacity(truth.len());
        match m {
            Method::Lpm | Method::LpmE => {
                let model = if m == Method::Lpm {
                    fit_lpm(ds, FeatureSpec::MacroOnly, train.clone())?
                } else {
                    fit_lpm_e(ds, r0, train.clone())?
                };
                for i in 0..ds.n_units() {
                    pred.extend(model.predict_h_step(ds, i, test.start, h)?);
                }
            }
            Method::Ldpm => {
                let fit = fit_ldpm(ds, train.clone(), ldpm, seed)?;
                for i in 0..ds.n_units() {
                    pred.extend(fit.predict_h_step(ds, i, test.start, h)?);
                }
            }
        }
        out.push((m, pmse(&pred, &truth)?));
    }
    Ok(out)
}

fn default_rhos() -> Vec<f64> { vec![0.5] }
fn default_horizons() -> Vec<usize> { vec![8] }
fn default_reps() -> usize { 50 }
fn default_r0() -> usize { 20 }
fn default_methods() -> Vec<Method> { vec![Method::Lpm, Method::LpmE, Method::Ldpm] }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    /// Base simulation; `rho` and `seed` are overridden per grid cell and replication.
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_r0")]
    pub r0: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub ldpm: LdpmConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub rho: f64,
    pub rep: usize,
    pub horizon: usize,
    pub method: Method,
    pub pmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmseRow {
    pub method: Method,
    pub horizon: usize,
    pub rho: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmseTable {
    pub rows: Vec<PmseRow>,
    pub replications: Vec<ReplicationResult>,
}

/// Mean and standard error of the mean (sample standard deviation / sqrt(n)).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Replication `rep` uses the simulation seed `child_seed(seed, rep)` for every rho,
/// so the rho comparison is made on common random numbers.
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    child_seed(seed, rep as u64)
}

pub fn run_comparison(cfg: &ComparisonConfig) -> Result<PmseTable> {
    if cfg.n_reps == 0 || cfg.rhos.is_empty() || cfg.horizons.is_empty() || cfg.methods.is_empty() {
        return Err(Error::Config("comparison grid is empty".into()));
    }
    let jobs: Vec<(f64, usize)> = cfg.rhos.iter().flat_map(|&r| (0..cfg.n_reps).map(move |k| (r, k))).collect();
    let results: Vec<Result<Vec<ReplicationResult>>> = jobs
        .par_iter()
        .map(|&(rho, rep)| {
            let seed = replication_seed(cfg.seed, rep);
            let sim = simulate_panel(&SimConfig { rho, seed, ..cfg.sim.clone() })?;
            let mut out = Vec::new();
            for &h in &cfg.horizons {
                for (method, v) in evaluate_methods(&sim.dataset, h, &cfg.methods, cfg.r0, &cfg.ldpm, seed)? {
                    out.push(ReplicationResult { rho, rep, horizon: h, method, pmse: v });
                }
            }
            Ok(out)
        })
        .collect();
    let mut replications = Vec::new();
    for r in results {
        replications.extend(r?);
    }
    Ok(PmseTable::from_replications(&cfg.methods, &cfg.horizons, &cfg.rhos, replications))
}

impl PmseTable {
    pub fn from_replications(methods: &[Method], horizons: &[usize], rhos: &[f64], replications: Vec<ReplicationResult>) -> Self {
        let mut rows = Vec::new();
        for &rho in rhos {
            for &method in methods {
                for &horizon in horizons {
                    let v: Vec<f64> = replications
                        .iter()
                        .filter(|r| r.rho == rho && r.method == method && r.horizon == horizon)
                        .map(|r| r.pmse)
                        .collect();
                    if v.is_empty() {
                        continue;
                    }
                    let (mean, stderr) = mean_stderr(&v);
                    rows.push(PmseRow { method, horizon, rho, mean, stderr, n_reps: v.len() });
                }
            }
        }
        Self { rows, replications }
    }

    pub fn get(&self, method: Method, horizon: usize, rho: f64) -> Option<&PmseRow> {
        self.rows.iter().find(|r| r.method == method && r.horizon == horizon && r.rho == rho)
    }

    /// Per-replication PMSE for one grid cell, ordered by replication.
    pub fn values(&self, method: Method, horizon: usize, rho: f64) -> Vec<f64> {
        let mut v: Vec<&ReplicationResult> = self
            .replications
            .iter()
            .filter(|r| r.method == method && r.horizon == horizon && r.rho == rho)
            .collect();
        v.sort_by_key(|r| r.rep);
        v.iter().map(|r| r.pmse).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,horizon,rho,mean,stderr,n_reps\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.method.label(), r.horizon, r.rho, r.mean, r.stderr, r.n_reps);
        }
        s
    }

    /// One block per rho: methods as rows, horizons as columns, plus the row average.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# PMSE(H) by method\n");
        let mut rhos: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !rhos.contains(&r.rho) {
                rhos.push(r.rho);
            }
        }
        for rho in rhos {
            let rows: Vec<&PmseRow> = self.rows.iter().filter(|r| r.rho == rho).collect();
            let mut horizons: Vec<usize> = rows.iter().map(|r| r.horizon).collect();
            horizons.sort_unstable();
            horizons.dedup();
            let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
            methods.dedup();
            let _ = writeln!(s, "\n## rho = {rho}\n");
            let head: Vec<String> = horizons.iter().map(|h| format!("H={h}")).collect();
            let _ = writeln!(s, "| Method | {} | Avg |", head.join(" | "));
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(horizons.len()));
            for m in methods {
                let vals: Vec<f64> = horizons
                    .iter()
                    .map(|&h| rows.iter().find(|r| r.method == m && r.horizon == h).map_or(f64::NAN, |r| r.mean))
                    .collect();
                let avg = vals.iter().sum::<f64>() / vals.len() as f64;
                let cells: Vec<String> = vals.iter().map(|v| format!("{v:.3}")).collect();
                let _ = writeln!(s, "| {} | {} | {avg:.3} |", m.label(), cells.join(" | "));
            }
        }
        s
    }
}
