use std::path::Path;

use ldpm_core::conformal::write_intervals_csv;
use ldpm_core::deep_panel::{cell_input, cells_in, grad_check_model, shortcut_diagnostic, DeepPanelModel, ShortcutReport, TrainReport};
use ldpm_core::mlp::grad_check;
use ldpm_core::panel::{save_dataset, PanelDataset};
use ldpm_core::pipeline::{fit_ldpm, run_comparison, run_conformal};
use ldpm_core::rng::{self, streams};
use ldpm_core::synth::simulate_panel;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(ldpm_core::Error::from)?;
    s.push('\n');
    write(path, &s)
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut sim_cfg = cfg.sim.clone().unwrap_or_default();
    sim_cfg.seed = cfg.seed;
    let sim = simulate_panel(&sim_cfg)?;
    save_dataset(&sim.dataset, out)?;
    write_json(&out.join("truth.json"), &sim.truth)
}

#[derive(Serialize)]
struct FitReport<'a> {
    seed: u64,
    train_periods: usize,
    test_periods: usize,
    /// One-step PMSE over the test window, observed covariates.
    test_pmse_one_step: Option<f64>,
    /// PMSE of recursive forecasts over the test window.
    test_pmse_recursive: Option<f64>,
    ridge_groups: &'a [usize],
    train: &'a TrainReport,
}

fn test_pmse(model: &DeepPanelModel, ds: &PanelDataset, resid: &ldpm_core::surrogate::ResidualPanel, test: std::ops::Range<usize>) -> Result<(f64, f64), CliError> {
    let mut one = Vec::new();
    let mut rec = Vec::new();
    let mut truth = Vec::new();
    for i in 0..ds.n_units() {
        for t in test.clone() {
            one.push(model.predict_one_step(ds, resid, i, t)?);
            truth.push(ds.y(i, t));
        }
        rec.extend(model.predict_h_step(ds, resid, i, test.start, test.len())?);
    }
    Ok((ldpm_core::baselines::pmse(&one, &truth)?, ldpm_core::baselines::pmse(&rec, &truth)?))
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let (train, test) = match &cfg.split {
        Some(s) => {
            s.check(ds.n_periods())?;
            (s.train(), Some(s.test()))
        }
        None => (0..ds.n_periods(), None),
    };
    let fit = fit_ldpm(&ds, train.clone(), &cfg.ldpm, cfg.seed)?;
    let (one, rec) = match &test {
        Some(t) => {
            let (a, b) = test_pmse(&fit.model, &ds, &fit.residuals, t.clone())?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    write(&out.join("model.json"), &(fit.model.to_json()? + "\n"))?;
    write_json(&out.join("surrogates.json"), &fit.surrogates)?;
    fit.residuals.write_csv(&ds, &out.join("residuals.csv"))?;
    let report = FitReport {
        seed: cfg.seed,
        train_periods: train.len(),
        test_periods: test.as_ref().map_or(0, |t| t.len()),
        test_pmse_one_step: one,
        test_pmse_recursive: rec,
        ridge_groups: &fit.report.ridge_groups,
        train: &fit.report,
    };
    write_json(&out.join("report.json"), &report)
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut grid = cfg.comparison.clone().unwrap_or_default();
    grid.seed = cfg.seed;
    let table = run_comparison(&grid)?;
    write(&out.join("pmse_table.csv"), &table.to_csv())?;
    write(&out.join("summary.md"), &table.to_markdown())
}

#[derive(Serialize)]
struct GroupSummary {
    m: usize,
    rank: usize,
    q: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct ConformalSummary {
    alpha: f64,
    coverage: f64,
    n_intervals: usize,
    groups: Vec<GroupSummary>,
}

pub fn conformal(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let run = run_conformal(&ds, cfg.require_split()?, &cfg.ldpm, cfg.alpha, cfg.seed)?;
    write_intervals_csv(&run.rows, &out.join("intervals.csv"))?;
    let summary = ConformalSummary {
        alpha: cfg.alpha,
        coverage: run.coverage,
        n_intervals: run.rows.len(),
        groups: run
            .calibration
            .groups
            .iter()
            .map(|g| GroupSummary { m: g.m(), rank: g.rank, q: g.q, degenerate: g.degenerate })
            .collect(),
    };
    write_json(&out.join("conformal.json"), &summary)
}

#[derive(Serialize)]
struct SymmetryReport {
    permutation: Vec<usize>,
    scales: Vec<f64>,
    n_inputs: usize,
    max_abs_prediction_change: f64,
    assignment_unchanged: bool,
}

#[derive(Serialize)]
struct Diagnostics {
    symmetry: SymmetryReport,
    surrogate_grad_check: f64,
    model_grad_check: f64,
    shortcut: ShortcutReport,
    shortcut_ratio: f64,
}

const KINK_MARGIN: f64 = 1e-3;

pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let train = match &cfg.split {
        Some(s) => {
            s.check(ds.n_periods())?;
            s.train()
        }
        None => 0..ds.n_periods(),
    };
    let fit = fit_ldpm(&ds, train.clone(), &cfg.ldpm, cfg.seed)?;
    let model = &fit.model;
    let mut rng = rng::stream(cfg.seed, streams::DIAGNOSTICS);

    let d = model.hidden_dim();
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let homogeneous = model.backbone.layers.last().is_some_and(|l| l.activation.is_positively_homogeneous());
    let scales: Vec<f64> = (0..d).map(|_| if homogeneous { rng.random_range(0.5..2.0) } else { 1.0 }).collect();
    let moved = model.apply_symmetry(&perm, &scales)?;
    let mut max_change = 0.0f64;
    for _ in 0..cfg.symmetry_inputs {
        let i = rng.random_range(0..model.n_units());
        let raw: Vec<f64> = model
            .input_norm
            .loc
            .iter()
            .zip(&model.input_norm.scale)
            .map(|(l, s)| l + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        max_change = max_change.max((model.predict_input(i, &raw)? - moved.predict_input(i, &raw)?).abs());
    }
    let symmetry = SymmetryReport {
        permutation: perm,
        scales,
        n_inputs: cfg.symmetry_inputs,
        max_abs_prediction_change: max_change,
        assignment_unchanged: moved.assign_groups() == model.assign_groups(),
    };

    // Finite differences are only meaningful away from relu kinks.
    let net = &fit.surrogates[0].net;
    let batch = 8;
    let mut x = DMatrix::from_fn(net.input_dim(), batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    for _ in 0..1000 {
        if net.relu_margins(&x)?.iter().all(|&m| m > KINK_MARGIN) {
            break;
        }
        x = DMatrix::from_fn(net.input_dim(), batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    }
    let y = DMatrix::from_fn(net.output_dim(), batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    let surrogate_grad_check = grad_check(net, &x, &y, 1e-5);

    let mut probe = model.clone();
    for head in &mut probe.heads {
        for v in head.iter_mut() {
            *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut smooth = Vec::new();
    for (i, t) in cells_in(ds.n_units(), train.clone()) {
        if probe.relu_margin(&cell_input(&ds, &fit.residuals, i, t, ds.z(i, t))?)? > KINK_MARGIN {
            smooth.push((i, t));
        }
    }
    if smooth.is_empty() {
        smooth = cells_in(ds.n_units(), train.clone());
    }
    let cells: Vec<(usize, usize)> = (0..16).map(|_| smooth[rng.random_range(0..smooth.len())]).collect();
    let model_grad_check = grad_check_model(&probe, &ds, &fit.residuals, &cells, model.lambda, 1e-5)?;

    let shortcut = shortcut_diagnostic(&ds, &fit.residuals, &cells_in(ds.n_units(), train))?;
    let diag = Diagnostics { symmetry, surrogate_grad_check, model_grad_check, shortcut, shortcut_ratio: shortcut.ratio() };
    write_json(&out.join("diagnostics.json"), &diag)
}
