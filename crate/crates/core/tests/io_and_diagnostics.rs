//! Dataset files round trip and the shortcut diagnostic on simulated residuals.

use ldpm_core::deep_panel::shortcut_gradients;
use ldpm_core::panel::{load_dataset, save_dataset};
use ldpm_core::rng;
use ldpm_core::synth::{simulate_panel, SimConfig};
use rand::Rng as _;
use rand_distr::StandardNormal;

#[test]
fn simulated_panel_survives_a_file_round_trip() {
    let sim = simulate_panel(&SimConfig { n_units: 3, n_periods: 5, posts_per_period: 2, embed_dim: 3, feature_dim: 4, n_groups: 2, seed: 8, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&sim.dataset, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap().with_lagged_outcomes(sim.dataset.lagged_outcomes.clone()).unwrap();
    assert_eq!(back, sim.dataset);
}

#[test]
fn independent_residual_gradient_is_statistically_zero() {
    let mut r = rng::stream(1, 940);
    let n = 20_000;
    let y: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let e: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let (direct, resid) = shortcut_gradients(&y, &y, &e).unwrap();
    let mean_sq = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    assert!((direct + mean_sq).abs() < 1e-10);
    let prods: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a * b).collect();
    let m = prods.iter().sum::<f64>() / n as f64;
    let sd = (prods.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    assert!(resid.abs() < 3.0 * sd / (n as f64).sqrt(), "{resid}");
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(shortcut_gradients(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
}
