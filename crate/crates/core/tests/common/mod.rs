#![allow(dead_code)]

use ldpm_core::panel::{LaggedOutcome, MonthObs, PanelDataset};

/// Builds a balanced panel from per-post closures. `post(i, t, k)` returns the
/// embedding and score of post `k`; `y(i, t)` the outcome; `z(i, t)` the covariates.
pub fn panel(
    n: usize,
    t_len: usize,
    d_x: usize,
    k_posts: usize,
    mut post: impl FnMut(usize, usize, usize) -> (Vec<f64>, f64),
    mut y: impl FnMut(usize, usize) -> f64,
    d_z: usize,
    mut z: impl FnMut(usize, usize) -> Vec<f64>,
) -> PanelDataset {
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let mut cells = Vec::new();
    for i in 0..n {
        for t in 0..t_len {
            let mut cell = MonthObs::default();
            for k in 0..k_posts {
                let (x, s) = post(i, t, k);
                assert_eq!(x.len(), d_x);
                cell.days.push(k as i64 + 1);
                cell.x.extend(x);
                cell.scores.push(s);
            }
            cells.push(cell);
            ys.push(y(i, t));
            let zv = z(i, t);
            assert_eq!(zv.len(), d_z);
            zs.extend(zv);
        }
    }
    PanelDataset::new(n, t_len, d_x, d_z, ys, zs, cells).unwrap()
}

/// Panel whose single covariate is the previous outcome (zero in the first period).
pub fn with_lag_covariate(ds_y: &[Vec<f64>], d_x: usize, k_posts: usize, mut post: impl FnMut(usize, usize, usize) -> (Vec<f64>, f64)) -> PanelDataset {
    let n = ds_y.len();
    let t_len = ds_y[0].len();
    panel(
        n,
        t_len,
        d_x,
        k_posts,
        &mut post,
        |i, t| ds_y[i][t],
        1,
        |i, t| vec![if t == 0 { 0.0 } else { ds_y[i][t - 1] }],
    )
    .with_lagged_outcomes(vec![LaggedOutcome { column: 0, lag: 1 }])
    .unwrap()
}
