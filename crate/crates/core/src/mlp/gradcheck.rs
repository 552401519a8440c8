use nalgebra::DMatrix;

use super::FeedForwardNet;

/// Mean over the batch of the summed squared output error, and its gradient at the output.
pub fn mse_loss(output: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let b = output.ncols().max(1) as f64;
    let diff = output - targets;
    let loss = diff.norm_squared() / b;
    (loss, diff * (2.0 / b))
}

fn loss_at(net: &FeedForwardNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let cache = net.forward_batch(inputs).expect("input dimension checked by caller");
    mse_loss(cache.output(), targets).0
}

/// Largest `|analytic - central difference| / (|analytic| + 1e-8)` over all parameters
/// for the squared-error loss of [`mse_loss`].
pub fn grad_check(net: &FeedForwardNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, fd_step: f64) -> f64 {
    let cache = net.forward_batch(inputs).expect("input dimension matches the network");
    let (_, grad_out) = mse_loss(cache.output(), targets);
    let grads = net.backward(&cache, &grad_out);
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut offset = 0;
    let n_blocks = probe.param_slices_mut().len();
    for block in 0..n_blocks {
        let len = probe.param_slices_mut()[block].len();
        for j in 0..len {
            let orig = probe.param_slices_mut()[block][j];
            probe.param_slices_mut()[block][j] = orig + fd_step;
            let up = loss_at(&probe, inputs, targets);
            probe.param_slices_mut()[block][j] = orig - fd_step;
            let down = loss_at(&probe, inputs, targets);
            probe.param_slices_mut()[block][j] = orig;
            let fd = (up - down) / (2.0 * fd_step);
            let a = analytic[offset + j];
            worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
        }
        offset += len;
    }
    worst
}
