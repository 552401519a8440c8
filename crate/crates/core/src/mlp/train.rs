use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use super::{mse_loss, Adam, AdamConfig, FeedForwardNet};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

/// Column-major design (`dim x n`) and targets (`out x n`).
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl RegressionData {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.inputs.select_columns(idx), self.targets.select_columns(idx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Mini-batch Adam on the squared error, keeping the parameters with the lowest
/// validation loss (or the last epoch when no validation data is given).
pub fn fit_regression(
    net: &mut FeedForwardNet,
    train: &RegressionData,
    val: Option<&RegressionData>,
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let mut opt = Adam::new(opts.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut summary = FitSummary { epochs: 0, best_epoch: 0, train_loss: Vec::new(), val_loss: Vec::new() };
    let mut since_best = 0;
    let bs = opts.batch_size.max(1);

    for epoch in 0..opts.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let (x, y) = train.select(chunk);
            let cache = net.forward_batch(&x)?;
            let (loss, grad_out) = mse_loss(cache.output(), &y);
            total += loss * chunk.len() as f64;
            let grads = net.backward(&cache, &grad_out);
            let g = grads.slices();
            opt.step(&mut net.param_slices_mut(), &g);
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() || !net.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}")));
        }
        summary.train_loss.push(train_loss);
        summary.epochs = epoch + 1;

        let monitored = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let cache = net.forward_batch(&v.inputs)?;
                let l = mse_loss(cache.output(), &v.targets).0;
                summary.val_loss.push(l);
                l
            }
            None => train_loss,
        };
        if monitored < best.0 {
            best = (monitored, net.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if val.is_some() && since_best >= opts.patience {
                break;
            }
        }
    }
    *net = best.1;
    summary.best_epoch = best.2;
    Ok(summary)
}
