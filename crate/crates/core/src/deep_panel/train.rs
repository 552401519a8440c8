use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cell_input, cells_in, input_dim, kmeans, min_distance_penalty, product_penalty, DeepPanelConfig, DeepPanelModel};
use crate::mlp::{batch_from_rows, Adam, AdamConfig, FeedForwardNet, Gradients, Standardizer};
use crate::panel::PanelDataset;
use crate::rng::{self, streams};
use crate::surrogate::ResidualPanel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean penalised training loss per epoch, warmup included.
    pub loss: Vec<f64>,
    /// Validation PMSE per penalised epoch.
    pub val_pmse: Vec<f64>,
    pub final_penalty: f64,
    pub final_product_penalty: f64,
    pub group_sizes: Vec<usize>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_pmse: f64,
    /// Groups whose refit needed the ridge fallback.
    pub ridge_groups: Vec<usize>,
}

/// Cells with their raw inputs (`d_in x n`), targets and units.
struct CellData {
    x: DMatrix<f64>,
    y: Vec<f64>,
    unit: Vec<usize>,
}

impl CellData {
    fn build(ds: &PanelDataset, resid: &ResidualPanel, cells: &[(usize, usize)]) -> Result<Self> {
        let rows = cells
            .iter()
            .map(|&(i, t)| cell_input(ds, resid, i, t, ds.z(i, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: batch_from_rows(input_dim(ds), rows.iter().map(|r| r.as_slice())),
            y: cells.iter().map(|&(i, t)| ds.y(i, t)).collect(),
            unit: cells.iter().map(|&(i, _)| i).collect(),
        })
    }

    fn len(&self) -> usize {
        self.y.len()
    }
}

struct ModelGrads {
    backbone: Gradients,
    heads: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
}

/// Loss and gradients on a batch of normalised inputs. The loss is the batch MSE of
/// the per-unit heads plus the min-distance penalty at weight `lambda`.
fn loss_and_grad(model: &DeepPanelModel, x: &DMatrix<f64>, y: &[f64], unit: &[usize], lambda: f64) -> Result<(f64, ModelGrads)> {
    let d = model.hidden_dim();
    let b = y.len() as f64;
    let cache = model.backbone.forward_batch(x)?;
    let mut h = cache.output().clone();
    model.hidden_norm.apply(&mut h);

    let mut heads_g = vec![vec![0.0; d + 1]; model.n_units()];
    let mut grad_h = DMatrix::zeros(d, y.len());
    let mut sse = 0.0;
    for (c, (&yc, &i)) in y.iter().zip(unit).enumerate() {
        let head = &model.heads[i];
        let hc = h.column(c);
        let pred = head[..d].iter().zip(hc.iter()).map(|(a, v)| a * v).sum::<f64>() + head[d];
        let r = yc - pred;
        sse += r * r;
        let g = -2.0 * r / b;
        for j in 0..d {
            heads_g[i][j] += g * hc[j];
            grad_h[(j, c)] = g * head[j] / model.hidden_norm.scale[j];
        }
        heads_g[i][d] += g;
    }
    let backbone = model.backbone.backward(&cache, &grad_h);

    let mut centers_g = vec![vec![0.0; d + 1]; model.n_groups()];
    let mut penalty = 0.0;
    if lambda > 0.0 && model.n_groups() > 0 {
        let w = lambda / model.n_units() as f64;
        for (i, head) in model.heads.iter().enumerate() {
            let (k, sq) = kmeans::nearest(head, &model.centers);
            let dist = sq.sqrt();
            penalty += w * dist;
            if dist > 0.0 {
                for j in 0..=d {
                    let g = w * (head[j] - model.centers[k][j]) / dist;
                    heads_g[i][j] += g;
                    centers_g[k][j] -= g;
                }
            }
        }
    }
    Ok((sse / b + penalty, ModelGrads { backbone, heads: heads_g, centers: centers_g }))
}

fn adam_step(opt: &mut Adam, model: &mut DeepPanelModel, g: &ModelGrads, with_centers: bool) {
    let mut grads: Vec<&[f64]> = g.backbone.slices();
    grads.extend(g.heads.iter().map(|v| v.as_slice()));
    let mut params: Vec<&mut [f64]> = model.backbone.param_slices_mut();
    params.extend(model.heads.iter_mut().map(|v| v.as_mut_slice()));
    if with_centers {
        grads.extend(g.centers.iter().map(|v| v.as_slice()));
        params.extend(model.centers.iter_mut().map(|v| v.as_mut_slice()));
    }
    opt.step(&mut params, &grads);
}

/// Raw hidden activations (`d_h x n`) of normalised inputs.
fn raw_hidden(net: &FeedForwardNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(net.forward_batch(x)?.output().clone())
}

/// PMSE of the per-unit heads on normalised inputs.
fn head_pmse(model: &DeepPanelModel, x: &DMatrix<f64>, data: &CellData) -> Result<f64> {
    let mut h = raw_hidden(&model.backbone, x)?;
    model.hidden_norm.apply(&mut h);
    let sse: f64 = (0..data.len())
        .map(|c| {
            let hc: Vec<f64> = h.column(c).iter().copied().collect();
            let r = data.y[c] - DeepPanelModel::read_out(&model.heads[data.unit[c]], &hc);
            r * r
        })
        .sum();
    Ok(sse / data.len().max(1) as f64)
}

/// Re-expresses every head for a new hidden normalisation so that predictions are unchanged.
fn renormalize(model: &mut DeepPanelModel, new: Standardizer) {
    let d = model.hidden_dim();
    let old = std::mem::replace(&mut model.hidden_norm, new);
    let new = &model.hidden_norm;
    for head in &mut model.heads {
        let mut shift = 0.0;
        for j in 0..d {
            shift += head[j] * (new.loc[j] - old.loc[j]) / old.scale[j];
            head[j] *= new.scale[j] / old.scale[j];
        }
        head[d] += shift;
    }
}

/// Joint training on `train_cells`, early-stopped on the PMSE of `val_cells`.
pub fn train(
    ds: &PanelDataset,
    resid: &ResidualPanel,
    train_cells: &[(usize, usize)],
    val_cells: &[(usize, usize)],
    cfg: &DeepPanelConfig,
    seed: u64,
) -> Result<(DeepPanelModel, TrainReport)> {
    cfg.validate(ds.n_units())?;
    if train_cells.is_empty() {
        return Err(Error::InsufficientData("no training cells".into()));
    }
    let n = ds.n_units();
    let d = cfg.hidden_dim;
    let tr = CellData::build(ds, resid, train_cells)?;
    let va = CellData::build(ds, resid, val_cells)?;
    let input_norm = Standardizer::fit(&tr.x);
    let mut xtr = tr.x.clone();
    input_norm.apply(&mut xtr);
    let mut xva = va.x.clone();
    input_norm.apply(&mut xva);

    let mut rng = rng::stream(seed, streams::BACKBONE);
    let mut sizes = vec![input_dim(ds)];
    sizes.extend(&cfg.hidden);
    sizes.push(d);
    let backbone = FeedForwardNet::new(&sizes, cfg.activation, cfg.terminal, &mut rng);
    let hidden_norm = Standardizer::fit(&raw_hidden(&backbone, &xtr)?);

    let mut heads = vec![vec![0.0; d + 1]; n];
    let mut counts = vec![0usize; n];
    for (&i, &y) in tr.unit.iter().zip(&tr.y) {
        heads[i][d] += y;
        counts[i] += 1;
    }
    for (h, &c) in heads.iter_mut().zip(&counts) {
        h[d] /= c.max(1) as f64;
    }
    let mut model = DeepPanelModel {
        backbone,
        input_norm,
        hidden_norm,
        heads,
        centers: Vec::new(),
        assignment: vec![0; n],
        lambda: cfg.lambda,
        lagged_outcomes: ds.lagged_outcomes.clone(),
        config: cfg.clone(),
        seed,
    };

    let mut report = TrainReport {
        loss: Vec::new(),
        val_pmse: Vec::new(),
        final_penalty: 0.0,
        final_product_penalty: 0.0,
        group_sizes: Vec::new(),
        epochs: 0,
        best_epoch: 0,
        best_val_pmse: f64::NAN,
        ridge_groups: Vec::new(),
    };
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut initial: Option<f64> = None;
    let mut run_epoch = |model: &mut DeepPanelModel, opt: &mut Adam, lambda: f64, with_centers: bool, rng: &mut rng::Rng| -> Result<f64> {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = xtr.select_columns(chunk);
            let y: Vec<f64> = chunk.iter().map(|&c| tr.y[c]).collect();
            let u: Vec<usize> = chunk.iter().map(|&c| tr.unit[c]).collect();
            let (loss, g) = loss_and_grad(model, &x, &y, &u, lambda)?;
            let init = *initial.get_or_insert(loss.max(1e-12));
            if !loss.is_finite() || loss > 1e6 * init {
                return Err(Error::NonFinite(format!("training loss {loss} diverged from initial {init}")));
            }
            total += loss * chunk.len() as f64;
            adam_step(opt, model, &g, with_centers);
        }
        if !model.backbone.is_finite() {
            return Err(Error::NonFinite("backbone parameters".into()));
        }
        Ok(total / tr.len() as f64)
    };

    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut opt = Adam::new(adam);
    for _ in 0..cfg.warmup_epochs {
        let l = run_epoch(&mut model, &mut opt, 0.0, false, &mut rng)?;
        report.loss.push(l);
    }

    let stats = Standardizer::fit(&raw_hidden(&model.backbone, &xtr)?);
    renormalize(&mut model, stats);
    let k0 = cfg.n_groups;
    let mut km_rng = rng::stream(seed, streams::KMEANS);
    model.centers = kmeans(&model.heads, k0, cfg.kmeans_restarts, &mut km_rng);

    let mut opt = Adam::new(adam);
    let ramp = cfg.ramp_epochs.max(1);
    let mut best: Option<(f64, DeepPanelModel, usize)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let lambda = cfg.lambda * ((epoch + 1) as f64 / ramp as f64).min(1.0);
        let l = run_epoch(&mut model, &mut opt, lambda, true, &mut rng)?;
        report.loss.push(l);
        report.epochs = epoch + 1;
        let monitored = if va.len() > 0 { head_pmse(&model, &xva, &va)? } else { l };
        report.val_pmse.push(monitored);
        if epoch + 1 < ramp {
            continue;
        }
        if best.as_ref().is_none_or(|b| monitored < b.0) {
            best = Some((monitored, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if va.len() > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((v, m, e)) = best {
        model = m;
        report.best_val_pmse = v;
        report.best_epoch = e;
    }
    if k0 > 0 && model.centers.is_empty() {
        model.centers = kmeans(&model.heads, k0, cfg.kmeans_restarts, &mut km_rng);
    }
    model.assignment = model.assign_groups();
    report.final_penalty = min_distance_penalty(&model.heads, &model.centers, cfg.lambda);
    report.final_product_penalty = product_penalty(&model.heads, &model.centers, cfg.lambda);
    report.group_sizes = (0..k0).map(|k| model.assignment.iter().filter(|&&g| g == k).count()).collect();
    Ok((model, report))
}

/// Trains on `train_periods` (the trailing `val_periods` held out for early stopping),
/// then refits the centres on every training cell.
pub fn fit_deep_panel(
    ds: &PanelDataset,
    resid: &ResidualPanel,
    train_periods: Range<usize>,
    cfg: &DeepPanelConfig,
    seed: u64,
) -> Result<(DeepPanelModel, TrainReport)> {
    let len = train_periods.len();
    let v = if len > cfg.val_periods + 1 { cfg.val_periods } else { 0 };
    let split = train_periods.end - v;
    let fit_cells = cells_in(ds.n_units(), train_periods.start..split);
    let val_cells = cells_in(ds.n_units(), split..train_periods.end);
    let (mut model, mut report) = train(ds, resid, &fit_cells, &val_cells, cfg, seed)?;
    if cfg.refit {
        report.ridge_groups = model.refit_centers(ds, resid, &cells_in(ds.n_units(), train_periods))?;
    }
    Ok((model, report))
}

/// Largest relative error between the analytic gradient of the penalised loss and
/// central differences, over backbone, head and centre parameters.
/// Penalised loss on `cells` and its analytic gradient, flattened as backbone slices
/// (`W_0, b_0, ...`), then every head, then every centre.
pub fn penalized_loss_gradient(
    model: &DeepPanelModel,
    ds: &PanelDataset,
    resid: &ResidualPanel,
    cells: &[(usize, usize)],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let data = CellData::build(ds, resid, cells)?;
    let mut x = data.x.clone();
    model.input_norm.apply(&mut x);
    let (loss, g) = loss_and_grad(model, &x, &data.y, &data.unit, lambda)?;
    let mut flat: Vec<f64> = g.backbone.slices().iter().flat_map(|s| s.iter().copied()).collect();
    flat.extend(g.heads.iter().flatten());
    flat.extend(g.centers.iter().flatten());
    Ok((loss, flat))
}

/// Largest `|analytic - central difference| / (|analytic| + 1e-8)` of the penalised loss
/// over every model parameter.
pub fn grad_check_model(
    model: &DeepPanelModel,
    ds: &PanelDataset,
    resid: &ResidualPanel,
    cells: &[(usize, usize)],
    lambda: f64,
    fd_step: f64,
) -> Result<f64> {
    let (_, analytic) = penalized_loss_gradient(model, ds, resid, cells, lambda)?;
    let data = CellData::build(ds, resid, cells)?;
    let mut x = data.x.clone();
    model.input_norm.apply(&mut x);
    let loss = |m: &DeepPanelModel| loss_and_grad(m, &x, &data.y, &data.unit, lambda).map(|r| r.0);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut idx = 0;
    let blocks = probe.backbone.param_slices_mut().len() + probe.heads.len() + probe.centers.len();
    for block in 0..blocks {
        let len = param_block(&mut probe, block).len();
        for j in 0..len {
            let orig = param_block(&mut probe, block)[j];
            param_block(&mut probe, block)[j] = orig + fd_step;
            let up = loss(&probe)?;
            param_block(&mut probe, block)[j] = orig - fd_step;
            let down = loss(&probe)?;
            param_block(&mut probe, block)[j] = orig;
            let fd = (up - down) / (2.0 * fd_step);
            let a = analytic[idx];
            worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
            idx += 1;
        }
    }
    Ok(worst)
}

fn param_block(m: &mut DeepPanelModel, block: usize) -> &mut [f64] {
    let nb = 2 * m.backbone.layers.len();
    if block < nb {
        let layer = &mut m.backbone.layers[block / 2];
        return if block.is_multiple_of(2) { layer.weights.as_mut_slice() } else { layer.bias.as_mut_slice() };
    }
    let block = block - nb;
    if block < m.heads.len() {
        &mut m.heads[block]
    } else {
        let k = block - m.heads.len();
        &mut m.centers[k]
    }
}
