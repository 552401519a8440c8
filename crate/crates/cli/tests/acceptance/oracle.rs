//! Central differences of the training losses evaluated in double-double arithmetic.
//!
//! In plain `f64` the difference quotient at step 1e-5 carries roundoff near
//! `1e-16 |loss| / 1e-5`, which swamps the smallest gradient coordinates. The
//! losses here are re-derived from the stored parameters with about 32
//! significant digits, so the quotient is limited by truncation alone.

use ldpm_core::deep_panel::DeepPanelModel;
use ldpm_core::mlp::{Activation, FeedForwardNet};
use nalgebra::DMatrix;
use twofloat::TwoFloat;

type Dd = TwoFloat;

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

fn activate(act: Activation, z: Dd) -> Dd {
    match act {
        Activation::Identity => z,
        Activation::Relu => {
            if z.hi() > 0.0 {
                z
            } else {
                dd(0.0)
            }
        }
        Activation::Sigmoid => dd(1.0) / (dd(1.0) + (-z).exp()),
    }
}

/// Network parameters in the order `W_0, b_0, W_1, b_1, ...`, weights column-major.
struct DdNet {
    shapes: Vec<(usize, usize, Activation)>,
    params: Vec<Dd>,
}

impl DdNet {
    fn new(net: &FeedForwardNet) -> Self {
        let mut params = Vec::new();
        let mut shapes = Vec::new();
        for l in &net.layers {
            shapes.push((l.weights.nrows(), l.weights.ncols(), l.activation));
            params.extend(l.weights.iter().map(|&v| dd(v)));
            params.extend(l.bias.iter().map(|&v| dd(v)));
        }
        Self { shapes, params }
    }

    fn forward(&self, x: &[Dd]) -> Vec<Dd> {
        let mut a = x.to_vec();
        let mut off = 0;
        for &(rows, cols, act) in &self.shapes {
            let w = &self.params[off..off + rows * cols];
            let b = &self.params[off + rows * cols..off + rows * cols + rows];
            a = (0..rows)
                .map(|r| {
                    let mut z = b[r];
                    for (c, v) in a.iter().enumerate() {
                        z += w[r + c * rows] * *v;
                    }
                    activate(act, z)
                })
                .collect();
            off += rows * cols + rows;
        }
        a
    }
}

fn columns(x: &DMatrix<f64>) -> Vec<Vec<Dd>> {
    x.column_iter().map(|c| c.iter().map(|&v| dd(v)).collect()).collect()
}

fn central(up: Dd, down: Dd, step: f64) -> f64 {
    ((up - down) / (2.0 * step)).hi()
}

fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + 1e-8)
}

/// Mean over the batch of the summed squared output error.
fn net_loss(net: &DdNet, x: &[Vec<Dd>], y: &DMatrix<f64>) -> Dd {
    let mut total = dd(0.0);
    for (c, col) in x.iter().enumerate() {
        for (r, o) in net.forward(col).into_iter().enumerate() {
            let d = o - y[(r, c)];
            total += d * d;
        }
    }
    total / x.len() as f64
}

/// Worst relative error of `analytic` (flattened like [`DdNet`]) against the
/// high-precision central difference of the squared-error loss.
pub fn net_check(net: &FeedForwardNet, x: &DMatrix<f64>, y: &DMatrix<f64>, analytic: &[f64], step: f64) -> (f64, f64) {
    let mut probe = DdNet::new(net);
    let cols = columns(x);
    let loss = net_loss(&probe, &cols, y).hi();
    let mut worst = 0.0f64;
    for j in 0..probe.params.len() {
        let orig = probe.params[j];
        probe.params[j] = orig + step;
        let up = net_loss(&probe, &cols, y);
        probe.params[j] = orig - step;
        let down = net_loss(&probe, &cols, y);
        probe.params[j] = orig;
        worst = worst.max(rel_error(analytic[j], central(up, down, step)));
    }
    (worst, loss)
}

/// The penalised deep-panel loss with heads and centres held separately from the backbone.
struct DdPanel<'a> {
    model: &'a DeepPanelModel,
    x: Vec<Vec<Dd>>,
    y: &'a [f64],
    unit: &'a [usize],
    lambda: f64,
}

impl DdPanel<'_> {
    fn hidden(&self, backbone: &DdNet) -> Vec<Vec<Dd>> {
        let norm = &self.model.hidden_norm;
        self.x
            .iter()
            .map(|col| {
                backbone
                    .forward(col)
                    .into_iter()
                    .enumerate()
                    .map(|(j, h)| (h - norm.loc[j]) / norm.scale[j])
                    .collect()
            })
            .collect()
    }

    fn loss(&self, hidden: &[Vec<Dd>], heads: &[Vec<Dd>], centers: &[Vec<Dd>]) -> Dd {
        let d = self.model.hidden_dim();
        let mut sse = dd(0.0);
        for (c, h) in hidden.iter().enumerate() {
            let head = &heads[self.unit[c]];
            let mut pred = head[d];
            for j in 0..d {
                pred += head[j] * h[j];
            }
            let r = dd(self.y[c]) - pred;
            sse += r * r;
        }
        let mut loss = sse / self.y.len() as f64;
        if self.lambda > 0.0 && !centers.is_empty() {
            let mut total = dd(0.0);
            for head in heads {
                let mut best: Option<Dd> = None;
                for c in centers {
                    let mut sq = dd(0.0);
                    for (a, b) in head.iter().zip(c) {
                        sq += (*a - *b) * (*a - *b);
                    }
                    let dist = sq.sqrt();
                    if best.is_none_or(|b| dist < b) {
                        best = Some(dist);
                    }
                }
                total += best.expect("at least one centre");
            }
            loss += total * (self.lambda / heads.len() as f64);
        }
        loss
    }
}

fn to_dd(v: &[Vec<f64>]) -> Vec<Vec<Dd>> {
    v.iter().map(|r| r.iter().map(|&x| dd(x)).collect()).collect()
}

/// Worst relative error of the model gradient (backbone, then heads, then centres)
/// over all parameters; `x` holds normalised inputs. Also returns the loss.
pub fn panel_check(
    model: &DeepPanelModel,
    x: &DMatrix<f64>,
    y: &[f64],
    unit: &[usize],
    lambda: f64,
    analytic: &[f64],
    step: f64,
) -> (f64, f64) {
    let panel = DdPanel { model, x: columns(x), y, unit, lambda };
    let mut backbone = DdNet::new(&model.backbone);
    let mut heads = to_dd(&model.heads);
    let mut centers = to_dd(&model.centers);
    let hidden = panel.hidden(&backbone);
    let loss = panel.loss(&hidden, &heads, &centers).hi();

    let mut worst = 0.0f64;
    let mut idx = 0;
    for j in 0..backbone.params.len() {
        let orig = backbone.params[j];
        backbone.params[j] = orig + step;
        let up = panel.loss(&panel.hidden(&backbone), &heads, &centers);
        backbone.params[j] = orig - step;
        let down = panel.loss(&panel.hidden(&backbone), &heads, &centers);
        backbone.params[j] = orig;
        worst = worst.max(rel_error(analytic[idx], central(up, down, step)));
        idx += 1;
    }
    for which in 0..2 {
        let n = if which == 0 { heads.len() } else { centers.len() };
        for k in 0..n {
            for j in 0..model.hidden_dim() + 1 {
                let block = if which == 0 { &mut heads } else { &mut centers };
                let orig = block[k][j];
                block[k][j] = orig + step;
                let up = panel.loss(&hidden, &heads, &centers);
                let block = if which == 0 { &mut heads } else { &mut centers };
                block[k][j] = orig - step;
                let down = panel.loss(&hidden, &heads, &centers);
                let block = if which == 0 { &mut heads } else { &mut centers };
                block[k][j] = orig;
                worst = worst.max(rel_error(analytic[idx], central(up, down, step)));
                idx += 1;
            }
        }
    }
    assert_eq!(idx, analytic.len(), "gradient layout");
    (worst, loss)
}
