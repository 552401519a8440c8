//! Dense feedforward networks with exact backpropagation.
//!
//! Every layer computes `a = act(W a_prev + b)`, so the last layer carries an
//! activation as well; use [`Activation::Identity`] for a linear read-out.
//! Batches are column-major: an `in x B` matrix holds one sample per column.

mod adam;
mod gradcheck;
mod train;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, mse_loss};
pub use train::{fit_regression, FitSummary, RegressionData, TrainOptions};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    /// True when `act(c z) = c act(z)` for every `c > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Identity | Activation::Relu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `outputs x inputs`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Fan-in scaled uniform initialisation (He bound for relu, LeCun bound otherwise).
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
        let bound = (gain / inputs.max(1) as f64).sqrt();
        let weights = DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..bound));
        Self { weights, bias: DVector::zeros(outputs), activation }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    pub layers: Vec<Dense>,
}

/// Activations of one batch forward pass, kept for [`FeedForwardNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("cache holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
    /// Gradient with respect to the input batch.
    pub input: DMatrix<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl FeedForwardNet {
    /// Builds a net with layer widths `sizes[0] -> sizes[1] -> ...`; interior layers
    /// use `hidden`, the last one `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least one layer");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                Dense::init(sizes[l], sizes[l + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimMismatch { expected: pair[0].outputs(), found: pair[1].inputs() });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::DimMismatch { expected: l.outputs(), found: l.bias.len() });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Output for a single input vector.
    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), found: v.len() });
        }
        let mut a = v.to_vec();
        for layer in &self.layers {
            let mut next = Vec::with_capacity(layer.outputs());
            for r in 0..layer.outputs() {
                let mut z = layer.bias[r];
                for (c, x) in a.iter().enumerate() {
                    z += layer.weights[(r, c)] * x;
                }
                next.push(layer.activation.apply(z));
            }
            a = next;
        }
        Ok(a)
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), found: x.nrows() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers {
            let mut z = &layer.weights * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let a = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardCache { acts, pre })
    }

    /// Per column of `x`, the smallest `|pre-activation|` over relu layers (infinite without relu).
    /// Finite-difference checks need this to stay clear of the kinks.
    pub fn relu_margins(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let cache = self.forward_batch(x)?;
        let mut margins = vec![f64::INFINITY; x.ncols()];
        for (layer, z) in self.layers.iter().zip(&cache.pre) {
            if layer.activation == Activation::Relu {
                for (m, col) in margins.iter_mut().zip(z.column_iter()) {
                    *m = col.iter().fold(*m, |acc, v| acc.min(v.abs()));
                }
            }
        }
        Ok(margins)
    }

    /// Chain rule through the cached pass; `grad_out` is dLoss/dOutput (`out x B`).
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Gradients {
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut bias = Vec::with_capacity(n);
        let mut delta = grad_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let (z, a) = (&cache.pre[l], &cache.acts[l + 1]);
            if layer.activation != Activation::Identity {
                delta.zip_zip_apply(z, a, |d, zv, av| *d *= layer.activation.derivative(zv, av));
            }
            weights.push(&delta * cache.acts[l].transpose());
            bias.push(delta.column_sum());
            delta = layer.weights.tr_mul(&delta);
        }
        weights.reverse();
        bias.reverse();
        Gradients { weights, bias, input: delta }
    }

    /// Mutable parameter slices in the order `W_0, b_0, W_1, b_1, ...` (weights column-major).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn to_dump(&self) -> NetDump {
        NetDump {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDump {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_dump(dump: &NetDump) -> Result<Self> {
        let layers = dump
            .layers
            .iter()
            .map(|l| {
                if l.weights.len() != l.inputs * l.outputs {
                    return Err(Error::DimMismatch { expected: l.inputs * l.outputs, found: l.weights.len() });
                }
                Ok(Dense {
                    weights: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights),
                    bias: DVector::from_column_slice(&l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }
}

/// Serialised form: layer shapes plus row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDump {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDump {
    pub layers: Vec<LayerDump>,
}

impl Serialize for FeedForwardNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_dump().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeedForwardNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dump = NetDump::deserialize(d)?;
        FeedForwardNet::from_dump(&dump).map_err(serde::de::Error::custom)
    }
}

/// Stacks sample vectors into an `dim x B` batch.
pub fn batch_from_rows<'a, I>(dim: usize, rows: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    for r in rows {
        debug_assert_eq!(r.len(), dim);
        data.extend_from_slice(r);
    }
    let b = data.len().checked_div(dim).unwrap_or(0);
    DMatrix::from_column_slice(dim, b, &data)
}

/// Per-coordinate location and scale frozen from a training batch.
///
/// Coordinates whose standard deviation is at most `1e-8` keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { loc: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Statistics of the rows of an `dim x B` batch (population standard deviation).
    pub fn fit(batch: &DMatrix<f64>) -> Self {
        let b = batch.ncols().max(1) as f64;
        let mut loc = Vec::with_capacity(batch.nrows());
        let mut scale = Vec::with_capacity(batch.nrows());
        for row in batch.row_iter() {
            let m = row.sum() / b;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / b;
            let sd = v.sqrt();
            loc.push(m);
            scale.push(if sd > 1e-8 { sd } else { 1.0 });
        }
        Self { loc, scale }
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn apply(&self, batch: &mut DMatrix<f64>) {
        for mut col in batch.column_iter_mut() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = (*v - self.loc[r]) / self.scale[r];
            }
        }
    }

    pub fn apply_vec(&self, v: &mut [f64]) {
        for (r, x) in v.iter_mut().enumerate() {
            *x = (*x - self.loc[r]) / self.scale[r];
        }
    }
}
