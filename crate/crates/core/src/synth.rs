//! Synthetic panels with latent group structure.
//!
//! Outcomes follow `y = beta_i' Z(x_month) + eps` and surrogate scores follow
//! `y_s = theta_i' Z(x_post) + eps_s`, where `Z(x) = cos(W x + b)` is a random
//! cosine feature map shared by both equations and `(eps, eps_s_1..eps_s_K)`
//! is an equicorrelated Gaussian block.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::EquiCorrSpec;
use crate::panel::{pool_embeddings, LaggedOutcome, MonthObs, PanelDataset};
use crate::rng::{self, streams};
use crate::{Error, Result};

fn default_n_units() -> usize { 30 }
fn default_n_periods() -> usize { 60 }
fn default_posts() -> usize { 10 }
fn default_embed_dim() -> usize { 64 }
fn default_feature_dim() -> usize { 16 }
fn default_groups() -> usize { 3 }
fn default_rho() -> f64 { 0.5 }
fn default_one() -> f64 { 1.0 }
fn default_true() -> bool { true }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_n_units")]
    pub n_units: usize,
    #[serde(default = "default_n_periods")]
    pub n_periods: usize,
    /// Posts (one per day) in every month.
    #[serde(default = "default_posts")]
    pub posts_per_period: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    /// Unit to group map; near-equal contiguous blocks when absent.
    #[serde(default)]
    pub group_assignment: Option<Vec<usize>>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Standard deviation of the group centre coordinates.
    #[serde(default = "default_one")]
    pub coefficient_scale: f64,
    /// Standard deviation of embedding coordinates; `1/sqrt(embed_dim)` when absent,
    /// which gives embeddings of roughly unit norm.
    #[serde(default)]
    pub embedding_scale: Option<f64>,
    /// Multiplies the whole error block; 0 gives a noiseless panel.
    #[serde(default = "default_one")]
    pub noise_scale: f64,
    /// Use the outcome centres for the surrogate equation as well.
    #[serde(default)]
    pub shared_surrogate_coefficients: bool,
    /// Redraw centres until every pair is at least this many `coefficient_scale`s apart.
    #[serde(default)]
    pub min_center_separation: Option<f64>,
    /// Store `y_{i,t-1}` (zero before the first period) as the single macro covariate.
    #[serde(default = "default_true")]
    pub lagged_outcome: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl SimConfig {
    pub fn embedding_sd(&self) -> f64 {
        self.embedding_scale.unwrap_or(1.0 / (self.embed_dim as f64).sqrt())
    }

    pub fn groups(&self) -> Vec<usize> {
        match &self.group_assignment {
            Some(g) => g.clone(),
            None => (0..self.n_units).map(|i| i * self.n_groups / self.n_units.max(1)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_units == 0 || self.n_periods == 0 {
            return bad("n_units and n_periods must be positive".into());
        }
        if self.posts_per_period == 0 {
            return bad("posts_per_period must be at least 1".into());
        }
        if self.embed_dim == 0 || self.feature_dim == 0 {
            return bad("embed_dim and feature_dim must be positive".into());
        }
        if self.n_groups == 0 || self.n_groups > self.n_units {
            return bad(format!("n_groups {} must be in 1..={}", self.n_groups, self.n_units));
        }
        let groups = self.groups();
        if groups.len() != self.n_units {
            return bad(format!("group_assignment has {} entries for {} units", groups.len(), self.n_units));
        }
        let mut hit = vec![false; self.n_groups];
        for &g in &groups {
            if g >= self.n_groups {
                return bad(format!("group label {g} out of range"));
            }
            hit[g] = true;
        }
        if hit.iter().any(|h| !h) {
            return bad("group_assignment must use every group".into());
        }
        if !(self.coefficient_scale >= 0.0) || !(self.noise_scale >= 0.0) || !(self.embedding_sd() > 0.0) {
            return bad("scales must be non-negative and finite".into());
        }
        EquiCorrSpec { dim: self.posts_per_period + 1, rho: self.rho }.sampler()?;
        Ok(())
    }
}

/// `Z(x) = cos(W x + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureMap {
    /// `feature_dim x embed_dim`.
    pub w: DMatrix<f64>,
    pub phase: DVector<f64>,
}

impl RandomFeatureMap {
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Draws `W` and the phase with i.i.d. standard normal entries.
pub fn gen_feature_map(embed_dim: usize, feature_dim: usize, seed: u64) -> RandomFeatureMap {
    let mut rng = rng::stream(seed, streams::FEATURE_MAP);
    let mut w = DMatrix::zeros(feature_dim, embed_dim);
    for r in 0..feature_dim {
        for c in 0..embed_dim {
            w[(r, c)] = rng.sample(StandardNormal);
        }
    }
    let phase = DVector::from_fn(feature_dim, |_, _| rng.sample(StandardNormal));
    RandomFeatureMap { w, phase }
}

pub fn random_features(map: &RandomFeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != map.input_dim() {
        return Err(Error::DimMismatch { expected: map.input_dim(), found: x.len() });
    }
    Ok((0..map.output_dim())
        .map(|r| {
            let dot: f64 = map.w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            (dot + map.phase[r]).cos()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    /// `n_groups x feature_dim` outcome centres.
    pub centers: DMatrix<f64>,
    pub surrogate_centers: DMatrix<f64>,
    /// `n_units x feature_dim`, row i equal to the centre of unit i's group.
    pub beta: DMatrix<f64>,
    pub theta_s: DMatrix<f64>,
}

fn draw_centers(cfg: &SimConfig, rng: &mut rng::Rng) -> DMatrix<f64> {
    let (k, d) = (cfg.n_groups, cfg.feature_dim);
    let mut last = DMatrix::zeros(k, d);
    for _attempt in 0..10_000 {
        let c = DMatrix::from_fn(k, d, |_, _| cfg.coefficient_scale * rng.sample::<f64, _>(StandardNormal));
        let ok = match cfg.min_center_separation {
            None => true,
            Some(sep) => (0..k).all(|a| {
                (a + 1..k).all(|b| (c.row(a) - c.row(b)).norm() >= sep * cfg.coefficient_scale)
            }),
        };
        if ok {
            return c;
        }
        last = c;
    }
    last
}

pub fn gen_group_coefficients(cfg: &SimConfig, seed: u64) -> GroupCoefficients {
    let mut rng = rng::stream(seed, streams::CENTERS);
    let centers = draw_centers(cfg, &mut rng);
    let surrogate_centers = if cfg.shared_surrogate_coefficients {
        centers.clone()
    } else {
        draw_centers(cfg, &mut rng)
    };
    let groups = cfg.groups();
    let pick = |c: &DMatrix<f64>| DMatrix::from_fn(cfg.n_units, cfg.feature_dim, |i, j| c[(groups[i], j)]);
    GroupCoefficients { beta: pick(&centers), theta_s: pick(&surrogate_centers), centers, surrogate_centers }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub groups: Vec<usize>,
    pub coefficients: GroupCoefficients,
    pub feature_map: RandomFeatureMap,
    /// Outcome errors, `n_units x n_periods`.
    pub eps: DMatrix<f64>,
    /// Surrogate errors, indexed `[(i * n_periods + t) * K + k]`.
    pub eps_s: Vec<f64>,
    /// Noiseless outcome signal `beta_i' Z(x_month)`.
    pub signal: DMatrix<f64>,
    pub lagged_outcomes: Vec<LaggedOutcome>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: PanelDataset,
    pub truth: SimTruth,
}

pub fn simulate_panel(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (n, t_len, k_posts, p) = (cfg.n_units, cfg.n_periods, cfg.posts_per_period, cfg.embed_dim);
    let map = gen_feature_map(p, cfg.feature_dim, cfg.seed);
    let coefs = gen_group_coefficients(cfg, cfg.seed);
    let sampler = EquiCorrSpec { dim: k_posts + 1, rho: cfg.rho }.sampler()?;
    let mut emb_rng = rng::stream(cfg.seed, streams::EMBEDDINGS);
    let mut err_rng = rng::stream(cfg.seed, streams::ERRORS);
    let sd = cfg.embedding_sd();

    let mut y = vec![0.0; n * t_len];
    let mut cells = Vec::with_capacity(n * t_len);
    let mut eps = DMatrix::zeros(n, t_len);
    let mut eps_s = vec![0.0; n * t_len * k_posts];
    let mut signal = DMatrix::zeros(n, t_len);
    let mut block = vec![0.0; k_posts + 1];
    for i in 0..n {
        let beta = coefs.beta.row(i);
        let theta = coefs.theta_s.row(i);
        for t in 0..t_len {
            let x: Vec<f64> = (0..k_posts * p).map(|_| sd * emb_rng.sample::<f64, _>(StandardNormal)).collect();
            sampler.draw_into(&mut err_rng, &mut block);
            let pooled = pool_embeddings(x.chunks(p))?;
            let f: f64 = random_features(&map, &pooled)?.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let c = i * t_len + t;
            signal[(i, t)] = f;
            eps[(i, t)] = cfg.noise_scale * block[0];
            y[c] = f + eps[(i, t)];
            let mut scores = Vec::with_capacity(k_posts);
            for (k, post) in x.chunks(p).enumerate() {
                let g: f64 = random_features(&map, post)?.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
                let e = cfg.noise_scale * block[k + 1];
                eps_s[c * k_posts + k] = e;
                scores.push(g + e);
            }
            cells.push(MonthObs { days: (1..=k_posts as i64).collect(), x, scores });
        }
    }

    let (d_z, z, lags) = if cfg.lagged_outcome {
        let z: Vec<f64> = (0..n * t_len).map(|c| if c % t_len == 0 { 0.0 } else { y[c - 1] }).collect();
        (1, z, vec![LaggedOutcome { column: 0, lag: 1 }])
    } else {
        (0, Vec::new(), Vec::new())
    };
    let dataset = PanelDataset::new(n, t_len, p, d_z, y, z, cells)?.with_lagged_outcomes(lags.clone())?;
    let truth = SimTruth {
        groups: cfg.groups(),
        coefficients: coefs,
        feature_map: map,
        eps,
        eps_s,
        signal,
        lagged_outcomes: lags,
    };
    Ok(Simulation { dataset, truth })
}
