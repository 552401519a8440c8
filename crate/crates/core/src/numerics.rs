//! Dense linear algebra and Gaussian sampling.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration on the columns of the
//! input; least squares and the embedding projection are both built on it.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;
use crate::{Error, Result};

/// Largest admissible condition number of `X'X` in [`ols_fit`].
pub const OLS_CONDITION_LIMIT: f64 = 1e12;
/// Ridge penalty used by [`ols_fit_with_fallback`] when `X'X` is ill-conditioned.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// n x r left singular vectors.
    pub u: DMatrix<f64>,
    /// Singular values, descending.
    pub s: DVector<f64>,
    /// p x r right singular vectors.
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, sv) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*sv);
        }
        us * self.v.transpose()
    }
}

/// Thin SVD of an `m x n` matrix with `m >= n`, returned column-major.
fn jacobi_tall(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let mut u: Vec<f64> = a.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let tol = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                {
                    let cp = &u[p * m..(p + 1) * m];
                    let cq = &u[q * m..(q + 1) * m];
                    for k in 0..m {
                        alpha += cp[k] * cp[k];
                        beta += cq[k] * cq[k];
                        gamma += cp[k] * cq[k];
                    }
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<(f64, usize)> = (0..n)
        .map(|j| (u[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let smax = sv.first().map_or(0.0, |s| s.0);
    let negligible = smax * f64::EPSILON * (m.max(n) as f64);
    let mut uo = DMatrix::zeros(m, n);
    let mut vo = DMatrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        vo.column_mut(k).copy_from_slice(&v[j * n..(j + 1) * n]);
        if sigma > negligible {
            for r in 0..m {
                uo[(r, k)] = u[j * m + r] / sigma;
            }
            s_out.push(sigma);
        } else {
            s_out.push(0.0);
            missing.push(k);
        }
    }
    complete_orthonormal(&mut uo, &missing);
    (uo, s_out, vo)
}

fn rotate(w: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = w.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for k in 0..len {
        let (x, y) = (cp[k], cq[k]);
        cp[k] = c * x - s * y;
        cq[k] = s * x + c * y;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut DMatrix<f64>, missing: &[usize]) {
    let m = u.nrows();
    let mut basis = 0;
    for &k in missing {
        while basis < m {
            let mut cand = DVector::zeros(m);
            cand[basis] = 1.0;
            basis += 1;
            for j in 0..u.ncols() {
                if j == k || (missing.contains(&j) && u.column(j).norm() == 0.0) {
                    continue;
                }
                let proj = u.column(j).dot(&cand);
                cand.axpy(-proj, &u.column(j), 1.0);
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                u.column_mut(k).copy_from(&(cand / norm));
                break;
            }
        }
    }
}

/// Full thin SVD (`r = min(n, p)` components).
pub fn svd(x: &DMatrix<f64>) -> SvdResult {
    let (n, p) = x.shape();
    if n >= p {
        let (u, s, v) = jacobi_tall(x);
        SvdResult { u, s: DVector::from_vec(s), v }
    } else {
        let (v, s, u) = jacobi_tall(&x.transpose());
        SvdResult { u, s: DVector::from_vec(s), v }
    }
}

/// Rank-`rank` truncated SVD: the best Frobenius approximation of that rank.
pub fn truncated_svd(x: &DMatrix<f64>, rank: usize) -> Result<SvdResult> {
    let (n, p) = x.shape();
    if rank == 0 || rank > n.min(p) {
        return Err(Error::BadRank { rank, rows: n, cols: p });
    }
    let full = svd(x);
    Ok(SvdResult {
        u: full.u.columns(0, rank).into_owned(),
        s: full.s.rows(0, rank).into_owned(),
        v: full.v.columns(0, rank).into_owned(),
    })
}

/// Right singular subspace of an embedding matrix, reusable on new rows.
#[derive(Debug, Clone)]
pub struct EmbeddingProjection {
    pub v: DMatrix<f64>,
}

impl EmbeddingProjection {
    pub fn fit(x: &DMatrix<f64>, rank: usize) -> Result<Self> {
        Ok(Self { v: truncated_svd(x, rank)?.v })
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.v.nrows() {
            return Err(Error::DimMismatch { expected: self.v.nrows(), found: x.ncols() });
        }
        Ok(x * &self.v)
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        (0..self.v.ncols())
            .map(|j| self.v.column(j).iter().zip(row).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Projects embeddings onto their leading `rank` right singular vectors (`X V`).
pub fn reduce_embeddings(x: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    EmbeddingProjection::fit(x, rank)?.apply(x)
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

fn ols_core(x: &DMatrix<f64>, y: &DVector<f64>, allow_ridge: bool) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if n == 0 || p == 0 {
        return Err(Error::InsufficientData("empty least-squares problem".into()));
    }
    let f = svd(x);
    let smax = f.s[0];
    let smin = if n >= p { f.s[p - 1] } else { 0.0 };
    let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    let well_posed = condition <= OLS_CONDITION_LIMIT;
    if !well_posed && !allow_ridge {
        return Err(Error::RankDeficient { condition });
    }
    let uty = f.u.transpose() * y;
    let weights = f.s.map(|s| {
        if well_posed {
            1.0 / s
        } else {
            s / (s * s + RIDGE_FALLBACK)
        }
    });
    let coef = &f.v * uty.component_mul(&weights);
    Ok(OlsFit { coef, ridge: !well_posed })
}

/// Ordinary least squares. Fails with `RankDeficient` when `cond(X'X)` exceeds 1e12.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    ols_core(x, y, false).map(|f| f.coef)
}

/// Least squares that falls back to a 1e-8 ridge penalty for ill-conditioned designs.
pub fn ols_fit_with_fallback(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    ols_core(x, y, true)
}

/// Cholesky factor of a positive semidefinite matrix; zero pivots give zero columns.
pub fn cholesky_psd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            // semidefinite direction: the remaining column must vanish too
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-9 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Unit-variance Gaussian vector with common pairwise correlation `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquiCorrSpec {
    pub dim: usize,
    pub rho: f64,
}

impl EquiCorrSpec {
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| if i == j { 1.0 } else { self.rho })
    }

    pub fn sampler(&self) -> Result<EquiCorrSampler> {
        let not_psd = Error::NotPsd { rho: self.rho, dim: self.dim };
        if self.dim == 0 || !self.rho.is_finite() || self.rho > 1.0 {
            return Err(not_psd);
        }
        if self.dim > 1 && self.rho < -1.0 / (self.dim - 1) as f64 - 1e-12 {
            return Err(not_psd);
        }
        let chol = cholesky_psd(&self.covariance()).ok_or(not_psd)?;
        Ok(EquiCorrSampler { chol })
    }
}

#[derive(Debug, Clone)]
pub struct EquiCorrSampler {
    chol: DMatrix<f64>,
}

impl EquiCorrSampler {
    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    /// Fills `out` with one draw `L g`, `g ~ N(0, I)`.
    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim();
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..=i).map(|k| self.chol[(i, k)] * g[k]).sum();
        }
    }
}

/// `n_draws x dim` matrix of equicorrelated standard normal draws.
pub fn sample_equicorr(spec: &EquiCorrSpec, n_draws: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = crate::rng::stream(seed, 0);
    sample_equicorr_with(spec, n_draws, &mut rng)
}

pub fn sample_equicorr_with(spec: &EquiCorrSpec, n_draws: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let sampler = spec.sampler()?;
    let mut out = DMatrix::zeros(n_draws, spec.dim);
    let mut buf = vec![0.0; spec.dim];
    for r in 0..n_draws {
        sampler.draw_into(rng, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            out[(r, j)] = *v;
        }
    }
    Ok(out)
}
