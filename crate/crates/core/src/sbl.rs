//! Adaptive sparse Bayesian learning on the imaging residual.

use nalgebra::{DMatrix, DVector};

use crate::config::{NoiseRule, SceneConfig};
use crate::error::{check_len, Error, Result};
use crate::optimizer::sensing::gramian;
use crate::scene::{LinkModel, PhaseSchedule, ReceivedFrame, Scene, SymbolFrame, C64};

const NOISE_FLOOR: f64 = 1e-12;
const JITTER: f64 = 1e-12;

/// `h = G σ + noise` with `G` row-major `L × M`.
#[derive(Debug, Clone)]
pub struct ImagingSystem {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<C64>,
    pub residual: Vec<C64>,
    gram: Vec<C64>,
    gh: Vec<C64>,
}

impl ImagingSystem {
    pub fn new(rows: usize, cols: usize, matrix: Vec<C64>, residual: Vec<C64>) -> Result<Self> {
        check_len("imaging matrix", rows * cols, matrix.len())?;
        let gram = gramian(rows, cols, &matrix);
        Self::with_gram(rows, cols, matrix, residual, gram)
    }

    /// Reuses a precomputed `G^H G`.
    pub fn with_gram(rows: usize, cols: usize, matrix: Vec<C64>, residual: Vec<C64>, gram: Vec<C64>) -> Result<Self> {
        check_len("imaging matrix", rows * cols, matrix.len())?;
        check_len("residual", rows, residual.len())?;
        check_len("gramian", cols * cols, gram.len())?;
        let mut gh = vec![C64::new(0.0, 0.0); cols];
        for (row, h) in matrix.chunks(cols).zip(&residual) {
            for (o, g) in gh.iter_mut().zip(row) {
                *o += g.conj() * h;
            }
        }
        Ok(ImagingSystem {
            rows,
            cols,
            matrix,
            residual,
            gram,
            gh,
        })
    }

    pub fn gram(&self) -> &[C64] {
        &self.gram
    }

    pub fn apply(&self, sigma: &[C64]) -> Vec<C64> {
        self.matrix
            .chunks(self.cols)
            .map(|row| row.iter().zip(sigma).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn misfit(&self, sigma: &[C64]) -> f64 {
        self.apply(sigma)
            .iter()
            .zip(&self.residual)
            .map(|(a, h)| (h - a).norm_sqr())
            .sum()
    }
}

/// Imaging rows `α_I g^T Θ(t) H_I x̂(t−k)` and residual for a link.
pub fn build_residual_link(link: &LinkModel, y: &[C64], x_hat: &SymbolFrame, gram: Option<&[C64]>) -> Result<ImagingSystem> {
    let l = link.frame_len;
    let k = link.delay;
    let m = link.n_pixels;
    check_len("received frame", l + k, y.len())?;
    check_len("symbol estimate", l, x_hat.len())?;
    let mut matrix = Vec::with_capacity(l * m);
    let mut residual = Vec::with_capacity(l);
    for t in k + 1..=l + k {
        let x = x_hat.symbols[t - k - 1];
        matrix.extend(link.sensing_row(t).iter().map(|g| g * link.alpha_i * x));
        let mut h = y[t - 1];
        if t <= l {
            h -= link.comm_scalar(t) * x_hat.symbols[t - 1];
        }
        residual.push(h);
    }
    match gram {
        Some(g) => ImagingSystem::with_gram(l, m, matrix, residual, g.to_vec()),
        None => ImagingSystem::new(l, m, matrix, residual),
    }
}

pub fn build_residual(cfg: &SceneConfig, sched: &PhaseSchedule, y: &ReceivedFrame, x_hat: &SymbolFrame) -> Result<ImagingSystem> {
    let link = Scene::new(cfg)?.link(cfg, sched)?;
    build_residual_link(&link, &y.samples, x_hat, None)
}

/// `(α_I G)^H (α_I G)`, identical for every unit-modulus symbol estimate.
pub fn link_gram(link: &LinkModel) -> Vec<C64> {
    let a2 = link.alpha_i * link.alpha_i;
    gramian(link.frame_len, link.n_pixels, &link.sensing)
        .into_iter()
        .map(|z| z * a2)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub sigma: Vec<C64>,
    pub gamma: Vec<f64>,
    pub epsilon: f64,
    pub noise_est: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The noise update's denominator was not positive and `noise_est` was held.
    pub noise_held: bool,
    /// The precision matrix needed diagonal jitter to factor.
    pub regularized: bool,
}

impl SparseEstimate {
    /// `σ = 0`, `γ = 1`, `ε = 1e−3`, `ξ̂` = mean residual power.
    pub fn initial(sys: &ImagingSystem) -> Self {
        let n = sys.residual.len().max(1) as f64;
        let var = sys.residual.iter().map(|h| h.norm_sqr()).sum::<f64>() / n;
        SparseEstimate {
            sigma: vec![C64::new(0.0, 0.0); sys.cols],
            gamma: vec![1.0; sys.cols],
            epsilon: 1e-3,
            noise_est: var.max(NOISE_FLOOR),
            converged: false,
            iterations: 0,
            noise_held: false,
            regularized: false,
        }
    }

    /// Fixed scene, used when the reflectivities are known.
    pub fn known(sigma: Vec<C64>) -> Self {
        let m = sigma.len();
        SparseEstimate {
            sigma,
            gamma: vec![1.0; m],
            epsilon: 0.0,
            noise_est: 1.0,
            converged: true,
            iterations: 0,
            noise_held: false,
            regularized: false,
        }
    }
}

/// Posterior mean and the diagonal of the posterior covariance for fixed
/// precisions: `W = G^H G / ξ̂ + diag γ`, `σ = W⁻¹ G^H h / ξ̂`.
pub fn posterior(sys: &ImagingSystem, gamma: &[f64], noise_est: f64) -> Result<(Vec<C64>, Vec<f64>, bool)> {
    let m = sys.cols;
    check_len("gamma", m, gamma.len())?;
    let base = DMatrix::from_fn(m, m, |i, j| {
        let mut v = sys.gram[i * m + j] / noise_est;
        if i == j {
            v += gamma[i];
        }
        v
    });
    let rhs = DVector::from_iterator(m, sys.gh.iter().map(|z| z / noise_est));
    let mut jitter = 0.0;
    let mut regularized = false;
    for _ in 0..8 {
        let mut w = base.clone();
        for i in 0..m {
            w[(i, i)] += jitter;
        }
        if let Some(chol) = w.cholesky() {
            let sigma = chol.solve(&rhs);
            let l_inv = chol
                .l()
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .ok_or(Error::NumericalFailure { iteration: 0 })?;
            // diag(W⁻¹) = column norms of L⁻¹
            let diag = (0..m).map(|j| l_inv.column(j).iter().map(|z| z.norm_sqr()).sum()).collect();
            return Ok((sigma.iter().copied().collect(), diag, regularized));
        }
        regularized = true;
        jitter = if jitter == 0.0 { JITTER } else { jitter * 100.0 };
    }
    Err(Error::NumericalFailure { iteration: 0 })
}

/// One update of `σ`, `γ`, `ε` and `ξ̂` with the adaptive noise rule.
pub fn sbl_step(sys: &ImagingSystem, est: &SparseEstimate, gamma_rate: f64) -> Result<SparseEstimate> {
    sbl_step_with(sys, est, gamma_rate, NoiseRule::Adaptive)
}

pub fn sbl_step_with(sys: &ImagingSystem, est: &SparseEstimate, gamma_rate: f64, rule: NoiseRule) -> Result<SparseEstimate> {
    let (sigma, wdiag, regularized) = posterior(sys, &est.gamma, est.noise_est)?;
    let gamma: Vec<f64> = sigma
        .iter()
        .zip(&wdiag)
        .map(|(s, d)| (2.0 * est.epsilon + 1.0) / (2.0 * gamma_rate + s.norm_sqr() + d))
        .collect();
    let m = gamma.len() as f64;
    let log_mean = (gamma.iter().sum::<f64>() / m).ln();
    let mean_log = gamma.iter().map(|g| g.ln()).sum::<f64>() / m;
    let epsilon = 0.5 * (log_mean - mean_log).max(0.0).sqrt();
    let misfit = sys.misfit(&sigma);
    let den = match rule {
        NoiseRule::Adaptive => sys.rows as f64 - gamma.iter().sum::<f64>(),
        NoiseRule::Standard => {
            sys.rows as f64 - gamma.iter().zip(&wdiag).map(|(g, d)| 1.0 - g * d).sum::<f64>()
        }
    };
    let (noise_est, noise_held) = if den > 0.0 {
        ((misfit / den).max(NOISE_FLOOR), false)
    } else {
        (est.noise_est, true)
    };
    Ok(SparseEstimate {
        sigma,
        gamma,
        epsilon,
        noise_est,
        converged: false,
        iterations: est.iterations + 1,
        noise_held,
        regularized,
    })
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Iterates until the relative change of `σ` drops below `tol`.
pub fn run_sbl(sys: &ImagingSystem, init: SparseEstimate, gamma_rate: f64, rule: NoiseRule, max_iters: usize, tol: f64) -> Result<SparseEstimate> {
    let mut est = init;
    for _ in 0..max_iters.max(1) {
        let next = sbl_step_with(sys, &est, gamma_rate, rule)?;
        let change: f64 = norm(&next.sigma.iter().zip(&est.sigma).map(|(a, b)| a - b).collect::<Vec<_>>());
        let done = change / norm(&est.sigma).max(1e-12) < tol;
        est = next;
        if done {
            est.converged = true;
            break;
        }
    }
    Ok(est)
}
