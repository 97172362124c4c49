//! Modified squared-exponential kernel, spectral truncation on the time
//! grid, and smoothing-parameter estimation from channel averages.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::SessionData;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("estimation error: {0}")]
    Estimation(String),
}

/// Decay (alpha) and smoothness (rho) of the kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub alpha: f64,
    pub rho: f64,
}

impl KernelParams {
    pub fn new(alpha: f64, rho: f64) -> Result<Self, KernelError> {
        if !(alpha >= 0.0 && rho > 0.0) || !alpha.is_finite() || !rho.is_finite() {
            return Err(KernelError::InvalidInput(format!(
                "kernel needs alpha >= 0 and rho > 0, got alpha={alpha}, rho={rho}"
            )));
        }
        Ok(Self { alpha, rho })
    }
}

/// exp(-alpha (x^2 + x'^2) - rho (x - x')^2).
///
/// With alpha = 0 this is the plain squared-exponential kernel; alpha > 0
/// decays the variance away from the origin.
pub fn mse_kernel(x: f64, x_prime: f64, params: &KernelParams) -> f64 {
    let d = x - x_prime;
    (-params.alpha * (x * x + x_prime * x_prime) - params.rho * d * d).exp()
}

/// Map 1-based time indices onto [0, 1]: t -> (t-1)/(T-1).
pub fn time_grid(timepoints: usize) -> Vec<f64> {
    if timepoints <= 1 {
        return vec![0.0];
    }
    (0..timepoints)
        .map(|t| t as f64 / (timepoints - 1) as f64)
        .collect()
}

/// Symmetric kernel matrix over a grid (no jitter; the decomposition site
/// adds 1e-10 I before factorizing).
pub fn gram_matrix(grid: &[f64], params: &KernelParams) -> DMatrix<f64> {
    let t = grid.len();
    let mut m = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in i..t {
            let v = mse_kernel(grid[i], grid[j], params);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Truncated eigenpairs of the kernel on a time grid.
#[derive(Debug, Clone)]
pub struct KlBasis {
    pub grid: Vec<f64>,
    /// Retained rank L.
    pub rank: usize,
    /// Eigenvalues, descending, all positive.
    pub lambdas: DVector<f64>,
    /// T x L orthonormal eigenvector matrix.
    pub psi: DMatrix<f64>,
    /// Share of the total eigenvalue mass retained.
    pub variance_fraction: f64,
}

impl KlBasis {
    /// psi diag(lambda) psi^T, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.psi.clone();
        for l in 0..self.rank {
            scaled.column_mut(l).scale_mut(self.lambdas[l]);
        }
        &scaled * self.psi.transpose()
    }
}

/// Eigendecompose the (jittered) Gram matrix and keep the smallest leading
/// rank whose eigenvalue share reaches `variance_threshold`.
pub fn build_kl_basis(
    grid: &[f64],
    params: &KernelParams,
    variance_threshold: f64,
) -> Result<KlBasis, KernelError> {
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(KernelError::InvalidInput(format!(
            "variance threshold must be in (0, 1], got {variance_threshold}"
        )));
    }
    if grid.is_empty() {
        return Err(KernelError::InvalidInput("empty time grid".into()));
    }
    let t = grid.len();
    let mut gram = gram_matrix(grid, params);
    for i in 0..t {
        gram[(i, i)] += 1e-10;
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > lambda_max * 1e-14)
        .collect();
    let total: f64 = positive.iter().map(|&i| eig.eigenvalues[i]).sum();
    if !(total > 0.0) {
        return Err(KernelError::Estimation("kernel matrix has no mass".into()));
    }
    let rank = if variance_threshold >= 1.0 {
        positive.len()
    } else {
        // smallest rank whose eigenvalue share reaches the threshold AND
        // whose Frobenius reconstruction error stays within 1 - threshold;
        // the share alone can undershoot the error bound on flat spectra
        let total_sq: f64 = order.iter().map(|&i| eig.eigenvalues[i].powi(2)).sum();
        let fro_bound = (1.0 - variance_threshold) * total_sq.sqrt();
        let mut cum = 0.0;
        let mut kept_sq = 0.0;
        let mut rank = positive.len();
        for (l, &i) in positive.iter().enumerate() {
            cum += eig.eigenvalues[i];
            kept_sq += eig.eigenvalues[i].powi(2);
            if cum / total >= variance_threshold
                && (total_sq - kept_sq).max(0.0).sqrt() <= fro_bound
            {
                rank = l + 1;
                break;
            }
        }
        rank
    };
    let mut lambdas = DVector::zeros(rank);
    let mut psi = DMatrix::zeros(t, rank);
    let mut cum = 0.0;
    for (l, &i) in positive.iter().take(rank).enumerate() {
        lambdas[l] = eig.eigenvalues[i];
        cum += eig.eigenvalues[i];
        let col = eig.eigenvectors.column(i);
        // fix the sign so the largest-magnitude element is positive
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        psi.column_mut(l).copy_from(&(col * sign));
    }
    Ok(KlBasis {
        grid: grid.to_vec(),
        rank,
        lambdas,
        psi,
        variance_fraction: cum / total,
    })
}

/// 30 log-spaced smoothness candidates in [0.5, 500].
pub fn default_rho_grid() -> Vec<f64> {
    log_space(0.5, 500.0, 30)
}

/// 10 log-spaced noise-variance candidates in [1e-3, 1], relative to the
/// waveform variance.
pub fn default_noise_grid() -> Vec<f64> {
    log_space(1e-3, 1.0, 10)
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Per-channel argmax smoothness from a zero-mean GP fit (kernel decay fixed
/// at `alpha`, i.i.d. noise) to the channel's grand-average waveform.
/// Returns `None` for flat channels.
pub fn per_channel_rho(
    session: &SessionData,
    alpha: f64,
    rho_grid: &[f64],
) -> Result<Vec<Option<f64>>, KernelError> {
    if session.n_flashes() == 0 {
        return Err(KernelError::Estimation("empty session".into()));
    }
    if rho_grid.is_empty() || rho_grid.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(KernelError::InvalidInput(
            "rho grid must hold finite positive values".into(),
        ));
    }
    let grid = time_grid(session.timepoints);
    let noise_rel = default_noise_grid();
    let fits: Vec<Option<f64>> = (0..session.channels)
        .into_par_iter()
        .map(|ch| {
            let wave = session.grand_average(ch);
            let mean = wave.sum() / wave.len() as f64;
            let var = wave.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (wave.len() as f64 - 1.0).max(1.0);
            let max_abs = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if var < 1e-15 * (1.0 + max_abs * max_abs) {
                return None;
            }
            let mut best = (f64::NEG_INFINITY, rho_grid[0]);
            for &rho in rho_grid {
                let params = KernelParams { alpha, rho };
                let mut gram = gram_matrix(&grid, &params);
                for i in 0..gram.nrows() {
                    gram[(i, i)] += 1e-10;
                }
                let eig = gram.symmetric_eigen();
                let rotated = eig.eigenvectors.transpose() * &wave;
                for &rel in &noise_rel {
                    let noise = rel * var;
                    let mut ll = 0.0;
                    for i in 0..rotated.len() {
                        let s = eig.eigenvalues[i].max(0.0) + noise;
                        ll += -0.5 * (rotated[i] * rotated[i] / s + s.ln());
                    }
                    if ll > best.0 {
                        best = (ll, rho);
                    }
                }
            }
            Some(best.1)
        })
        .collect();
    Ok(fits)
}

/// Arithmetic mean of the per-channel argmax smoothness values.
pub fn estimate_rho(
    session: &SessionData,
    alpha: f64,
    rho_grid: &[f64],
) -> Result<f64, KernelError> {
    let fits = per_channel_rho(session, alpha, rho_grid)?;
    let kept: Vec<f64> = fits.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(KernelError::Estimation(
            "every channel average is flat; cannot estimate smoothness".into(),
        ));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}
