//! Spectral normalization by power iteration.
//!
//! A weight of any rank is viewed as the matrix `(out_channels, rest)`. The
//! state keeps unit estimates of the leading left (`u`) and right (`v`)
//! singular vectors across calls, so one iteration per training step tracks
//! the slowly moving weight.

use anomgan_tensor::{bilinear_sigma, Tensor, SIGMA_FLOOR};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Unit left singular vector estimate, one entry per weight row.
    pub u: Vec<f64>,
    /// Unit right singular vector estimate, one entry per weight column.
    pub v: Vec<f64>,
    /// Most recent largest-singular-value estimate `u^T W v`.
    pub sigma: f64,
    pub n_power_iterations: usize,
}

impl SpectralState {
    /// Random unit vectors for a `rows x cols` weight, one iteration per step.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self {
            u: random_unit(rows, rng),
            v: random_unit(cols, rng),
            sigma: 0.0,
            n_power_iterations: 1,
        }
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.n_power_iterations = n;
        self
    }
}

fn random_unit(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    if !normalize_in_place(&mut v) {
        v = vec![0.0; len];
        v[0] = 1.0;
    }
    v
}

/// Scales `v` to unit length; leaves it untouched and returns false when its
/// norm is too small to divide by.
fn normalize_in_place(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < SIGMA_FLOOR || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn matrix_dims(weight: &Tensor) -> (usize, usize) {
    let rows = weight.shape().first().copied().unwrap_or(1);
    (rows, weight.numel() / rows.max(1))
}

/// Runs `state.n_power_iterations` rounds of `v <- W^T u / |W^T u|`,
/// `u <- W v / |W v|` and returns the estimate `u^T W v` with the new state.
///
/// A zero weight yields `sigma = 0` with the vectors unchanged.
pub fn power_iteration_step(weight: &Tensor, state: &SpectralState) -> Result<(f64, SpectralState)> {
    let (rows, cols) = matrix_dims(weight);
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::Config(format!(
            "spectral state ({}, {}) does not match weight matrix ({rows}, {cols})",
            state.u.len(),
            state.v.len()
        )));
    }
    if !weight.is_finite() {
        return Err(Error::NonFinite {
            location: "weight under spectral normalization".into(),
        });
    }
    let w = weight.data();
    let mut u = state.u.clone();
    let mut v = state.v.clone();
    for _ in 0..state.n_power_iterations.max(1) {
        let mut wt_u = vec![0.0; cols];
        for (row, &ur) in w.chunks(cols).zip(&u) {
            for (acc, &x) in wt_u.iter_mut().zip(row) {
                *acc += x * ur;
            }
        }
        if normalize_in_place(&mut wt_u) {
            v = wt_u;
        }
        let mut w_v: Vec<f64> = w
            .chunks(cols)
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        if normalize_in_place(&mut w_v) {
            u = w_v;
        }
    }
    let sigma = bilinear_sigma(weight, &u, &v);
    Ok((
        sigma,
        SpectralState {
            u,
            v,
            sigma,
            n_power_iterations: state.n_power_iterations,
        },
    ))
}

/// Weight divided by its power-iteration spectral norm estimate.
///
/// An estimate below `1e-12` leaves the weight unchanged and logs a warning.
pub fn spectral_normalize(weight: &Tensor, state: &SpectralState) -> Result<(Tensor, SpectralState)> {
    let (sigma, next) = power_iteration_step(weight, state)?;
    if sigma.abs() < SIGMA_FLOOR {
        log::warn!("spectral norm estimate {sigma:e} below floor; weight returned unchanged");
        return Ok((weight.clone(), next));
    }
    Ok((weight.scale(1.0 / sigma), next))
}
