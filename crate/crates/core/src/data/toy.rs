//! The one-parameter linear toy problem whose gradients can be aligned with
//! the slowest-mixing eigenvector of the consensus matrix.
//!
//! Point `l` has feature `|u_l + ζ|` and label `−sign(u_l + ζ)`, so its loss
//! `1 − y x w` has the constant gradient `u_l + ζ` and `F(w) = 1 + ζ w`
//! whenever `Σ u_l = 0`. With one point per node the centered gradient row
//! is exactly `uᵀ`.

use nalgebra::DVector;

use super::{DataError, Dataset};
use crate::numeric::geometric_sum;
use crate::spectral::SpectralDecomposition;

pub fn build_toy_dataset(u: &[f64], zeta: f64) -> Result<Dataset, DataError> {
    if u.is_empty() {
        return Err(DataError::InvalidDataset("u must be non-empty".into()));
    }
    let mut x = Vec::with_capacity(u.len());
    let mut y = Vec::with_capacity(u.len());
    for (index, &ul) in u.iter().enumerate() {
        let v = ul + zeta;
        if v == 0.0 {
            return Err(DataError::DegeneratePoint { index });
        }
        x.push(v.abs());
        y.push(-v.signum());
    }
    Dataset::from_rows(x, 1, y)
}

/// Scales `v` so that `‖u‖_∞ = 1` and `min u = −1`, flipping the sign if the
/// most negative entry is smaller in magnitude than the most positive one.
pub fn normalize_direction(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let sign = if -min >= max { 1.0 } else { -1.0 };
    let scale = sign / if sign > 0.0 { -min } else { max };
    v.iter().map(|x| x * scale).collect()
}

/// Signed `λ_2` and a real eigenvector of a symmetric consensus matrix,
/// normalised by [`normalize_direction`]. Returns `None` for non-symmetric
/// blocks or graphs without a second eigenvalue.
pub fn aligned_direction(dec: &SpectralDecomposition) -> Option<(f64, Vec<f64>)> {
    if dec.q() < 2 {
        return None;
    }
    let block = dec.block(1);
    let r = block.nrows();
    let l0 = block[(0, 0)];
    let scalar = (0..r).all(|i| {
        (0..r).all(|j| {
            let target = if i == j { l0 } else { 0.0 };
            (block[(i, j)] - target).abs() <= 1e-12
        })
    });
    let (lambda, v): (f64, DVector<f64>) = if scalar {
        (l0, dec.basis(1).column(0).into_owned())
    } else {
        let pairs = dec.real_eigenpairs(1)?;
        pairs.into_iter().next()?
    };
    Some((lambda, normalize_direction(v.as_slice())))
}

/// `Σ_{h=0}^{k−1} λ^h` for signed `λ ∈ (−1, 1)`.
fn power_sum(lambda: f64, k: u64) -> f64 {
    if lambda >= 0.0 {
        geometric_sum(lambda, k)
    } else {
        (1.0 - lambda.powi(k as i32)) / (1.0 - lambda)
    }
}

/// Model of the worst node (`u_j = −1`) after `k` steps, starting from 1:
/// `1 + η(1 − λ^k)/(1 − λ) − ηζk`.
pub fn toy_worst_model(lambda2: f64, eta: f64, zeta: f64, k: u64) -> f64 {
    1.0 + eta * power_sum(lambda2, k) - eta * zeta * k as f64
}

/// `1/(1−λ) · (1 − (1−λ^k)/(k(1−λ)))`, the time-averaged consensus lag.
fn lag(lambda2: f64, k: u64) -> f64 {
    let kf = k as f64;
    if lambda2 == 0.0 {
        return 1.0 - 1.0 / kf;
    }
    (1.0 - power_sum(lambda2, k) / kf) / (1.0 - lambda2)
}

/// `max_i F(ŵ_i(k−1))` obtained by averaging the worst node's model over
/// `h = 0, …, k−1`: `1 + ζ + ηζ·lag − ηζ²(k−1)/2`. Requires `k ≥ 1`.
pub fn toy_worst_closed_form(lambda2: f64, eta: f64, zeta: f64, k: u64) -> f64 {
    assert!(k >= 1, "the time average needs at least one iterate");
    1.0 + zeta + eta * zeta * lag(lambda2, k) - eta * zeta * zeta * (k - 1) as f64 / 2.0
}

/// The same curve with the drift term written as `−ηζ²k/2`; it differs from
/// [`toy_worst_closed_form`] by exactly `ηζ²/2`.
pub fn toy_worst_linear_drift(lambda2: f64, eta: f64, zeta: f64, k: u64) -> f64 {
    assert!(k >= 1, "the time average needs at least one iterate");
    1.0 + zeta + eta * zeta * lag(lambda2, k) - eta * zeta * zeta * k as f64 / 2.0
}

/// Squared distance from the common start `w = 1` to the minimiser `−30`
/// over the box `[−30, 1]`.
pub fn toy_dist0_sq(w0: f64, lower: f64) -> f64 {
    (w0 - lower).powi(2)
}
