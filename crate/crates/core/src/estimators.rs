//! Gradient statistics `E`, `E_sp`, `H`, `R`, `R_sp`, the closed-form
//! estimates under random partitioning with replication, a brute-force
//! permutation oracle for those estimates, and the looseness ratio `β`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{random_partition, DataError, Dataset, Objective};
use crate::engine::{node_rngs, Problem};
use crate::numeric::{center_columns, CompensatedSum};
use crate::spectral::{energy_fractions, SpectralDecomposition, SpectralError};

/// Default number of minibatch draws used by [`measure_stats`].
pub const DEFAULT_SAMPLES: usize = 64;
/// Shards with at most this many minibatches are enumerated exhaustively.
pub const ENUMERATION_LIMIT: u64 = 500;
/// Minibatch draws per node when a shard is too large to enumerate.
pub const INNER_DRAWS: usize = 200;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("infeasible batch: {0}")]
    InfeasibleBatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Measured statistics at a fixed parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_sp")]
    pub e_sp: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_sp")]
    pub r_sp: f64,
    pub alpha: f64,
    /// `e_2, …, e_Q` behind `alpha`.
    pub fractions: Vec<f64>,
    pub n_samples: usize,
    pub se_e: f64,
    pub se_e_sp: f64,
    pub se_h: f64,
    /// `H` minus the bias-corrected estimate `sqrt(max(0, ‖Ḡ‖² − s²/n))`.
    pub h_bias: f64,
    /// Set when all centered gradients vanished and `alpha` defaulted to 1.
    pub zero_energy: bool,
    /// Label of the topology whose spectrum produced `alpha`.
    #[serde(default)]
    pub alpha_topology: String,
}

/// Draws `n_samples` independent gradient matrices at `w` and summarises them.
pub fn measure_stats(
    dec: &SpectralDecomposition,
    problem: &Problem,
    w: &DMatrix<f64>,
    b: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GradientStats, EstimatorError> {
    let samples = sample_gradients(problem, w, b, n_samples, seed)?;
    summarize(dec, w, &samples)
}

/// `n_samples` gradient matrices at `w`, node `j` using stream `j + 1`.
pub fn sample_gradients(
    problem: &Problem,
    w: &DMatrix<f64>,
    b: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>, EstimatorError> {
    if n_samples < 2 {
        return Err(EstimatorError::InvalidInput(
            "n_samples must be at least 2".into(),
        ));
    }
    let m = problem.m();
    if w.ncols() != m || w.nrows() != problem.dim() {
        return Err(EstimatorError::InvalidInput(format!(
            "W is {}x{}, problem needs {}x{m}",
            w.nrows(),
            w.ncols(),
            problem.dim()
        )));
    }
    let mut rngs = node_rngs(seed, m);
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| w.column(j).iter().copied().collect())
        .collect();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut g = DMatrix::zeros(w.nrows(), m);
        for j in 0..m {
            let gj = crate::data::minibatch_subgradient(
                &problem.objective,
                problem.dataset,
                problem.partition,
                j,
                &cols[j],
                b,
                &mut rngs[j],
            )?;
            g.set_column(j, &gj);
        }
        out.push(g);
    }
    Ok(out)
}

/// Statistics of a set of gradient matrices drawn at `w`.
pub fn summarize(
    dec: &SpectralDecomposition,
    w: &DMatrix<f64>,
    samples: &[DMatrix<f64>],
) -> Result<GradientStats, EstimatorError> {
    let n = samples.len();
    if n < 2 {
        return Err(EstimatorError::InvalidInput(
            "need at least 2 samples".into(),
        ));
    }
    let nf = n as f64;
    let centered: Vec<DMatrix<f64>> = samples.iter().map(center_columns).collect();
    let g_sq: Vec<f64> = samples.iter().map(|g| g.norm_squared()).collect();
    let dg_sq: Vec<f64> = centered.iter().map(|g| g.norm_squared()).collect();
    let (e, se_e) = mean_se(&g_sq);
    let (e_sp, se_e_sp) = mean_se(&dg_sq);
    let mut mean = DMatrix::zeros(w.nrows(), w.ncols());
    for g in samples {
        mean += g;
    }
    mean /= nf;
    let h = mean.norm();
    let s2 = samples
        .iter()
        .map(|g| (g - &mean).norm_squared())
        .sum::<f64>()
        / (nf - 1.0);
    let h_unbiased = (h * h - s2 / nf).max(0.0).sqrt();
    let profile = energy_fractions(dec, &centered)?;
    Ok(GradientStats {
        e,
        e_sp,
        h,
        r: w.norm_squared(),
        r_sp: center_columns(w).norm_squared(),
        alpha: profile.alpha,
        fractions: profile.fractions,
        n_samples: n,
        se_e,
        se_e_sp,
        se_h: (s2 / nf).sqrt(),
        h_bias: h - h_unbiased,
        zero_energy: profile.zero_energy,
        alpha_topology: String::new(),
    })
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Inputs of the closed-form estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormInputs {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// `‖∂F‖²` at the evaluation point.
    pub grad_norm_sq: f64,
    /// Trace of the population covariance of the per-point subgradients.
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormEstimates {
    #[serde(rename = "E_hat")]
    pub e_hat: f64,
    #[serde(rename = "E_sp_hat")]
    pub e_sp_hat: f64,
    #[serde(rename = "H_hat")]
    pub h_hat: f64,
    #[serde(rename = "H_lower")]
    pub h_lower: f64,
    pub inputs: ClosedFormInputs,
}

/// Expected `‖G‖²`, `‖ΔG‖²` and the interval for `‖E G‖` over random
/// partitions with `C` replicas and minibatches of size `B`.
pub fn closed_form_estimates(
    inputs: ClosedFormInputs,
) -> Result<ClosedFormEstimates, EstimatorError> {
    let ClosedFormInputs {
        m,
        s,
        b,
        c,
        grad_norm_sq,
        sigma_sq,
    } = inputs;
    if s < 2 || m == 0 || c == 0 || c > m {
        return Err(EstimatorError::InvalidInput(format!(
            "need S >= 2 and 1 <= C <= M (S={s}, C={c}, M={m})"
        )));
    }
    if b == 0 || b * m > c * s {
        return Err(EstimatorError::InfeasibleBatch(format!(
            "B={b} must satisfy 1 <= B <= C·S/M = {}",
            c as f64 * s as f64 / m as f64
        )));
    }
    if grad_norm_sq < 0.0 || sigma_sq < 0.0 {
        return Err(EstimatorError::InvalidInput(
            "moments must be non-negative".into(),
        ));
    }
    let (mf, sf, bf, cf) = (m as f64, s as f64, b as f64, c as f64);
    let e_hat = mf * (grad_norm_sq + (sf - bf) * sigma_sq / (bf * (sf - 1.0)));
    let e_sp_hat = sigma_sq * (mf * cf * (sf - bf) - cf * sf + mf * bf) / (cf * bf * (sf - 1.0));
    let h_hat = mf.sqrt() * (grad_norm_sq + (mf - cf) * sigma_sq / (cf * (sf - 1.0))).sqrt();
    Ok(ClosedFormEstimates {
        e_hat,
        e_sp_hat,
        h_hat,
        h_lower: mf.sqrt() * grad_norm_sq.sqrt(),
        inputs,
    })
}

/// Per-point subgradients at `w`, one vector per data point.
pub fn point_gradients(obj: &Objective, ds: &Dataset, w: &[f64]) -> Vec<DVector<f64>> {
    (0..ds.len())
        .map(|i| DVector::from_vec(obj.subgradient_point(w, ds.features(i), ds.target(i))))
        .collect()
}

/// `(‖∂F(w)‖², σ²(w))` with `σ²` the population trace variance.
pub fn dataset_moments(obj: &Objective, ds: &Dataset, w: &[f64]) -> (f64, f64) {
    let grads = point_gradients(obj, ds, w);
    let s = grads.len() as f64;
    let mean = grads.iter().fold(DVector::zeros(w.len()), |acc, g| acc + g) / s;
    let sigma_sq = grads
        .iter()
        .map(|g| (g - &mean).norm_squared())
        .sum::<f64>()
        / s;
    (mean.norm_squared(), sigma_sq)
}

/// Convenience: moments at `w` plus [`closed_form_estimates`].
pub fn closed_form_from_dataset(
    obj: &Objective,
    ds: &Dataset,
    w: &[f64],
    m: usize,
    b: usize,
    c: usize,
) -> Result<ClosedFormEstimates, EstimatorError> {
    let (grad_norm_sq, sigma_sq) = dataset_moments(obj, ds, w);
    closed_form_estimates(ClosedFormInputs {
        m,
        s: ds.len(),
        b,
        c,
        grad_norm_sq,
        sigma_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mean_e: f64,
    pub mean_e_sp: f64,
    pub mean_h: f64,
    pub se_e: f64,
    pub se_e_sp: f64,
    pub se_h: f64,
    pub n_perms: usize,
    /// True when every shard's minibatch expectation was enumerated exactly.
    pub exact_inner: bool,
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    r
}

/// `(E_ξ g_j, E_ξ ‖g_j‖²)` for one shard, by enumerating every `B`-subset.
fn shard_moments_exact(grads: &[DVector<f64>], shard: &[usize], b: usize) -> (DVector<f64>, f64) {
    let n = grads[0].len();
    let l = shard.len();
    let mut idx: Vec<usize> = (0..b).collect();
    let mut mean = DVector::zeros(n);
    let mut sq = 0.0;
    let mut count = 0u64;
    let inv_b = 1.0 / b as f64;
    loop {
        let mut g = DVector::zeros(n);
        for &p in &idx {
            g += &grads[shard[p]];
        }
        g *= inv_b;
        sq += g.norm_squared();
        mean += g;
        count += 1;
        // next combination in lexicographic order
        let mut i = b;
        loop {
            if i == 0 {
                let c = count as f64;
                return (mean / c, sq / c);
            }
            i -= 1;
            if idx[i] < l - b + i {
                idx[i] += 1;
                for t in i + 1..b {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

fn shard_moments_sampled(
    grads: &[DVector<f64>],
    shard: &[usize],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, f64) {
    let n = grads[0].len();
    let mut mean = DVector::zeros(n);
    let mut sq = 0.0;
    for _ in 0..INNER_DRAWS {
        let picks = rand::seq::index::sample(rng, shard.len(), b);
        let mut g = DVector::zeros(n);
        for p in picks.iter() {
            g += &grads[shard[p]];
        }
        g /= b as f64;
        sq += g.norm_squared();
        mean += g;
    }
    let d = INNER_DRAWS as f64;
    (mean / d, sq / d)
}

/// Monte-Carlo over random valid partitions. For each partition the
/// minibatch expectations are computed per shard (exhaustively when the
/// shard has at most [`ENUMERATION_LIMIT`] minibatches), then
/// `E_ξ‖G‖² = Σ_j E‖g_j‖²`, `E_ξ‖ΔG‖² = E_ξ‖G‖² − M·E_ξ‖ḡ‖²` with independent
/// nodes, and `‖E_ξ G‖_F = sqrt(Σ_j ‖E g_j‖²)`. Permutation `i` uses stream
/// `i` of `seed`, so results do not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub fn permutation_oracle(
    ds: &Dataset,
    obj: &Objective,
    w: &[f64],
    m: usize,
    b: usize,
    c: usize,
    n_perms: usize,
    seed: u64,
) -> Result<OracleResult, EstimatorError> {
    let s = ds.len();
    if m == 0 || c == 0 || c > m || !(c * s).is_multiple_of(m) {
        return Err(DataError::InfeasibleReplication(format!("S={s}, M={m}, C={c}")).into());
    }
    let local = c * s / m;
    if b == 0 || b > local {
        return Err(EstimatorError::InfeasibleBatch(format!(
            "B={b} with local size {local}"
        )));
    }
    if n_perms < 2 {
        return Err(EstimatorError::InvalidInput(
            "n_perms must be at least 2".into(),
        ));
    }
    let grads = point_gradients(obj, ds, w);
    let exact = binomial(local, b) <= ENUMERATION_LIMIT;
    let mf = m as f64;
    let per_perm: Vec<[f64; 3]> = (0..n_perms)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let part = random_partition(s, m, c, &mut rng).expect("feasibility checked above");
            let mut e = 0.0;
            let mut h_sq = 0.0;
            let mut var_sum = 0.0;
            let mut mu_sum = DVector::zeros(w.len());
            for shard in part.shards() {
                let (mu, sq) = if exact {
                    shard_moments_exact(&grads, shard, b)
                } else {
                    shard_moments_sampled(&grads, shard, b, &mut rng)
                };
                let mu_sq = mu.norm_squared();
                e += sq;
                h_sq += mu_sq;
                var_sum += (sq - mu_sq).max(0.0);
                mu_sum += mu;
            }
            let mean_sq = (mu_sum / mf).norm_squared() + var_sum / (mf * mf);
            [e, e - mf * mean_sq, h_sq.sqrt()]
        })
        .collect();
    let stat = |k: usize| {
        let mut sum = CompensatedSum::default();
        let mut sum_sq = CompensatedSum::default();
        for v in &per_perm {
            sum.add(v[k]);
            sum_sq.add(v[k] * v[k]);
        }
        let n = n_perms as f64;
        let mean = sum.value() / n;
        let var = ((sum_sq.value() - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    };
    let (mean_e, se_e) = stat(0);
    let (mean_e_sp, se_e_sp) = stat(1);
    let (mean_h, se_h) = stat(2);
    Ok(OracleResult {
        mean_e,
        mean_e_sp,
        mean_h,
        se_e,
        se_e_sp,
        se_h,
        n_perms,
        exact_inner: exact,
    })
}

/// `x` agrees with `reference` within `max(k·se, rel·|reference|)`.
pub fn within_tolerance(x: f64, reference: f64, se: f64, k: f64) -> bool {
    (x - reference).abs() <= (k * se).max(1e-9 * reference.abs())
}

/// `β = (1/α)·E/(√E_sp·H)`; `+∞` when `E_sp` or `H` vanishes.
pub fn beta(stats: &GradientStats) -> f64 {
    beta_raw(stats.e, stats.e_sp, stats.h, stats.alpha)
}

/// `β̂` from the closed-form estimates and a measured `α`.
pub fn beta_hat(est: &ClosedFormEstimates, alpha: f64) -> f64 {
    beta_raw(est.e_hat, est.e_sp_hat, est.h_hat, alpha)
}

fn beta_raw(e: f64, e_sp: f64, h: f64, alpha: f64) -> f64 {
    if !(e_sp > 0.0 && h > 0.0 && alpha > 0.0) {
        return f64::INFINITY;
    }
    e / (alpha * e_sp.sqrt() * h)
}

/// `β` from the three ratios `1/α`, `√(E/E_sp)`, `√E/H`.
pub fn beta_from_ratios(inv_alpha: f64, sqrt_e_over_esp: f64, sqrt_e_over_h: f64) -> f64 {
    inv_alpha * sqrt_e_over_esp * sqrt_e_over_h
}

/// Squared distance from a point to the minimiser set, plus `F*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimumDistance {
    pub dist0_sq: f64,
    pub f_star: f64,
    /// False when the minimiser was approximated by a long centralized run.
    pub exact: bool,
}

/// Least squares through the SVD (minimiser set = pseudo-inverse solution
/// plus the null space), the box minimiser for the toy objective, and a long
/// full-batch subgradient run for the hinge loss.
pub fn distance_to_optimum(obj: &Objective, ds: &Dataset, w0: &[f64]) -> OptimumDistance {
    match *obj {
        Objective::LinearMse => {
            let x = ds.features_matrix();
            let y = DVector::from_column_slice(ds.targets());
            let svd = x.clone().svd(true, true);
            let tol = 1e-12 * svd.singular_values.max().max(1.0) * x.nrows().max(x.ncols()) as f64;
            let w_star = svd.solve(&y, tol).expect("both factors were computed");
            let v_t = svd.v_t.as_ref().expect("v_t computed");
            let w0v = DVector::from_column_slice(w0);
            let diff = &w0v - &w_star;
            let mut proj_sq = 0.0;
            for (r, &sv) in svd.singular_values.iter().enumerate() {
                if sv > tol {
                    proj_sq += v_t.row(r).dot(&diff.transpose()).powi(2);
                }
            }
            OptimumDistance {
                dist0_sq: proj_sq,
                f_star: obj.loss(ds, w_star.as_slice()),
                exact: true,
            }
        }
        Objective::ToyLinear {
            zeta,
            bounds: (lo, hi),
            ..
        } => {
            let w_star = if zeta >= 0.0 { lo } else { hi };
            let d: f64 = w0.iter().map(|v| (v - w_star).powi(2)).sum();
            OptimumDistance {
                dist0_sq: d,
                f_star: obj.loss(ds, &vec![w_star; w0.len()]),
                exact: true,
            }
        }
        Objective::HingeL2 { .. } => {
            let mut w = w0.to_vec();
            let mut best = (obj.loss(ds, &w), w.clone());
            let scale = obj.full_gradient(ds, &w).norm().max(1e-12);
            for t in 0..20_000 {
                let g = obj.full_gradient(ds, &w);
                let step = 1.0 / (scale * ((t + 1) as f64).sqrt());
                w.iter_mut()
                    .zip(g.iter())
                    .for_each(|(wi, gi)| *wi -= step * gi);
                let l = obj.loss(ds, &w);
                if l < best.0 {
                    best = (l, w.clone());
                }
            }
            let d: f64 = w0.iter().zip(&best.1).map(|(a, b)| (a - b).powi(2)).sum();
            OptimumDistance {
                dist0_sq: d,
                f_star: best.0,
                exact: false,
            }
        }
    }
}

/// `max_j ‖∂F_j(w)‖` over the shards: a data-driven stand-in for the
/// subgradient bound `L`.
pub fn local_gradient_bound(problem: &Problem, w: &[f64]) -> f64 {
    problem
        .partition
        .shards()
        .iter()
        .map(|s| problem.objective.gradient_on(problem.dataset, s, w).norm())
        .fold(0.0, f64::max)
}
