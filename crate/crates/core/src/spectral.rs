//! Spectral decomposition of normal consensus matrices.
//!
//! A normal matrix splits `ℝ^M` into mutually orthogonal invariant subspaces.
//! Eigenvalues are grouped by modulus (conjugate pairs, and eigenvalues such
//! as `±1/3` that share a modulus, land in one group) and each group `q` is
//! represented by an orthonormal basis `U_q` (an `M × r_q` matrix). The
//! orthogonal projector is `P_q = U_q U_qᵀ` and the restriction of `A` to the
//! group is the `r_q × r_q` block `T_q = U_qᵀ A U_q`, which is `|λ_q|` times an
//! orthogonal matrix. Storing bases keeps memory at `O(M²)` overall.
//!
//! Three solvers are used, in order of preference:
//! circulant matrices get the DFT closed form, symmetric matrices a symmetric
//! eigensolver, and everything else a real Schur factorisation (which is
//! block diagonal for normal input).

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{normality_residual, ConsensusMatrix, NORMALITY_TOL};

/// Two consecutive sorted moduli closer than this belong to one group.
pub const GROUP_TOL: f64 = 1e-9;
/// Eigenvalues smaller than this in modulus are treated as exactly zero.
pub const ZERO_SNAP: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not normal: ‖AᵀA − AAᵀ‖_F = {residual:e}")]
    NotNormal { residual: f64 },
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("gradient sample {index} is not centered (max |row sum| = {max_row_sum:e})")]
    NotCentered { index: usize, max_row_sum: f64 },
    #[error("sample shape mismatch: expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("at least one gradient sample is required")]
    NoSamples,
}

/// Which solver produced a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Circulant,
    Symmetric,
    Schur,
}

/// One modulus group.
#[derive(Debug, Clone)]
struct Group {
    modulus: f64,
    eigenvalues: Vec<Complex64>,
    basis: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    m: usize,
    groups: Vec<Group>,
    solver: Solver,
    blocks: Vec<DMatrix<f64>>,
}

impl SpectralDecomposition {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of modulus groups `Q`.
    pub fn q(&self) -> usize {
        self.groups.len()
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    /// Group moduli `|λ_1| ≥ |λ_2| ≥ …`, with `|λ_1| = 1`.
    pub fn moduli(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.modulus).collect()
    }

    /// Eigenvalues (with multiplicity) of group `q` (0-based).
    pub fn eigenvalues(&self, q: usize) -> &[Complex64] {
        &self.groups[q].eigenvalues
    }

    /// All eigenvalues, modulus-ordered, with multiplicity.
    pub fn all_eigenvalues(&self) -> Vec<Complex64> {
        self.groups
            .iter()
            .flat_map(|g| g.eigenvalues.iter().copied())
            .collect()
    }

    pub fn multiplicity(&self, q: usize) -> usize {
        self.groups[q].basis.ncols()
    }

    /// `|λ_2|`, or 0 for a single-node graph.
    pub fn lambda2_modulus(&self) -> f64 {
        self.groups.get(1).map(|g| g.modulus).unwrap_or(0.0)
    }

    /// Spectral gap `1 − |λ_2|`.
    pub fn gap(&self) -> f64 {
        1.0 - self.lambda2_modulus()
    }

    /// Orthonormal basis `U_q` of group `q`.
    pub fn basis(&self, q: usize) -> &DMatrix<f64> {
        &self.groups[q].basis
    }

    /// `T_q = U_qᵀ A U_q`.
    pub fn block(&self, q: usize) -> &DMatrix<f64> {
        &self.blocks[q]
    }

    /// Dense projector `P_q = U_q U_qᵀ`.
    pub fn projector(&self, q: usize) -> DMatrix<f64> {
        let u = &self.groups[q].basis;
        u * u.transpose()
    }

    /// `‖X P_q‖_F² = ‖X U_q‖_F²` for an `n × M` matrix `X`.
    pub fn projected_energy(&self, x: &DMatrix<f64>, q: usize) -> f64 {
        (x * &self.groups[q].basis).norm_squared()
    }

    /// `Σ_q U_q T_q U_qᵀ`; equals `A` up to rounding.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.m, self.m);
        for (g, t) in self.groups.iter().zip(&self.blocks) {
            a += &g.basis * t * g.basis.transpose();
        }
        a
    }

    /// `‖A^h x‖²` evaluated spectrally as `Σ_q |λ_q|^{2h} ‖P_q x‖²`.
    pub fn power_norm_sq(&self, x: &DVector<f64>, h: u32) -> f64 {
        self.groups
            .iter()
            .map(|g| {
                let p = (g.basis.transpose() * x).norm_squared();
                g.modulus.powi(2 * h as i32) * p
            })
            .sum()
    }

    /// Real eigenpairs of group `q`, available when `T_q` is symmetric (always
    /// the case for symmetric `A`). Eigenvectors are unit-norm columns of length `M`.
    pub fn real_eigenpairs(&self, q: usize) -> Option<Vec<(f64, DVector<f64>)>> {
        let t = &self.blocks[q];
        let asym = (t - t.transpose()).amax();
        if asym > 1e-9 {
            return None;
        }
        let sym = (t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let u = &self.groups[q].basis;
        let mut pairs: Vec<(f64, DVector<f64>)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&l, v)| (l, u * v))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        Some(pairs)
    }

    /// JSON-friendly summary.
    pub fn summary(&self) -> SpectralSummary {
        SpectralSummary {
            moduli: self.moduli(),
            multiplicities: (0..self.q()).map(|q| self.multiplicity(q)).collect(),
            gap: self.gap(),
            lambda2_modulus: self.lambda2_modulus(),
            q: self.q(),
            solver: self.solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub moduli: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub gap: f64,
    pub lambda2_modulus: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    pub solver: Solver,
}

pub fn decompose(a: &ConsensusMatrix) -> Result<SpectralDecomposition, SpectralError> {
    decompose_matrix(a.matrix())
}

/// Decomposes any normal matrix whose unique modulus-one eigenvalue is 1.
pub fn decompose_matrix(a: &DMatrix<f64>) -> Result<SpectralDecomposition, SpectralError> {
    let m = a.nrows();
    if m == 0 || a.ncols() != m {
        return Err(SpectralError::DegenerateSpectrum(
            "matrix must be square and non-empty".into(),
        ));
    }
    let residual = normality_residual(a);
    if !(residual <= NORMALITY_TOL) {
        return Err(SpectralError::NotNormal { residual });
    }
    let (solver, pieces) = if let Some(c) = circulant_row(a) {
        (Solver::Circulant, circulant_pieces(&c))
    } else if is_symmetric(a) {
        (Solver::Symmetric, symmetric_pieces(a))
    } else {
        (Solver::Schur, schur_pieces(a)?)
    };
    let groups = group_pieces(m, pieces)?;
    let blocks = groups
        .iter()
        .map(|g| g.basis.transpose() * a * &g.basis)
        .collect();
    Ok(SpectralDecomposition {
        m,
        groups,
        solver,
        blocks,
    })
}

/// An invariant subspace of dimension 1 or 2 with its eigenvalues.
struct Piece {
    eigenvalues: Vec<Complex64>,
    vectors: Vec<DVector<f64>>,
}

impl Piece {
    fn modulus(&self) -> f64 {
        self.eigenvalues[0].norm()
    }
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let m = a.nrows();
    (0..m).all(|i| (i + 1..m).all(|j| a[(i, j)] == a[(j, i)]))
}

fn circulant_row(a: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = a.nrows();
    let c: Vec<f64> = (0..m).map(|j| a[(0, j)]).collect();
    for i in 1..m {
        for j in 0..m {
            if (a[(i, j)] - c[(j + m - i) % m]).abs() > 1e-15 {
                return None;
            }
        }
    }
    Some(c)
}

/// Fourier modes `k` and `M − k` span a real 2-D invariant subspace with
/// basis `cos(2πki/M)`, `sin(2πki/M)` (scaled by `√(2/M)`).
fn circulant_pieces(c: &[f64]) -> Vec<Piece> {
    let m = c.len();
    let mf = m as f64;
    let lambda = |k: usize| -> Complex64 {
        c.iter()
            .enumerate()
            .map(|(j, &cj)| {
                // reduce the product mod M first so the angle stays small
                let theta = 2.0 * std::f64::consts::PI * ((k * j) % m) as f64 / mf;
                Complex64::from_polar(cj, theta)
            })
            .sum()
    };
    let mut pieces = Vec::with_capacity(m / 2 + 1);
    pieces.push(Piece {
        eigenvalues: vec![lambda(0)],
        vectors: vec![DVector::from_element(m, 1.0 / mf.sqrt())],
    });
    for k in 1..=(m / 2) {
        let angle = |i: usize| 2.0 * std::f64::consts::PI * ((k * i) % m) as f64 / mf;
        if 2 * k == m {
            let v = DVector::from_fn(m, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 } / mf.sqrt());
            pieces.push(Piece {
                eigenvalues: vec![Complex64::new(lambda(k).re, 0.0)],
                vectors: vec![v],
            });
        } else {
            let s = (2.0 / mf).sqrt();
            let cos = DVector::from_fn(m, |i, _| s * angle(i).cos());
            let sin = DVector::from_fn(m, |i, _| s * angle(i).sin());
            let l = lambda(k);
            pieces.push(Piece {
                eigenvalues: vec![l, l.conj()],
                vectors: vec![cos, sin],
            });
        }
    }
    pieces
}

fn symmetric_pieces(a: &DMatrix<f64>) -> Vec<Piece> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| Piece {
            eigenvalues: vec![Complex64::new(l, 0.0)],
            vectors: vec![v.into_owned()],
        })
        .collect()
}

/// Real Schur form `A = Z T Zᵀ`. For a normal matrix `T` is block diagonal
/// with 1×1 blocks (real eigenvalues) and 2×2 blocks (conjugate pairs).
fn schur_pieces(a: &DMatrix<f64>) -> Result<Vec<Piece>, SpectralError> {
    let m = a.nrows();
    let schur = Schur::try_new(a.clone(), 1e-15, 10_000).ok_or_else(|| {
        SpectralError::DegenerateSpectrum("Schur iteration did not converge".into())
    })?;
    let (z, t) = schur.unpack();
    let scale = t.amax().max(1.0);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < m {
        let two_by_two = i + 1 < m && t[(i + 1, i)].abs() > 1e-13 * scale;
        if !two_by_two {
            pieces.push(Piece {
                eigenvalues: vec![Complex64::new(t[(i, i)], 0.0)],
                vectors: vec![z.column(i).into_owned()],
            });
            i += 1;
            continue;
        }
        let (p, q, r, s) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        let half_tr = 0.5 * (p + s);
        let disc = 0.25 * (p - s) * (p - s) + q * r;
        let zi = z.column(i).into_owned();
        let zj = z.column(i + 1).into_owned();
        if disc < 0.0 {
            let l = Complex64::new(half_tr, (-disc).sqrt());
            pieces.push(Piece {
                eigenvalues: vec![l, l.conj()],
                vectors: vec![zi, zj],
            });
        } else {
            // Real pair: a normal 2×2 block with real spectrum is symmetric, so
            // a Jacobi rotation diagonalises it.
            let theta = 0.5 * (q + r).atan2(p - s);
            let (sn, cs) = theta.sin_cos();
            let v1 = &zi * cs + &zj * sn;
            let v2 = &zj * cs - &zi * sn;
            let root = disc.sqrt();
            let (l1, l2) = (half_tr + root, half_tr - root);
            let l_v1 = cs * cs * p + cs * sn * (q + r) + sn * sn * s;
            let (a1, a2) = if (l_v1 - l1).abs() <= (l_v1 - l2).abs() {
                (l1, l2)
            } else {
                (l2, l1)
            };
            pieces.push(Piece {
                eigenvalues: vec![Complex64::new(a1, 0.0)],
                vectors: vec![v1],
            });
            pieces.push(Piece {
                eigenvalues: vec![Complex64::new(a2, 0.0)],
                vectors: vec![v2],
            });
        }
        i += 2;
    }
    Ok(pieces)
}

fn group_pieces(m: usize, mut pieces: Vec<Piece>) -> Result<Vec<Group>, SpectralError> {
    // Rounding leaves ~1e-17 where the exact eigenvalue is 0 (e.g. the clique).
    for piece in &mut pieces {
        for l in &mut piece.eigenvalues {
            if l.norm() < ZERO_SNAP {
                *l = Complex64::new(0.0, 0.0);
            }
        }
    }
    pieces.sort_by(|a, b| b.modulus().total_cmp(&a.modulus()));
    let mut groups: Vec<Group> = Vec::new();
    let mut cols: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut last = f64::NAN;
    for piece in pieces {
        let md = piece.modulus();
        if !groups.is_empty() && (last - md).abs() < GROUP_TOL {
            let g = groups.last_mut().unwrap();
            g.eigenvalues.extend(piece.eigenvalues);
            cols.last_mut().unwrap().extend(piece.vectors);
        } else {
            groups.push(Group {
                modulus: md,
                eigenvalues: piece.eigenvalues,
                basis: DMatrix::zeros(0, 0),
            });
            cols.push(piece.vectors);
        }
        last = md;
    }
    for (g, c) in groups.iter_mut().zip(cols) {
        g.basis = DMatrix::from_columns(&c);
        let n = g.eigenvalues.len() as f64;
        g.modulus = g.eigenvalues.iter().map(|l| l.norm()).sum::<f64>() / n;
    }
    let top = &mut groups[0];
    if top.basis.ncols() != 1 {
        return Err(SpectralError::DegenerateSpectrum(format!(
            "modulus-one eigenvalue has multiplicity {} (graph not strongly connected or periodic)",
            top.basis.ncols()
        )));
    }
    if (top.eigenvalues[0] - Complex64::new(1.0, 0.0)).norm() > 1e-9 {
        return Err(SpectralError::DegenerateSpectrum(format!(
            "leading eigenvalue is {} rather than 1",
            top.eigenvalues[0]
        )));
    }
    // The consensus direction is known exactly.
    top.eigenvalues[0] = Complex64::new(1.0, 0.0);
    top.modulus = 1.0;
    top.basis = DMatrix::from_element(m, 1, 1.0 / (m as f64).sqrt());
    Ok(groups)
}

/// How the energy fractions are aggregated over iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// Samples from the first iteration only.
    #[default]
    FirstIteration,
    /// Supremum over recorded iterations of the cumulative prefix energies.
    RunningMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    /// `e_2, …, e_Q`.
    pub fractions: Vec<f64>,
    pub alpha: f64,
    /// Set when every sample had zero centered energy.
    pub zero_energy: bool,
    pub mode: EnergyMode,
}

impl EnergyProfile {
    fn degenerate(dec: &SpectralDecomposition, mode: EnergyMode) -> Self {
        let n = dec.q().saturating_sub(1);
        EnergyProfile {
            fractions: vec![1.0 / n.max(1) as f64; n],
            alpha: 1.0,
            zero_energy: true,
            mode,
        }
    }
}

/// `α = sqrt(Σ_{q≥2} e_q |λ_q/λ_2|²)`, or 1 when `λ_2 = 0`.
pub fn alpha_from_fractions(dec: &SpectralDecomposition, fractions: &[f64]) -> f64 {
    let l2 = dec.lambda2_modulus();
    if l2 == 0.0 {
        return 1.0;
    }
    let moduli = dec.moduli();
    let s: f64 = fractions
        .iter()
        .zip(&moduli[1..])
        .map(|(e, l)| e * (l / l2).powi(2))
        .sum();
    s.sqrt().min(1.0)
}

fn check_samples(
    dec: &SpectralDecomposition,
    samples: &[DMatrix<f64>],
) -> Result<(), SpectralError> {
    if samples.is_empty() {
        return Err(SpectralError::NoSamples);
    }
    for (index, s) in samples.iter().enumerate() {
        if s.ncols() != dec.m() {
            return Err(SpectralError::ShapeMismatch {
                expected: dec.m(),
                got: s.ncols(),
            });
        }
        let max_row_sum = s.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
        let tol = 1e-9 * (1.0 + s.amax() * dec.m() as f64);
        if max_row_sum > tol {
            return Err(SpectralError::NotCentered { index, max_row_sum });
        }
    }
    Ok(())
}

/// Mean energy per group `q ≥ 2` over the samples.
fn mean_group_energy(dec: &SpectralDecomposition, samples: &[DMatrix<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    (1..dec.q())
        .map(|q| {
            samples
                .iter()
                .map(|s| dec.projected_energy(s, q))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Energy fractions of centered gradient samples `ΔG = G − G11ᵀ/M`.
pub fn energy_fractions(
    dec: &SpectralDecomposition,
    delta_g_samples: &[DMatrix<f64>],
) -> Result<EnergyProfile, SpectralError> {
    check_samples(dec, delta_g_samples)?;
    let energy = mean_group_energy(dec, delta_g_samples);
    let total: f64 = energy.iter().sum();
    if !(total > 0.0) {
        log::warn!("centered gradients carry no energy; using alpha = 1");
        return Ok(EnergyProfile::degenerate(dec, EnergyMode::FirstIteration));
    }
    let fractions: Vec<f64> = energy.iter().map(|e| e / total).collect();
    let alpha = alpha_from_fractions(dec, &fractions);
    Ok(EnergyProfile {
        fractions,
        alpha,
        zero_energy: false,
        mode: EnergyMode::FirstIteration,
    })
}

/// Running-max variant: `iterations[h]` holds the centered samples of
/// iteration `h`. Prefix energies `E^l = sup_h mean ‖ΔG(h) Σ_{2≤l'≤l} P_l'‖²`
/// are differenced and normalised by the full prefix.
pub fn energy_fractions_running_max(
    dec: &SpectralDecomposition,
    iterations: &[Vec<DMatrix<f64>>],
) -> Result<EnergyProfile, SpectralError> {
    if iterations.is_empty() {
        return Err(SpectralError::NoSamples);
    }
    let groups = dec.q().saturating_sub(1);
    let mut sup_prefix = vec![0.0f64; groups];
    for samples in iterations {
        check_samples(dec, samples)?;
        let energy = mean_group_energy(dec, samples);
        let mut acc = 0.0;
        for (q, e) in energy.iter().enumerate() {
            acc += e;
            sup_prefix[q] = sup_prefix[q].max(acc);
        }
    }
    let total = sup_prefix.last().copied().unwrap_or(0.0);
    if !(total > 0.0) {
        log::warn!("centered gradients carry no energy; using alpha = 1");
        return Ok(EnergyProfile::degenerate(dec, EnergyMode::RunningMax));
    }
    let mut fractions = Vec::with_capacity(groups);
    let mut prev = 0.0;
    for &p in &sup_prefix {
        fractions.push((p - prev) / total);
        prev = p;
    }
    let alpha = alpha_from_fractions(dec, &fractions);
    Ok(EnergyProfile {
        fractions,
        alpha,
        zero_energy: false,
        mode: EnergyMode::RunningMax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::center_columns;
    use crate::topology::{generate, GraphKind, GraphSpec};
    use proptest::prelude::*;

    fn check_projectors(dec: &SpectralDecomposition, a: &DMatrix<f64>) {
        let m = dec.m();
        let mut sum = DMatrix::zeros(m, m);
        for q in 0..dec.q() {
            let p = dec.projector(q);
            assert!((&p - p.transpose()).amax() <= 1e-10);
            assert!((&p * &p - &p).amax() <= 1e-9);
            for r in q + 1..dec.q() {
                assert!((&p * dec.projector(r)).amax() <= 1e-9);
            }
            sum += p;
        }
        assert!((sum - DMatrix::identity(m, m)).amax() <= 1e-9);
        assert!((dec.reconstruct() - a).norm() <= 1e-9);
        let p1 = dec.projector(0);
        assert!((p1 - DMatrix::from_element(m, m, 1.0 / m as f64)).amax() <= 1e-10);
    }

    #[test]
    fn clique_spectrum() {
        let a = generate(&GraphSpec::clique(4)).unwrap();
        let dec = decompose(&a).unwrap();
        assert_eq!(dec.q(), 2);
        assert_eq!(dec.gap(), 1.0);
        assert_eq!(dec.lambda2_modulus(), 0.0);
        assert_eq!(dec.multiplicity(1), 3);
        check_projectors(&dec, a.matrix());
    }

    #[test]
    fn four_cycle_groups_plus_and_minus_third() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 4, 2)).unwrap();
        let dec = decompose(&a).unwrap();
        assert_eq!(dec.solver(), Solver::Circulant);
        assert_eq!(dec.q(), 2);
        assert!((dec.lambda2_modulus() - 1.0 / 3.0).abs() < 1e-12);
        assert!((dec.gap() - 2.0 / 3.0).abs() < 1e-12);
        let mut re: Vec<f64> = dec.eigenvalues(1).iter().map(|l| l.re).collect();
        re.sort_by(f64::total_cmp);
        for (x, y) in re.iter().zip([-1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        check_projectors(&dec, a.matrix());
    }

    #[test]
    fn directed_ring_modulus() {
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 4, 1)).unwrap();
        let dec = decompose(&a).unwrap();
        let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((dec.lambda2_modulus() - half_sqrt2).abs() < 1e-12);
        assert!((dec.gap() - (1.0 - half_sqrt2)).abs() < 1e-12);
        check_projectors(&dec, a.matrix());
    }

    #[test]
    fn schur_path_handles_permuted_directed_ring() {
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 7, 2)).unwrap();
        let perm = [3, 0, 6, 2, 5, 1, 4];
        let b = a.permuted(&perm).unwrap();
        let da = decompose(&a).unwrap();
        let db = decompose(&b).unwrap();
        assert_eq!(db.solver(), Solver::Schur);
        assert_eq!(da.q(), db.q());
        for (x, y) in da.moduli().iter().zip(db.moduli()) {
            assert!((x - y).abs() < 1e-10);
        }
        check_projectors(&db, b.matrix());
    }

    #[test]
    fn symmetric_path_on_expander() {
        let spec = GraphSpec::new(GraphKind::RandomRegularExpander, 20, 3)
            .with_seed(5)
            .with_candidates(5);
        let a = generate(&spec).unwrap();
        let dec = decompose(&a).unwrap();
        assert_eq!(dec.solver(), Solver::Symmetric);
        check_projectors(&dec, a.matrix());
        let pairs = dec.real_eigenpairs(1).unwrap();
        let (l, v) = &pairs[0];
        let av = a.matrix() * v;
        assert!((av - v * *l).amax() < 1e-10);
    }

    #[test]
    fn non_normal_is_rejected() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.25, 0.25, 0.5]);
        assert!(matches!(
            decompose_matrix(&a),
            Err(SpectralError::NotNormal { .. })
        ));
    }

    #[test]
    fn alpha_formula_three_groups() {
        // Q = 3 with |λ2| = 0.5, |λ3| = 0.25: diag(1, 0.5, 0.25) is normal and
        // has the right group structure.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25]));
        // the consensus direction must be 1/√3·1, so rotate into that frame
        let h = householder_to_ones(3);
        let dec = decompose_matrix(&(&h * a * h.transpose())).unwrap();
        let alpha = alpha_from_fractions(&dec, &[0.5, 0.5]);
        assert!((alpha - 0.625f64.sqrt()).abs() < 1e-12);
        assert!((alpha - 0.790_569_415).abs() < 1e-9);
    }

    /// Orthogonal matrix whose first column is `1/√m`.
    fn householder_to_ones(m: usize) -> DMatrix<f64> {
        let mut v = DVector::from_element(m, 1.0 / (m as f64).sqrt());
        v[0] -= 1.0;
        let nv = v.norm_squared();
        DMatrix::identity(m, m) - (&v * v.transpose()) * (2.0 / nv)
    }

    #[test]
    fn aligned_gradients_give_alpha_one() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 12, 2)).unwrap();
        let dec = decompose(&a).unwrap();
        let u = DVector::from_fn(12, |i, _| {
            (2.0 * std::f64::consts::PI * i as f64 / 12.0).cos()
        });
        let sample = DMatrix::from_row_slice(1, 12, u.as_slice());
        let prof = energy_fractions(&dec, &[sample]).unwrap();
        assert!((prof.fractions[0] - 1.0).abs() < 1e-12);
        assert!((prof.alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clique_alpha_is_one() {
        let a = generate(&GraphSpec::clique(5)).unwrap();
        let dec = decompose(&a).unwrap();
        let g = center_columns(&DMatrix::from_fn(3, 5, |i, j| (i * 7 + j * j) as f64));
        assert_eq!(energy_fractions(&dec, &[g]).unwrap().alpha, 1.0);
    }

    #[test]
    fn zero_energy_and_uncentered_samples() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 6, 2)).unwrap();
        let dec = decompose(&a).unwrap();
        let prof = energy_fractions(&dec, &[DMatrix::zeros(2, 6)]).unwrap();
        assert!(prof.zero_energy);
        assert_eq!(prof.alpha, 1.0);
        assert!((prof.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let raw = DMatrix::from_element(1, 6, 1.0);
        assert!(matches!(
            energy_fractions(&dec, &[raw]),
            Err(SpectralError::NotCentered { .. })
        ));
    }

    #[test]
    fn running_max_dominates_each_iteration() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 8, 2)).unwrap();
        let dec = decompose(&a).unwrap();
        let it0 = vec![center_columns(&DMatrix::from_fn(2, 8, |i, j| {
            ((i + 3 * j) % 5) as f64
        }))];
        let it1 = vec![center_columns(&DMatrix::from_fn(2, 8, |i, j| {
            ((2 * i + j) % 3) as f64
        }))];
        let prof = energy_fractions_running_max(&dec, &[it0.clone(), it1]).unwrap();
        assert!((prof.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(prof.fractions.iter().all(|&e| e >= -1e-15));
        let first = energy_fractions(&dec, &it0).unwrap();
        assert!(prof.alpha >= first.fractions[0].sqrt() - 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn power_norm_matches_direct(
            kind in 0usize..3,
            m in 5usize..14,
            seed in 0u64..1000,
            xs in proptest::collection::vec(-1.0f64..1.0, 14),
        ) {
            let spec = match kind {
                0 => GraphSpec::new(GraphKind::UndirectedRingLattice, m + (m % 2), 2),
                1 => GraphSpec::new(GraphKind::DirectedRingLattice, m, 2),
                _ => GraphSpec::new(GraphKind::RandomRegularExpander, m + (m % 2), 3)
                    .with_seed(seed)
                    .with_candidates(3),
            };
            let a = generate(&spec).unwrap();
            let dec = decompose(&a).unwrap();
            let mm = a.m();
            let x = DVector::from_fn(mm, |i, _| xs[i]);
            let mut ax = x.clone();
            for h in 0..=5u32 {
                if [0, 1, 5].contains(&h) {
                    let direct = ax.norm_squared();
                    let spectral = dec.power_norm_sq(&x, h);
                    prop_assert!((direct - spectral).abs() <= 1e-8 * direct.max(1e-300) + 1e-14);
                }
                ax = a.matrix() * ax;
            }
        }

        #[test]
        fn gap_is_invariant_under_relabeling(m in 5usize..12, d in 1usize..4, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, m, d.min(m - 1))).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = a.permuted(&perm).unwrap();
            let ga = decompose(&a).unwrap().gap();
            let gb = decompose(&b).unwrap().gap();
            prop_assert!((ga - gb).abs() < 1e-10);
        }

        #[test]
        fn inverse_alpha_at_least_one(
            fr in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 12, 2)).unwrap();
            let dec = decompose(&a).unwrap();
            let n = dec.q() - 1;
            let mut f: Vec<f64> = fr.iter().cycle().take(n).copied().collect();
            let s: f64 = f.iter().sum::<f64>() + 1e-12;
            for v in &mut f { *v /= s; }
            let alpha = alpha_from_fractions(&dec, &f);
            prop_assert!(alpha <= 1.0 + 1e-12);
            prop_assert!(alpha >= f[0].sqrt() - 1e-12);
        }
    }
}
