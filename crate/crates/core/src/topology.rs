//! Communication graphs and their uniform-weight consensus matrices.
//!
//! An edge `(i, j)` means that node `j` waits for (and averages) the model of
//! node `i`. The consensus matrix puts weight `1/(d+1)` on every edge and on
//! the self loop, so `A[i][j] > 0` iff `(i, j)` is an edge or `i == j`.
//!
//! Generated kinds:
//!
//! - `clique`: `A = 11ᵀ/M`.
//! - `undirected_ring_lattice`: node `i` talks to `i ± 1, …, i ± ⌊d/2⌋`, plus
//!   the antipodal node `i + M/2` when `d` is odd. Symmetric and circulant.
//! - `directed_ring_lattice`: node `i` sends to `i + 1, …, i + d (mod M)`.
//!   Circulant, hence normal.
//! - `expander`: the undirected `d`-regular random graph with the largest
//!   spectral gap among `candidates` independent draws.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row and column sums must be 1 within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// `‖AᵀA − AAᵀ‖_F` must not exceed this.
pub const NORMALITY_TOL: f64 = 1e-10;
/// Default number of random regular graphs drawn per expander.
pub const DEFAULT_CANDIDATES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("infeasible graph specification: {0}")]
    InfeasibleSpec(String),
    #[error("random regular graph generation exceeded its retry budget of {attempts} draws")]
    GenerationFailure { attempts: usize },
    #[error("graph is not strongly connected")]
    DisconnectedGraph,
    #[error("invalid consensus matrix: {0}")]
    InvalidMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Clique,
    #[serde(alias = "ring", alias = "undirected_ring")]
    UndirectedRingLattice,
    #[serde(alias = "directed_ring")]
    DirectedRingLattice,
    #[serde(rename = "expander", alias = "random_regular_expander")]
    RandomRegularExpander,
    /// A matrix loaded from disk rather than generated.
    Custom,
}

impl GraphKind {
    pub fn is_directed(self) -> bool {
        matches!(self, GraphKind::DirectedRingLattice | GraphKind::Custom)
    }

    pub fn label(self) -> &'static str {
        match self {
            GraphKind::Clique => "clique",
            GraphKind::UndirectedRingLattice => "undirected_ring_lattice",
            GraphKind::DirectedRingLattice => "directed_ring_lattice",
            GraphKind::RandomRegularExpander => "expander",
            GraphKind::Custom => "custom",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for GraphKind {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| TopologyError::InfeasibleSpec(format!("unknown graph kind {s:?}")))
    }
}

fn default_candidates() -> usize {
    DEFAULT_CANDIDATES
}

/// What to generate. Serializes as
/// `{"kind": "expander", "M": 100, "d": 4, "seed": 7, "candidates": 200}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphSpec {
    pub kind: GraphKind,
    #[serde(rename = "M")]
    pub m: usize,
    /// Degree (in-degree for directed kinds). Ignored for cliques.
    #[serde(default)]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
}

impl GraphSpec {
    pub fn new(kind: GraphKind, m: usize, d: usize) -> Self {
        GraphSpec {
            kind,
            m,
            d,
            seed: 0,
            candidates: DEFAULT_CANDIDATES,
        }
    }

    pub fn clique(m: usize) -> Self {
        GraphSpec::new(GraphKind::Clique, m, m.saturating_sub(1))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_candidates(mut self, candidates: usize) -> Self {
        self.candidates = candidates;
        self
    }

    /// Degree actually used (clique is always `M − 1`).
    pub fn degree(&self) -> usize {
        match self.kind {
            GraphKind::Clique => self.m.saturating_sub(1),
            _ => self.d,
        }
    }

    /// Short name used for run directories and reports.
    pub fn label(&self) -> String {
        format!("{}_M{}_d{}", self.kind, self.m, self.degree())
    }

    pub fn check(&self) -> Result<(), TopologyError> {
        let m = self.m;
        if m == 0 {
            return Err(TopologyError::InfeasibleSpec("M must be positive".into()));
        }
        if self.kind == GraphKind::Clique || self.kind == GraphKind::Custom {
            return Ok(());
        }
        let d = self.d;
        if d == 0 || d >= m {
            return Err(TopologyError::InfeasibleSpec(format!(
                "degree d={d} must satisfy 1 <= d <= M-1 (M={m})"
            )));
        }
        match self.kind {
            GraphKind::UndirectedRingLattice | GraphKind::RandomRegularExpander => {
                if !(m * d).is_multiple_of(2) {
                    return Err(TopologyError::InfeasibleSpec(format!(
                        "an undirected {d}-regular graph on {m} nodes needs M*d even"
                    )));
                }
                if self.kind == GraphKind::UndirectedRingLattice && d == 1 && m != 2 {
                    return Err(TopologyError::InfeasibleSpec(
                        "an undirected 1-regular ring is disconnected for M > 2".into(),
                    ));
                }
                if self.kind == GraphKind::RandomRegularExpander && self.candidates == 0 {
                    return Err(TopologyError::InfeasibleSpec(
                        "expander needs at least one candidate".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Dense doubly-stochastic consensus matrix plus the graph it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    entries: DMatrix<f64>,
    spec: GraphSpec,
    self_weight_included: bool,
}

impl ConsensusMatrix {
    /// Wraps an arbitrary matrix (e.g. loaded from CSV). Only the shape is
    /// checked here; use [`validate`] for the stochasticity checks.
    pub fn from_dense(entries: DMatrix<f64>) -> Result<Self, TopologyError> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(TopologyError::InvalidMatrix(format!(
                "expected a non-empty square matrix, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(TopologyError::InvalidMatrix("non-finite entry".into()));
        }
        let m = entries.nrows();
        let d = (0..m)
            .map(|j| (0..m).filter(|&i| i != j && entries[(i, j)] > 0.0).count())
            .max()
            .unwrap_or(0);
        let self_weight_included = (0..m).all(|i| entries[(i, i)] > 0.0);
        Ok(ConsensusMatrix {
            entries,
            spec: GraphSpec::new(GraphKind::Custom, m, d),
            self_weight_included,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn self_weight_included(&self) -> bool {
        self.self_weight_included
    }

    /// In-neighbourhood `N_j = { i ≠ j : A[i][j] > 0 }`.
    pub fn in_neighbors(&self, j: usize) -> Vec<usize> {
        (0..self.m())
            .filter(|&i| i != j && self.entries[(i, j)] > 0.0)
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let a = &self.entries;
        let m = self.m();
        (0..m).all(|i| (i + 1..m).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
    }

    /// First row `c` if `A[i][j] == c[(j − i) mod M]` for all `i, j`.
    pub fn circulant_row(&self, tol: f64) -> Option<Vec<f64>> {
        let a = &self.entries;
        let m = self.m();
        let c: Vec<f64> = (0..m).map(|j| a[(0, j)]).collect();
        for i in 1..m {
            for j in 0..m {
                if (a[(i, j)] - c[(j + m - i) % m]).abs() > tol {
                    return None;
                }
            }
        }
        Some(c)
    }

    /// Relabels nodes: `B[π(i)][π(j)] = A[i][j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ConsensusMatrix, TopologyError> {
        let m = self.m();
        let mut seen = vec![false; m];
        if perm.len() != m
            || perm
                .iter()
                .any(|&p| p >= m || std::mem::replace(&mut seen[p], true))
        {
            return Err(TopologyError::InvalidMatrix("not a permutation".into()));
        }
        let mut b = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                b[(perm[i], perm[j])] = self.entries[(i, j)];
            }
        }
        let mut out = ConsensusMatrix::from_dense(b)?;
        out.spec = self.spec.clone();
        Ok(out)
    }
}

/// Diagnostic report produced by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub row_stochastic: bool,
    /// `max_i |Σ_j A[i][j] − 1|`
    pub row_residual: f64,
    pub column_stochastic: bool,
    pub column_residual: f64,
    pub nonnegative: bool,
    pub min_entry: f64,
    pub positive_diagonal: bool,
    pub min_diagonal: f64,
    pub normal: bool,
    /// `‖AᵀA − AAᵀ‖_F`
    pub normality_residual: f64,
    pub strongly_connected: bool,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.row_stochastic
            && self.column_stochastic
            && self.nonnegative
            && self.positive_diagonal
            && self.normal
            && self.strongly_connected
    }
}

/// Checks every matrix property the convergence analysis relies on. Never fails.
pub fn validate(a: &ConsensusMatrix) -> ValidationReport {
    let mat = a.matrix();
    let m = a.m();
    let row_residual = mat
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let column_residual = mat
        .column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let min_entry = mat.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_diagonal = (0..m).map(|i| mat[(i, i)]).fold(f64::INFINITY, f64::min);
    let normality_residual = normality_residual(mat);
    ValidationReport {
        row_stochastic: row_residual <= STOCHASTIC_TOL,
        row_residual,
        column_stochastic: column_residual <= STOCHASTIC_TOL,
        column_residual,
        nonnegative: min_entry >= 0.0,
        min_entry,
        positive_diagonal: min_diagonal > 0.0,
        min_diagonal,
        normal: normality_residual <= NORMALITY_TOL,
        normality_residual,
        strongly_connected: strongly_connected(mat),
    }
}

pub(crate) fn normality_residual(a: &DMatrix<f64>) -> f64 {
    let ata = a.transpose() * a;
    let aat = a * a.transpose();
    (ata - aat).norm()
}

/// BFS forward and backward from node 0 on the support of `A`.
pub fn strongly_connected(a: &DMatrix<f64>) -> bool {
    let m = a.nrows();
    if m == 0 {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..m {
                let w = if forward { a[(u, v)] } else { a[(v, u)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Builds the consensus matrix described by `spec`.
pub fn generate(spec: &GraphSpec) -> Result<ConsensusMatrix, TopologyError> {
    spec.check()?;
    let m = spec.m;
    let entries = match spec.kind {
        GraphKind::Clique => DMatrix::from_element(m, m, 1.0 / m as f64),
        GraphKind::UndirectedRingLattice => {
            circulant_from_offsets(m, &undirected_offsets(m, spec.d))
        }
        GraphKind::DirectedRingLattice => {
            let offsets: Vec<usize> = (1..=spec.d).collect();
            circulant_from_offsets(m, &offsets)
        }
        GraphKind::RandomRegularExpander => best_expander(spec)?,
        GraphKind::Custom => {
            return Err(TopologyError::InfeasibleSpec(
                "custom matrices are loaded, not generated".into(),
            ))
        }
    };
    if !strongly_connected(&entries) {
        return Err(TopologyError::DisconnectedGraph);
    }
    Ok(ConsensusMatrix {
        entries,
        spec: spec.clone(),
        self_weight_included: true,
    })
}

fn undirected_offsets(m: usize, d: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(d);
    for s in 1..=d / 2 {
        offsets.push(s);
        offsets.push(m - s);
    }
    if d % 2 == 1 {
        offsets.push(m / 2);
    }
    offsets
}

/// `A[i][(i + o) mod M] = 1/(d+1)` for every offset `o` and `o = 0`.
fn circulant_from_offsets(m: usize, offsets: &[usize]) -> DMatrix<f64> {
    let w = 1.0 / (offsets.len() + 1) as f64;
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        a[(i, i)] = w;
        for &o in offsets {
            a[(i, (i + o) % m)] = w;
        }
    }
    a
}

fn adjacency_to_consensus(m: usize, d: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let w = 1.0 / (d + 1) as f64;
    let mut a = DMatrix::from_diagonal_element(m, m, w);
    for &(u, v) in edges {
        a[(u, v)] = w;
        a[(v, u)] = w;
    }
    a
}

/// `|λ₂|` of a symmetric consensus matrix.
fn symmetric_lambda2_modulus(a: &DMatrix<f64>) -> f64 {
    let mut moduli: Vec<f64> = a
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.abs())
        .collect();
    moduli.sort_by(|x, y| y.total_cmp(x));
    moduli.get(1).copied().unwrap_or(0.0)
}

fn best_expander(spec: &GraphSpec) -> Result<DMatrix<f64>, TopologyError> {
    let (m, d) = (spec.m, spec.d);
    if d == m - 1 {
        // The complete graph is the only (M−1)-regular graph.
        return Ok(DMatrix::from_element(m, m, 1.0 / m as f64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let budget = 100 * spec.candidates;
    let mut draws = 0usize;
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..spec.candidates {
        let a = loop {
            if draws >= budget {
                return Err(TopologyError::GenerationFailure { attempts: draws });
            }
            draws += 1;
            let Some(edges) = try_random_regular(m, d, &mut rng) else {
                continue;
            };
            let a = adjacency_to_consensus(m, d, &edges);
            if strongly_connected(&a) {
                break a;
            }
        };
        let gap = 1.0 - symmetric_lambda2_modulus(&a);
        if best.as_ref().is_none_or(|(g, _)| gap > *g) {
            best = Some((gap, a));
        }
    }
    log::debug!(
        "expander M={m} d={d}: kept gap {:.6} after {draws} draws",
        best.as_ref().map(|b| b.0).unwrap_or(f64::NAN)
    );
    Ok(best.expect("at least one candidate").1)
}

/// One pairing-model draw: stubs are shuffled and paired, pairs that would
/// create a self loop or a multi-edge are rejected and their stubs re-paired.
/// Returns `None` when the remaining stubs cannot be completed.
fn try_random_regular<R: Rng>(m: usize, d: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    let mut adjacent = vec![false; m * m];
    let mut edges = Vec::with_capacity(m * d / 2);
    let mut stubs: Vec<usize> = (0..m).flat_map(|v| std::iter::repeat_n(v, d)).collect();
    while !stubs.is_empty() {
        let mut leftover: BTreeMap<usize, usize> = BTreeMap::new();
        stubs.shuffle(rng);
        for pair in stubs.chunks_exact(2) {
            let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if u != v && !adjacent[u * m + v] {
                adjacent[u * m + v] = true;
                edges.push((u, v));
            } else {
                *leftover.entry(u).or_default() += 1;
                *leftover.entry(v).or_default() += 1;
            }
        }
        if leftover.is_empty() {
            break;
        }
        let nodes: Vec<usize> = leftover.keys().copied().collect();
        let completable = nodes
            .iter()
            .enumerate()
            .any(|(x, &u)| nodes[x + 1..].iter().any(|&v| !adjacent[u * m + v]));
        if !completable {
            return None;
        }
        stubs = leftover
            .into_iter()
            .flat_map(|(v, c)| std::iter::repeat_n(v, c))
            .collect();
    }
    Some(edges)
}
