//! Synchronous distributed subgradient iterations.
//!
//! Every step computes the subgradient matrix `G(k)` at the current models
//! (column `j` from node `j`'s own minibatch), then mixes and descends:
//! `W(k+1) = W(k)·A − η·G(k)`.
//!
//! After step `k` (1-based) the metrics record holds
//! - `loss_avg_time`: `F` at the node- and time-average of `W(0), …, W(k−1)`,
//! - `loss_avg`: `F` at the node average of `W(k)`,
//! - `loss_worst_local`: the largest `F` over the per-node time averages,
//! - `dW_fro`: `‖W(k) − W(k)11ᵀ/M‖_F`,
//! - `dG_fro_sq`, `G_fro_sq`: energies of the gradients used in the step.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{minibatch_subgradient, DataError, Dataset, Objective, Partition};
use crate::io::{read_numeric_csv, write_numeric_csv, IoError};
use crate::numeric::center_columns;
use crate::topology::ConsensusMatrix;

/// Fraction of the largest one-step drop used by the knee rule on both ends.
pub const KNEE_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite model at node {node} after iteration {iter}")]
    NonFiniteModel { node: usize, iter: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid learning-rate grid: {0}")]
    InvalidGrid(String),
    #[error("the loss never decreases on the learning-rate grid")]
    NoDecrease,
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// The optimisation problem seen by the nodes.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub objective: Objective,
    pub dataset: &'a Dataset,
    pub partition: &'a Partition,
}

impl<'a> Problem<'a> {
    pub fn new(objective: Objective, dataset: &'a Dataset, partition: &'a Partition) -> Self {
        Problem {
            objective,
            dataset,
            partition,
        }
    }

    pub fn dim(&self) -> usize {
        self.dataset.n_features()
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.objective.loss(self.dataset, w)
    }
}

/// How the initial models are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Every node starts from `value·1`.
    Constant { value: f64 },
    /// Every node starts from the given vector.
    Vector { w: Vec<f64> },
    /// `w_j(0) = center + scale·N(0, I)`, independently per node.
    RandomPerNode {
        #[serde(default)]
        center: f64,
        scale: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for Init {
    fn default() -> Self {
        Init::Constant { value: 0.0 }
    }
}

impl Init {
    pub fn models(&self, n: usize, m: usize) -> Result<DMatrix<f64>, EngineError> {
        match self {
            Init::Constant { value } => Ok(DMatrix::from_element(n, m, *value)),
            Init::Vector { w } => {
                if w.len() != n {
                    return Err(EngineError::DimensionMismatch(format!(
                        "initial vector has {} entries, model has {n}",
                        w.len()
                    )));
                }
                Ok(DMatrix::from_fn(n, m, |i, _| w[i]))
            }
            Init::RandomPerNode {
                center,
                scale,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut w = DMatrix::zeros(n, m);
                for j in 0..m {
                    for i in 0..n {
                        let z: f64 = rng.sample(StandardNormal);
                        w[(i, j)] = center + scale * z;
                    }
                }
                Ok(w)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_avg_time: f64,
    pub loss_avg: f64,
    pub loss_worst_local: f64,
    #[serde(rename = "dW_fro")]
    pub dw_fro: f64,
    #[serde(rename = "dG_fro_sq")]
    pub dg_fro_sq: f64,
    #[serde(rename = "G_fro_sq")]
    pub g_fro_sq: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "iter",
    "loss_avg_time",
    "loss_avg",
    "loss_worst_local",
    "dW_fro",
    "dG_fro_sq",
    "G_fro_sq",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    /// `F(w̄(0))`.
    pub initial_loss: f64,
    /// `‖ΔW(0)‖_F`.
    pub initial_dw_fro: f64,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(iter, loss_avg_time)` pairs.
    pub fn loss_curve(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .map(|r| (r.iter, r.loss_avg_time))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        let rows: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.iter as f64,
                    r.loss_avg_time,
                    r.loss_avg,
                    r.loss_worst_local,
                    r.dw_fro,
                    r.dg_fro_sq,
                    r.g_fro_sq,
                ]
            })
            .collect();
        write_numeric_csv(path, &METRICS_HEADER, &rows)
    }

    /// Reads a metrics CSV; the initial values are not stored in the file
    /// and come back as NaN.
    pub fn read_csv(path: &Path) -> Result<MetricsLog, IoError> {
        let t = read_numeric_csv(path)?;
        let bad = |msg: String| IoError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        };
        let header = t
            .header
            .clone()
            .ok_or_else(|| bad("missing header".into()))?;
        let idx: Vec<usize> = METRICS_HEADER
            .iter()
            .map(|h| {
                header
                    .iter()
                    .position(|c| c == h)
                    .ok_or_else(|| bad(format!("missing column {h}")))
            })
            .collect::<Result<_, _>>()?;
        let records = t
            .rows
            .iter()
            .map(|r| MetricsRecord {
                iter: r[idx[0]] as usize,
                loss_avg_time: r[idx[1]],
                loss_avg: r[idx[2]],
                loss_worst_local: r[idx[3]],
                dw_fro: r[idx[4]],
                dg_fro_sq: r[idx[5]],
                g_fro_sq: r[idx[6]],
            })
            .collect();
        Ok(MetricsLog {
            initial_loss: f64::NAN,
            initial_dw_fro: f64::NAN,
            records,
        })
    }
}

/// Models, running sums and per-node random streams of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    w: DMatrix<f64>,
    k: usize,
    running_sum: DMatrix<f64>,
    eta: f64,
    rngs: Vec<ChaCha8Rng>,
    track_local: bool,
    log: MetricsLog,
}

/// Node `j` draws its minibatches from stream `j + 1` of the run seed.
pub fn node_rngs(seed: u64, m: usize) -> Vec<ChaCha8Rng> {
    (0..m)
        .map(|j| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(j as u64 + 1);
            r
        })
        .collect()
}

impl TrainState {
    pub fn new(
        problem: &Problem,
        w0: DMatrix<f64>,
        eta: f64,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if w0.nrows() != problem.dim() || w0.ncols() != problem.m() {
            return Err(EngineError::DimensionMismatch(format!(
                "W(0) is {}x{}, problem needs {}x{}",
                w0.nrows(),
                w0.ncols(),
                problem.dim(),
                problem.m()
            )));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(EngineError::InvalidConfig(format!(
                "learning rate {eta} must be finite and >= 0"
            )));
        }
        let log = MetricsLog {
            initial_loss: problem.loss(average_columns(&w0).as_slice()),
            initial_dw_fro: center_columns(&w0).norm(),
            records: Vec::new(),
        };
        let (n, m) = w0.shape();
        Ok(TrainState {
            running_sum: DMatrix::zeros(n, m),
            rngs: node_rngs(seed, m),
            w: w0,
            k: 0,
            eta,
            track_local: true,
            log,
        })
    }

    /// Skips the per-node time-average losses (reported as NaN) to save time.
    pub fn without_local_tracking(mut self) -> Self {
        self.track_local = false;
        self
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }

    /// `w̄(k)`.
    pub fn average_model(&self) -> DVector<f64> {
        average_columns(&self.w)
    }

    /// `ŵ̄(k−1)`: node and time average of `W(0), …, W(k−1)`.
    pub fn time_average_model(&self) -> Option<DVector<f64>> {
        (self.k > 0).then(|| average_columns(&self.running_sum) / self.k as f64)
    }

    /// `ŵ_j(k−1)` for every node, as columns.
    pub fn local_time_averages(&self) -> Option<DMatrix<f64>> {
        (self.k > 0).then(|| &self.running_sum / self.k as f64)
    }

    /// `G(k)` at the current models, advancing each node's stream.
    pub fn gradients(&mut self, problem: &Problem, b: usize) -> Result<DMatrix<f64>, EngineError> {
        let (n, m) = self.w.shape();
        let mut g = DMatrix::zeros(n, m);
        for j in 0..m {
            let wj: Vec<f64> = self.w.column(j).iter().copied().collect();
            let gj = minibatch_subgradient(
                &problem.objective,
                problem.dataset,
                problem.partition,
                j,
                &wj,
                b,
                &mut self.rngs[j],
            )?;
            g.set_column(j, &gj);
        }
        Ok(g)
    }

    /// Applies `W ← W·A − η·G` with a caller-supplied `G` and records metrics.
    pub fn apply(
        &mut self,
        a: &ConsensusMatrix,
        problem: &Problem,
        g: &DMatrix<f64>,
    ) -> Result<(), EngineError> {
        if a.m() != self.w.ncols() || g.shape() != self.w.shape() {
            return Err(EngineError::DimensionMismatch(format!(
                "A is {0}x{0}, W is {1}x{2}, G is {3}x{4}",
                a.m(),
                self.w.nrows(),
                self.w.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        self.running_sum += &self.w;
        let mut next = &self.w * a.matrix() - g * self.eta;
        for mut col in next.column_iter_mut() {
            problem.objective.project(col.as_mut_slice());
        }
        self.k += 1;
        if let Some(node) =
            (0..next.ncols()).find(|&j| next.column(j).iter().any(|v| !v.is_finite()))
        {
            return Err(EngineError::NonFiniteModel { node, iter: self.k });
        }
        self.w = next;
        let record = self.record(problem, g);
        self.log.records.push(record);
        Ok(())
    }

    fn record(&self, problem: &Problem, g: &DMatrix<f64>) -> MetricsRecord {
        let k = self.k as f64;
        let loss_avg_time = problem.loss((average_columns(&self.running_sum) / k).as_slice());
        let loss_worst_local = if self.track_local {
            self.running_sum
                .column_iter()
                .map(|c| {
                    let v: Vec<f64> = c.iter().map(|x| x / k).collect();
                    problem.loss(&v)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            f64::NAN
        };
        MetricsRecord {
            iter: self.k,
            loss_avg_time,
            loss_avg: problem.loss(self.average_model().as_slice()),
            loss_worst_local,
            dw_fro: center_columns(&self.w).norm(),
            dg_fro_sq: center_columns(g).norm_squared(),
            g_fro_sq: g.norm_squared(),
        }
    }
}

fn average_columns(x: &DMatrix<f64>) -> DVector<f64> {
    x.column_mean()
}

/// One synchronous iteration. Returns the gradient matrix `G(k)` it used.
pub fn dsm_step(
    state: &mut TrainState,
    a: &ConsensusMatrix,
    problem: &Problem,
    b: usize,
) -> Result<DMatrix<f64>, EngineError> {
    let g = state.gradients(problem, b)?;
    state.apply(a, problem, &g)?;
    Ok(g)
}

/// Parameters of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub eta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
    #[serde(default = "default_true")]
    pub track_local: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(eta: f64, k: usize, b: usize, seed: u64) -> Self {
        RunConfig {
            eta,
            k,
            b,
            seed,
            init: Init::default(),
            track_local: true,
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub w0: DMatrix<f64>,
    pub final_w: DMatrix<f64>,
}

/// Runs `K` steps.
pub fn run(
    a: &ConsensusMatrix,
    problem: &Problem,
    cfg: &RunConfig,
) -> Result<RunOutput, EngineError> {
    run_observed(a, problem, cfg, |_, _, _| {})
}

/// Like [`run`], calling `observer(k, G(k), state_after_step)` after every step.
pub fn run_observed<F>(
    a: &ConsensusMatrix,
    problem: &Problem,
    cfg: &RunConfig,
    mut observer: F,
) -> Result<RunOutput, EngineError>
where
    F: FnMut(usize, &DMatrix<f64>, &TrainState),
{
    if cfg.k == 0 {
        return Err(EngineError::InvalidConfig("K must be at least 1".into()));
    }
    if !(cfg.eta > 0.0) {
        return Err(EngineError::InvalidConfig(format!(
            "learning rate {} must be positive",
            cfg.eta
        )));
    }
    let w0 = cfg.init.models(problem.dim(), problem.m())?;
    let mut state = TrainState::new(problem, w0.clone(), cfg.eta, cfg.seed)?;
    if !cfg.track_local {
        state = state.without_local_tracking();
    }
    for k in 0..cfg.k {
        let g = dsm_step(&mut state, a, problem, cfg.b)?;
        observer(k, &g, &state);
    }
    let final_w = state.w.clone();
    Ok(RunOutput {
        log: state.into_log(),
        w0,
        final_w,
    })
}

/// `n` points spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeResult {
    pub eta: f64,
    pub eta_lo: f64,
    pub eta_hi: f64,
    /// `F(w̄(0))`.
    pub base_loss: f64,
    /// `F(w̄(1))` for every grid point.
    pub losses: Vec<f64>,
    pub grid: Vec<f64>,
    /// The loss never turned upward on the grid, so `eta_hi` is the grid end.
    pub degenerate: bool,
    pub fraction: f64,
}

/// Learning-rate knee rule on the loss after one iteration.
///
/// `eta_lo` is the first grid point whose drop from the starting loss exceeds
/// 5% of the largest drop; `eta_hi` is the last grid point (after the
/// minimiser) before the loss climbs more than 5% of the largest drop above
/// its minimum. Returns `sqrt(eta_lo · eta_hi)`.
pub fn knee_learning_rate(
    a: &ConsensusMatrix,
    problem: &Problem,
    b: usize,
    init: &Init,
    seed: u64,
    grid: &[f64],
) -> Result<KneeResult, EngineError> {
    if grid.len() < 8 {
        return Err(EngineError::InvalidGrid(format!(
            "{} points, need at least 8",
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || !(grid[0] > 0.0) {
        return Err(EngineError::InvalidGrid(
            "grid must be positive and increasing".into(),
        ));
    }
    if grid[grid.len() - 1] / grid[0] < 1e3 * (1.0 - 1e-9) {
        return Err(EngineError::InvalidGrid(
            "grid must span at least 3 decades".into(),
        ));
    }
    let w0 = init.models(problem.dim(), problem.m())?;
    let base = TrainState::new(problem, w0, grid[0], seed)?.without_local_tracking();
    let base_loss = base.log.initial_loss;
    let mut losses = Vec::with_capacity(grid.len());
    for &eta in grid {
        let mut st = base.clone();
        st.eta = eta;
        let loss = match dsm_step(&mut st, a, problem, b) {
            Ok(_) => st.log.records[0].loss_avg,
            Err(EngineError::NonFiniteModel { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        losses.push(if loss.is_finite() {
            loss
        } else {
            f64::INFINITY
        });
    }
    let drops: Vec<f64> = losses.iter().map(|l| base_loss - l).collect();
    let max_drop = drops.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_drop > 0.0) {
        return Err(EngineError::NoDecrease);
    }
    let thr = KNEE_FRACTION * max_drop;
    let lo = drops
        .iter()
        .position(|&d| d > thr)
        .expect("max drop exceeds its own fraction");
    let i_min = losses
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap();
    let ceiling = losses[i_min] + thr;
    let hi = (i_min + 1..grid.len())
        .find(|&j| losses[j] > ceiling)
        .map(|j| j - 1)
        .unwrap_or(grid.len() - 1);
    let degenerate = hi == grid.len() - 1;
    if degenerate {
        log::warn!("knee rule: loss kept decreasing up to the largest grid value");
    }
    Ok(KneeResult {
        eta: (grid[lo] * grid[hi]).sqrt(),
        eta_lo: grid[lo],
        eta_hi: grid[hi],
        base_loss,
        losses,
        grid: grid.to_vec(),
        degenerate,
        fraction: KNEE_FRACTION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_split, toy, toy_aligned, SyntheticSpec};
    use crate::topology::{generate, GraphKind, GraphSpec};

    fn regression(m: usize, s: usize, c: usize) -> (Dataset, Partition) {
        let ds = SyntheticSpec::regression(s, 3, 2).generate().unwrap();
        let part = random_split(&ds, m, c, 1).unwrap();
        (ds, part)
    }

    #[test]
    fn full_replication_keeps_columns_identical() {
        let (ds, part) = regression(4, 20, 4);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 4, 1)).unwrap();
        let cfg = RunConfig::new(0.05, 30, 20, 0).with_init(Init::Constant { value: 0.3 });
        run_observed(&a, &p, &cfg, |_, _, st| {
            let w = st.w();
            for j in 1..4 {
                assert!((w.column(j) - w.column(0)).amax() <= 1e-12);
            }
        })
        .unwrap();
    }

    #[test]
    fn clique_step_equals_centralized_step() {
        let (ds, part) = regression(4, 20, 4);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::clique(4)).unwrap();
        let w0 = DMatrix::from_element(3, 4, 0.5);
        let mut st = TrainState::new(&p, w0, 0.1, 0).unwrap();
        dsm_step(&mut st, &a, &p, 20).unwrap();
        let g = Objective::LinearMse.full_gradient(&ds, &[0.5, 0.5, 0.5]);
        for j in 0..4 {
            for i in 0..3 {
                assert!((st.w()[(i, j)] - (0.5 - 0.1 * g[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_consensus_converges_to_initial_average() {
        let (ds, part) = regression(3, 12, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 3, 1)).unwrap();
        let w0 = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 6.0, 0.0, 0.0, 3.0, -1.0, 1.0, 0.0]);
        let avg = w0.column_mean();
        let mut st = TrainState::new(&p, w0.clone(), 0.0, 0).unwrap();
        let lambda2 = crate::spectral::decompose(&a).unwrap().lambda2_modulus();
        let dw0 = center_columns(&w0).norm();
        for k in 1..=60 {
            let g = DMatrix::zeros(3, 3);
            st.apply(&a, &p, &g).unwrap();
            let dw = center_columns(st.w()).norm();
            assert!(dw <= lambda2.powi(k) * dw0 * 3f64.sqrt() + 1e-14);
        }
        for j in 0..3 {
            assert!((st.w().column(j) - &avg).amax() < 1e-6);
        }
    }

    #[test]
    fn average_model_follows_mean_gradient() {
        let (ds, part) = regression(4, 40, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 4, 2)).unwrap();
        let mut st = TrainState::new(&p, DMatrix::zeros(3, 4), 0.05, 7).unwrap();
        for _ in 0..20 {
            let before = st.average_model();
            let g = dsm_step(&mut st, &a, &p, 3).unwrap();
            let expected = before - g.column_mean() * 0.05;
            assert!((st.average_model() - expected).amax() <= 1e-12);
        }
    }

    #[test]
    fn toy_worst_node_matches_closed_model() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 100, 4)).unwrap();
        let dec = crate::spectral::decompose(&a).unwrap();
        let (lambda2, u) = toy::aligned_direction(&dec).unwrap();
        let ds = toy::build_toy_dataset(&u, 0.1).unwrap();
        let part = toy_aligned(&ds);
        let p = Problem::new(Objective::toy(0.1), &ds, &part);
        let worst = u.iter().position(|&v| v == -1.0).unwrap();
        let mut st = TrainState::new(&p, DMatrix::from_element(1, 100, 1.0), 0.1, 0).unwrap();
        for k in 1..=300u64 {
            dsm_step(&mut st, &a, &p, 1).unwrap();
            let w = st.w()[(0, worst)];
            assert!(
                (w - toy::toy_worst_model(lambda2, 0.1, 0.1, k)).abs() <= 1e-12 * w.abs().max(1.0)
            );
        }
    }

    #[test]
    fn unrolled_form() {
        let (ds, part) = regression(5, 25, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 5, 2)).unwrap();
        let cfg = RunConfig::new(0.02, 15, 2, 4).with_init(Init::RandomPerNode {
            center: 0.0,
            scale: 1.0,
            seed: 3,
        });
        let mut gs = Vec::new();
        let out = run_observed(&a, &p, &cfg, |_, g, _| gs.push(g.clone())).unwrap();
        let am = a.matrix();
        let mut unrolled = out.w0.clone();
        for _ in 0..15 {
            unrolled = &unrolled * am;
        }
        for (h, g) in gs.iter().enumerate() {
            let mut term = g.clone();
            for _ in 0..(15 - 1 - h) {
                term = &term * am;
            }
            unrolled -= term * 0.02;
        }
        assert!((unrolled - out.final_w).amax() <= 1e-10);
    }

    #[test]
    fn single_iteration_log() {
        let (ds, part) = regression(2, 10, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::clique(2)).unwrap();
        let cfg = RunConfig::new(0.01, 1, 1, 0).with_init(Init::Constant { value: 0.2 });
        let out = run(&a, &p, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log.records[0].iter, 1);
        assert_eq!(out.log.records[0].loss_avg_time, p.loss(&[0.2, 0.2, 0.2]));
        assert_eq!(out.log.initial_loss, p.loss(&[0.2, 0.2, 0.2]));
    }

    #[test]
    fn bit_reproducible_and_csv_round_trip() {
        let (ds, part) = regression(4, 40, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 4, 2)).unwrap();
        let cfg = RunConfig::new(0.05, 25, 3, 11);
        let x = run(&a, &p, &cfg).unwrap();
        let y = run(&a, &p, &cfg).unwrap();
        assert_eq!(x.log, y.log);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        x.log.write_csv(&path).unwrap();
        let back = MetricsLog::read_csv(&path).unwrap();
        assert_eq!(back.records, x.log.records);
    }

    #[test]
    fn non_finite_is_reported() {
        let (ds, part) = regression(2, 10, 1);
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::clique(2)).unwrap();
        let cfg = RunConfig::new(1e200, 5, 1, 0).with_init(Init::Constant { value: 1e200 });
        assert!(matches!(
            run(&a, &p, &cfg),
            Err(EngineError::NonFiniteModel { .. })
        ));
    }

    fn square_problem() -> (Dataset, Partition) {
        // f(w) = (w·1 − 0)² = w²
        let ds = Dataset::from_rows(vec![1.0; 4], 1, vec![0.0; 4]).unwrap();
        let part = random_split(&ds, 4, 1, 0).unwrap();
        (ds, part)
    }

    #[test]
    fn knee_on_square_is_interior_and_topology_free() {
        let (ds, part) = square_problem();
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let grid = geometric_grid(1e-3, 10.0, 25);
        let init = Init::Constant { value: 1.0 };
        let ring = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 4, 2)).unwrap();
        let clique = generate(&GraphSpec::clique(4)).unwrap();
        let r = knee_learning_rate(&ring, &p, 1, &init, 0, &grid).unwrap();
        let c = knee_learning_rate(&clique, &p, 1, &init, 0, &grid).unwrap();
        assert!(r.eta > grid[0] && r.eta < grid[24]);
        assert!(!r.degenerate);
        assert_eq!(r.eta, c.eta);
    }

    #[test]
    fn knee_requires_decrease_and_good_grid() {
        let (ds, part) = square_problem();
        let p = Problem::new(Objective::LinearMse, &ds, &part);
        let a = generate(&GraphSpec::clique(4)).unwrap();
        let at_opt = Init::Constant { value: 0.0 };
        let grid = geometric_grid(1e-3, 10.0, 10);
        assert!(matches!(
            knee_learning_rate(&a, &p, 1, &at_opt, 0, &grid),
            Err(EngineError::NoDecrease)
        ));
        let short = geometric_grid(1e-1, 10.0, 10);
        assert!(matches!(
            knee_learning_rate(&a, &p, 1, &at_opt, 0, &short),
            Err(EngineError::InvalidGrid(_))
        ));
    }

    #[test]
    fn knee_on_toy_is_degenerate() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 10, 2)).unwrap();
        let dec = crate::spectral::decompose(&a).unwrap();
        let (_, u) = toy::aligned_direction(&dec).unwrap();
        let ds = toy::build_toy_dataset(&u, 0.1).unwrap();
        let part = toy_aligned(&ds);
        let p = Problem::new(Objective::toy(0.1), &ds, &part);
        let grid = geometric_grid(1e-3, 10.0, 13);
        let r = knee_learning_rate(&a, &p, 1, &Init::Constant { value: 1.0 }, 0, &grid).unwrap();
        assert!(r.degenerate);
        // one-step loss is exactly linear in eta: 1 + zeta(1 − eta·zeta)
        for (eta, l) in r.grid.iter().zip(&r.losses) {
            assert!((l - (1.0 + 0.1 * (1.0 - eta * 0.1))).abs() < 1e-12);
        }
    }
}
