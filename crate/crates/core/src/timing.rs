//! Wall-clock simulation of synchronous decentralized training.
//!
//! Node `j` starts iteration `k` once it has finished its own iteration
//! `k − 1` and has received the iteration-`(k − 1)` models of all its
//! in-neighbours, then computes for a random time `X`:
//!
//! ```text
//! t[j][k+1] = max(t[j][k], max_{i ∈ N_j} t[i][k] + delay) + X
//! ```
//!
//! Draws are made in a fixed order (iteration outer, node inner) from one
//! seeded stream, so two graphs simulated with the same seed see the same
//! `X` for every `(j, k)`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::MetricsLog;
use crate::io::{read_numeric_csv, write_numeric_csv, IoError};
use crate::topology::ConsensusMatrix;

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("trace '{source_name}' contains no samples")]
    EmptyTrace { source_name: String },
    #[error("trace '{source_name}' has non-positive sample {value} at position {index}")]
    NonPositiveSample {
        source_name: String,
        index: usize,
        value: f64,
    },
    #[error("metrics have {metrics} iterations but the schedule has {schedule}")]
    LengthMismatch { metrics: usize, schedule: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Sorted positive computation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
    source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub n: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

impl EmpiricalDistribution {
    pub fn new(mut samples: Vec<f64>, source: impl Into<String>) -> Result<Self, TimingError> {
        let source = source.into();
        if samples.is_empty() {
            return Err(TimingError::EmptyTrace {
                source_name: source,
            });
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(TimingError::NonPositiveSample {
                source_name: source,
                index,
                value,
            });
        }
        samples.sort_by(f64::total_cmp);
        Ok(EmpiricalDistribution { samples, source })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Inverse of the empirical CDF: the sample at index `⌊p·n⌋`.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.samples.len();
        let idx = ((p * n as f64).floor() as usize).min(n - 1);
        self.samples[idx]
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            n: self.len(),
            mean: self.mean(),
            p50: self.quantile(0.5),
            p99: self.quantile(0.99),
            min: self.samples[0],
            max: *self.samples.last().expect("non-empty"),
        }
    }
}

/// Reads one positive decimal per line; a non-numeric first line is treated
/// as a header and `#` lines are skipped. Extra columns are ignored.
pub fn load_trace(path: &Path) -> Result<EmpiricalDistribution, TimingError> {
    let table = read_numeric_csv(path)?;
    let values = if table.rows.is_empty() {
        Vec::new()
    } else {
        table.column(0)
    };
    let dist = EmpiricalDistribution::new(values, path.display().to_string())?;
    let s = dist.summary();
    log::info!(
        "trace {}: n={} mean={:.4} p50={:.4} p99={:.4}",
        path.display(),
        s.n,
        s.mean,
        s.p50,
        s.p99
    );
    Ok(dist)
}

pub fn write_trace(path: &Path, dist: &EmpiricalDistribution) -> Result<(), TimingError> {
    let rows: Vec<Vec<f64>> = dist.samples.iter().map(|&v| vec![v]).collect();
    write_numeric_csv(path, &["time"], &rows)?;
    Ok(())
}

/// Per-iteration computation time distribution, as written in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDistribution {
    /// A trace file, one time per line.
    Trace {
        path: PathBuf,
    },
    /// Inline empirical samples.
    Samples {
        values: Vec<f64>,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    Exponential {
        mean: f64,
    },
    /// Pareto with minimum `scale`, truncated at `cap`.
    Pareto {
        shape: f64,
        scale: f64,
        cap: f64,
    },
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    Constant {
        value: f64,
    },
}

impl TimeDistribution {
    /// Loads traces and checks parameters.
    pub fn sampler(&self) -> Result<TimeSampler, TimingError> {
        let bad = |msg: String| Err(TimingError::InvalidParameter(msg));
        Ok(match self {
            TimeDistribution::Trace { path } => TimeSampler::Empirical(load_trace(path)?),
            TimeDistribution::Samples { values } => {
                TimeSampler::Empirical(EmpiricalDistribution::new(values.clone(), "inline")?)
            }
            &TimeDistribution::Uniform { low, high } => {
                if !(low > 0.0 && high >= low && high.is_finite()) {
                    return bad(format!(
                        "uniform needs 0 < low <= high, got [{low}, {high}]"
                    ));
                }
                TimeSampler::Uniform { low, high }
            }
            &TimeDistribution::Exponential { mean } => {
                if !(mean > 0.0 && mean.is_finite()) {
                    return bad(format!("exponential mean must be positive, got {mean}"));
                }
                TimeSampler::Exponential { mean }
            }
            &TimeDistribution::Pareto { shape, scale, cap } => {
                if !(shape > 0.0 && scale > 0.0 && cap > scale && cap.is_finite()) {
                    return bad(format!(
                        "pareto needs shape > 0 and 0 < scale < cap, got shape={shape} scale={scale} cap={cap}"
                    ));
                }
                TimeSampler::Pareto { shape, scale, cap }
            }
            &TimeDistribution::Lognormal { mu, sigma } => {
                if !(sigma > 0.0 && mu.is_finite() && sigma.is_finite()) {
                    return bad(format!(
                        "lognormal needs sigma > 0, got mu={mu} sigma={sigma}"
                    ));
                }
                let normal = Normal::new(mu, sigma)
                    .map_err(|e| TimingError::InvalidParameter(e.to_string()))?;
                TimeSampler::Lognormal(normal)
            }
            &TimeDistribution::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return bad(format!("constant time must be positive, got {value}"));
                }
                TimeSampler::Constant(value)
            }
        })
    }
}

/// A resolved distribution, sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeSampler {
    Empirical(EmpiricalDistribution),
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    Pareto { shape: f64, scale: f64, cap: f64 },
    Lognormal(Normal),
    Constant(f64),
}

impl From<EmpiricalDistribution> for TimeSampler {
    fn from(d: EmpiricalDistribution) -> Self {
        TimeSampler::Empirical(d)
    }
}

impl TimeSampler {
    /// Inverse CDF at `p ∈ [0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            TimeSampler::Empirical(d) => d.quantile(p),
            TimeSampler::Uniform { low, high } => low + p * (high - low),
            TimeSampler::Exponential { mean } => -mean * (-p).ln_1p(),
            TimeSampler::Pareto { shape, scale, cap } => {
                let tail = (scale / cap).powf(*shape);
                scale * (1.0 - p * (1.0 - tail)).powf(-1.0 / shape)
            }
            TimeSampler::Lognormal(normal) => normal.inverse_cdf(p.max(f64::MIN_POSITIVE)).exp(),
            TimeSampler::Constant(v) => *v,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u)
    }

    /// `n` draws as an empirical distribution (e.g. a synthetic trace).
    pub fn to_empirical(&self, n: usize, seed: u64) -> Result<EmpiricalDistribution, TimingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| self.sample(&mut rng)).collect();
        EmpiricalDistribution::new(samples, "synthetic")
    }
}

/// How computation times vary across nodes and iterations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ComputeMode {
    /// Fresh independent draw for every node and iteration (transient stragglers).
    #[default]
    IidPerIteration,
    /// Node `j` always takes the `(j + ½)/M` quantile (persistent, deterministic).
    FixedPerNode,
    /// Fresh draws scaled by a per-node factor (persistent slow machines).
    NodeMultipliers { multipliers: Vec<f64> },
}

/// Completion times: row `j`, column `k` is the time node `j` finished
/// iteration `k` (column 0 is the start, time 0).
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionSchedule {
    t: DMatrix<f64>,
}

pub const SCHEDULE_HEADER: [&str; 3] = ["iter", "t_complete_max", "t_complete_min"];

impl CompletionSchedule {
    pub fn m(&self) -> usize {
        self.t.nrows()
    }

    /// Number of simulated iterations `K`.
    pub fn k(&self) -> usize {
        self.t.ncols() - 1
    }

    pub fn times(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn time(&self, j: usize, k: usize) -> f64 {
        self.t[(j, k)]
    }

    /// Time at which every node has finished iteration `k`.
    pub fn completion_max(&self, k: usize) -> f64 {
        self.t.column(k).max()
    }

    pub fn completion_min(&self, k: usize) -> f64 {
        self.t.column(k).min()
    }

    /// `max_j t[j][K] / K`.
    pub fn mean_iteration_duration(&self) -> f64 {
        self.completion_max(self.k()) / self.k() as f64
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (1..=self.k())
            .map(|k| vec![k as f64, self.completion_max(k), self.completion_min(k)])
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TimingError> {
        write_numeric_csv(path, &SCHEDULE_HEADER, &self.rows())?;
        Ok(())
    }
}

/// Simulates `k_iters` synchronous iterations on the support of `a`.
pub fn simulate_schedule(
    a: &ConsensusMatrix,
    dist: &TimeSampler,
    k_iters: usize,
    comm_delay: f64,
    mode: &ComputeMode,
    seed: u64,
) -> Result<CompletionSchedule, TimingError> {
    let m = a.m();
    if k_iters == 0 {
        return Err(TimingError::InvalidParameter("K must be at least 1".into()));
    }
    if !(comm_delay >= 0.0 && comm_delay.is_finite()) {
        return Err(TimingError::InvalidParameter(format!(
            "comm_delay must be >= 0, got {comm_delay}"
        )));
    }
    if let ComputeMode::NodeMultipliers { multipliers } = mode {
        if multipliers.len() != m || multipliers.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(TimingError::InvalidParameter(format!(
                "need {m} positive multipliers, got {multipliers:?}"
            )));
        }
    }
    let neighbors: Vec<Vec<usize>> = (0..m).map(|j| a.in_neighbors(j)).collect();
    let fixed: Vec<f64> = (0..m)
        .map(|j| dist.quantile((j as f64 + 0.5) / m as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = DMatrix::zeros(m, k_iters + 1);
    for k in 0..k_iters {
        for j in 0..m {
            let x = match mode {
                ComputeMode::IidPerIteration => dist.sample(&mut rng),
                ComputeMode::FixedPerNode => fixed[j],
                ComputeMode::NodeMultipliers { multipliers } => {
                    multipliers[j] * dist.sample(&mut rng)
                }
            };
            let ready = neighbors[j]
                .iter()
                .map(|&i| t[(i, k)] + comm_delay)
                .fold(t[(j, k)], f64::max);
            t[(j, k + 1)] = ready + x;
        }
    }
    Ok(CompletionSchedule { t })
}

/// Step curve of the average number of completed iterations per node
/// against time, starting at `(0, 0)` and ending at `(max_j t[j][K], K)`.
pub fn throughput_curve(sched: &CompletionSchedule) -> Vec<(f64, f64)> {
    let m = sched.m();
    let mut events: Vec<f64> = (0..m)
        .flat_map(|j| (1..=sched.k()).map(move |k| (j, k)))
        .map(|(j, k)| sched.time(j, k))
        .collect();
    events.sort_by(f64::total_cmp);
    let mut curve = vec![(0.0, 0.0)];
    for (n, &time) in events.iter().enumerate() {
        let avg = (n + 1) as f64 / m as f64;
        match curve.last_mut() {
            Some(last) if last.0 == time => last.1 = avg,
            _ => curve.push((time, avg)),
        }
    }
    curve
}

/// Value of a right-continuous step curve at time `t`.
pub fn step_value(curve: &[(f64, f64)], t: f64) -> f64 {
    match curve.partition_point(|&(x, _)| x <= t) {
        0 => f64::NAN,
        i => curve[i - 1].1,
    }
}

/// `(max_j t[j][k], loss at iteration k)` for `k = 1..=K`.
pub fn loss_vs_time(
    metrics: &MetricsLog,
    sched: &CompletionSchedule,
) -> Result<Vec<(f64, f64)>, TimingError> {
    if metrics.is_empty() || metrics.len() != sched.k() {
        return Err(TimingError::LengthMismatch {
            metrics: metrics.len(),
            schedule: sched.k(),
        });
    }
    Ok(metrics
        .records
        .iter()
        .map(|r| (sched.completion_max(r.iter), r.loss_avg_time))
        .collect())
}

/// First time at which a loss-vs-time curve reaches `level`.
pub fn time_to_reach(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    curve.iter().find(|(_, l)| *l <= level).map(|(t, _)| *t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::MetricsRecord;
    use crate::topology::{generate, GraphKind, GraphSpec};
    use std::io::Write;

    fn heavy() -> TimeSampler {
        TimeDistribution::Pareto {
            shape: 2.0,
            scale: 1.0,
            cap: 100.0,
        }
        .sampler()
        .unwrap()
    }

    #[test]
    fn load_simple_trace() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "time\n3.0\n1.0\n2.0").unwrap();
        let d = load_trace(f.path()).unwrap();
        assert_eq!(d.samples(), &[1.0, 2.0, 3.0]);
        assert_eq!(d.mean(), 2.0);
        assert_eq!(d.quantile(0.5), 2.0);
    }

    #[test]
    fn trace_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1.0\n0.0").unwrap();
        assert!(matches!(
            load_trace(f.path()),
            Err(TimingError::NonPositiveSample { .. })
        ));
        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "time").unwrap();
        assert!(matches!(
            load_trace(g.path()),
            Err(TimingError::EmptyTrace { .. })
        ));
    }

    #[test]
    fn lognormal_mean() {
        let s = TimeDistribution::Lognormal {
            mu: 0.0,
            sigma: 1.0,
        }
        .sampler()
        .unwrap();
        let d = s.to_empirical(100_000, 11).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for v in d.samples() {
            writeln!(f, "{v}").unwrap();
        }
        let loaded = load_trace(f.path()).unwrap();
        assert!((loaded.mean() / 0.5f64.exp() - 1.0).abs() < 0.03);
    }

    #[test]
    fn two_nodes_fixed_times_wait_for_each_other() {
        let a = generate(&GraphSpec::clique(2)).unwrap();
        let d: TimeSampler = EmpiricalDistribution::new(vec![1.0, 2.0], "two-point")
            .unwrap()
            .into();
        let s = simulate_schedule(&a, &d, 10, 0.0, &ComputeMode::FixedPerNode, 0).unwrap();
        for k in 1..=10 {
            // the fast node starts with the slow one and finishes one unit earlier
            assert_eq!(s.time(0, k), 2.0 * k as f64 - 1.0);
            assert_eq!(s.time(1, k), 2.0 * k as f64);
            assert_eq!(s.completion_max(k), 2.0 * k as f64);
        }
    }

    #[test]
    fn constant_times_do_not_straggle() {
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 3, 1)).unwrap();
        let s = simulate_schedule(
            &a,
            &TimeSampler::Constant(1.0),
            20,
            0.0,
            &ComputeMode::default(),
            1,
        )
        .unwrap();
        for j in 0..3 {
            for k in 0..=20 {
                assert_eq!(s.time(j, k), k as f64);
            }
        }
        let curve = throughput_curve(&s);
        assert_eq!(curve.last().copied(), Some((20.0, 20.0)));
        assert!(curve.iter().all(|(t, c)| t == c));
    }

    #[test]
    fn single_iteration_is_single_step() {
        let a = generate(&GraphSpec::clique(4)).unwrap();
        let s = simulate_schedule(
            &a,
            &TimeSampler::Constant(2.5),
            1,
            0.0,
            &ComputeMode::default(),
            1,
        )
        .unwrap();
        assert_eq!(throughput_curve(&s), vec![(0.0, 0.0), (2.5, 1.0)]);
    }

    #[test]
    fn comm_delay_adds_per_hop() {
        let a = generate(&GraphSpec::new(GraphKind::DirectedRingLattice, 3, 1)).unwrap();
        let s = simulate_schedule(
            &a,
            &TimeSampler::Constant(1.0),
            5,
            0.5,
            &ComputeMode::default(),
            1,
        )
        .unwrap();
        assert!((s.completion_max(5) - 5.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn clique_is_slower_than_ring_under_heavy_tails() {
        let clique = generate(&GraphSpec::clique(16)).unwrap();
        let ring = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 16, 2)).unwrap();
        let d = heavy();
        let sc = simulate_schedule(&clique, &d, 500, 0.0, &ComputeMode::default(), 5).unwrap();
        let sr = simulate_schedule(&ring, &d, 500, 0.0, &ComputeMode::default(), 5).unwrap();
        assert!(sc.mean_iteration_duration() > sr.mean_iteration_duration());
        let tc = throughput_curve(&sc);
        let tr = throughput_curve(&sr);
        for i in 1..50 {
            let t = sc.completion_max(500) * i as f64 / 50.0;
            assert!(step_value(&tr, t) >= step_value(&tc, t));
        }
    }

    #[test]
    fn coupled_sampling_orders_nested_graphs() {
        let d = heavy();
        let graphs: Vec<_> = [2, 4, 15]
            .iter()
            .map(|&deg| {
                let spec = if deg == 15 {
                    GraphSpec::clique(16)
                } else {
                    GraphSpec::new(GraphKind::UndirectedRingLattice, 16, deg)
                };
                simulate_schedule(
                    &generate(&spec).unwrap(),
                    &d,
                    200,
                    0.0,
                    &ComputeMode::default(),
                    9,
                )
                .unwrap()
            })
            .collect();
        for w in graphs.windows(2) {
            for (a, b) in w[0].times().iter().zip(w[1].times().iter()) {
                assert!(b >= a);
            }
        }
    }

    #[test]
    fn clique_round_is_max_of_draws() {
        // each clique round lasts the maximum of M fresh draws
        let m = 8;
        let a = generate(&GraphSpec::clique(m)).unwrap();
        let d = TimeSampler::Exponential { mean: 1.0 };
        let k = 20_000;
        let s = simulate_schedule(&a, &d, k, 0.0, &ComputeMode::default(), 2).unwrap();
        let harmonic: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
        assert!((s.mean_iteration_duration() / harmonic - 1.0).abs() < 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mc = 0.0;
        for _ in 0..k {
            mc += (0..m).map(|_| d.sample(&mut rng)).fold(0.0, f64::max);
        }
        assert!((s.completion_max(k) - mc).abs() < 1e-6 * mc);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 10, 2)).unwrap();
        let d = heavy();
        let x = simulate_schedule(&a, &d, 50, 0.1, &ComputeMode::default(), 4).unwrap();
        let y = simulate_schedule(&a, &d, 50, 0.1, &ComputeMode::default(), 4).unwrap();
        assert_eq!(x, y);
        let mode = ComputeMode::NodeMultipliers {
            multipliers: vec![1.0; 9],
        };
        assert!(simulate_schedule(&a, &d, 5, 0.0, &mode, 0).is_err());
    }

    #[test]
    fn truncated_pareto_quantiles() {
        let d = heavy();
        assert_eq!(d.quantile(0.0), 1.0);
        assert!((d.quantile(1.0) - 100.0).abs() < 1e-9);
        let p = 0.3;
        let x = d.quantile(p);
        let cdf = (1.0 - x.powi(-2)) / (1.0 - 1e-4);
        assert!((cdf - p).abs() < 1e-12);
    }

    fn log_of(n: usize) -> MetricsLog {
        MetricsLog {
            initial_loss: 1.0,
            initial_dw_fro: 0.0,
            records: (1..=n)
                .map(|k| MetricsRecord {
                    iter: k,
                    loss_avg_time: 1.0 / k as f64,
                    loss_avg: 0.0,
                    loss_worst_local: 0.0,
                    dw_fro: 0.0,
                    dg_fro_sq: 0.0,
                    g_fro_sq: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn loss_time_join() {
        let a = generate(&GraphSpec::clique(3)).unwrap();
        let s = simulate_schedule(
            &a,
            &TimeSampler::Constant(0.5),
            4,
            0.0,
            &ComputeMode::default(),
            0,
        )
        .unwrap();
        let c = loss_vs_time(&log_of(4), &s).unwrap();
        assert_eq!(c[3], (2.0, 0.25));
        assert_eq!(time_to_reach(&c, 0.4), Some(1.5));
        assert!(matches!(
            loss_vs_time(&log_of(0), &s),
            Err(TimingError::LengthMismatch { .. })
        ));
        assert!(matches!(
            loss_vs_time(&log_of(3), &s),
            Err(TimingError::LengthMismatch { .. })
        ));
    }
}
