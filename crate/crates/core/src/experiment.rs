//! JSON-configured experiment sweeps.
//!
//! A config names one topology or a list of them, a dataset, an objective, a
//! partition, one batch size or a list, and a learning rate (fixed or picked
//! by the knee rule). Every `(topology, B)` pair becomes a run; a clique with
//! the same `M` and `B` is always added as the reference the divergence
//! predictions compare against. Each run writes into `<outputs>/<label>/`:
//!
//! | File | Content |
//! |------|---------|
//! | `metrics.csv` | per-iteration losses and norms |
//! | `stats.json` | spectrum, measured statistics, closed-form estimates, `β`, `β̂`, bound inputs |
//! | `bounds.csv` | all six bound curves for `K = 1..=K` |
//! | `divergence.json` | predicted and measured divergence iterations against the clique |
//! | `manifest.json` | resolved config, seeds, version, every default and threshold used |
//!
//! plus `schedule.csv`, `throughput.csv` and `loss_time.csv` when timing is
//! configured. `<outputs>/index.json` lists the runs.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bounds::{
    self, experimental_divergence, BoundError, BoundInputs, BoundKind, DivergenceOutcome,
    Prediction,
};
use crate::data::{
    self, build_toy_dataset, load_csv, random_split, split_by_label, toy_aligned, ColumnRoles,
    DataError, Dataset, Objective, Partition, PartitionMode, SyntheticSpec,
};
use crate::engine::{
    self, geometric_grid, EngineError, Init, KneeResult, MetricsLog, Problem, RunConfig,
};
use crate::estimators::{
    self, beta, beta_hat, distance_to_optimum, measure_stats, ClosedFormEstimates, EstimatorError,
    GradientStats, OptimumDistance, OracleResult,
};
use crate::io::{json_f64, write_numeric_csv, IoError};
use crate::spectral::{
    self, decompose, energy_fractions_running_max, EnergyMode, SpectralDecomposition,
    SpectralError, SpectralSummary,
};
use crate::timing::{self, ComputeMode, TimeDistribution, TimingError};
use crate::topology::{self, generate, ConsensusMatrix, GraphKind, GraphSpec, TopologyError};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "DSMLAB_THREADS";
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.04, 0.10];
const FILES: [&str; 5] = [
    "metrics.csv",
    "stats.json",
    "bounds.csv",
    "divergence.json",
    "manifest.json",
];

/// A config problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Module errors raised while executing one run.
#[derive(Debug, Error)]
pub enum RunFailure {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error in {0}")]
    Config(#[from] ConfigError),
    #[error("run {run}: {source}")]
    Run {
        run: String,
        #[source]
        source: RunFailure,
    },
    #[error("missing or unreadable artifact {path}: {detail}")]
    MissingArtifacts { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl ExperimentError {
    fn run(label: &str, e: impl Into<RunFailure>) -> Self {
        ExperimentError::Run {
            run: label.to_string(),
            source: e.into(),
        }
    }

    fn missing(path: &Path, detail: impl fmt::Display) -> Self {
        ExperimentError::MissingArtifacts {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    /// True for problems with the config itself (as opposed to run failures).
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|e| IoError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).expect("artifact types always serialize");
    write_file(path, &(text + "\n"))
}

/// A single value or a non-empty sweep list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn items(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// A fixed learning rate or `"knee"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSetting {
    Fixed(f64),
    Knee,
}

impl Serialize for EtaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            EtaSetting::Fixed(x) => s.serialize_f64(*x),
            EtaSetting::Knee => s.serialize_str("knee"),
        }
    }
}

impl<'de> Deserialize<'de> for EtaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(x) => Ok(EtaSetting::Fixed(x)),
            Raw::S(s) if s == "knee" => Ok(EtaSetting::Knee),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"knee\", got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

fn default_zeta() -> f64 {
    0.1
}

/// Exactly one of `path`, `synthetic` and `toy` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnRoles,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// The aligned toy problem; the dataset depends on the topology.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(default)]
    pub mode: PartitionMode,
    #[serde(rename = "C", default = "one")]
    pub c: usize,
}

fn one() -> usize {
    1
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mode: PartitionMode::RandomSplit,
            c: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub energy_mode: EnergyMode,
}

fn default_samples() -> usize {
    estimators::DEFAULT_SAMPLES
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            samples: default_samples(),
            energy_mode: EnergyMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeConfig {
    #[serde(default = "default_knee_lo")]
    pub lo: f64,
    #[serde(default = "default_knee_hi")]
    pub hi: f64,
    #[serde(default = "default_knee_points")]
    pub points: usize,
}

fn default_knee_lo() -> f64 {
    1e-5
}
fn default_knee_hi() -> f64 {
    10.0
}
fn default_knee_points() -> usize {
    31
}

impl Default for KneeConfig {
    fn default() -> Self {
        KneeConfig {
            lo: default_knee_lo(),
            hi: default_knee_hi(),
            points: default_knee_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Re-measure the statistics at the predicted iteration and keep the
    /// later prediction.
    #[serde(default = "yes")]
    pub refine: bool,
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}
fn yes() -> bool {
    true
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            thresholds: default_thresholds(),
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub distribution: TimeDistribution,
    #[serde(default)]
    pub comm_delay: f64,
    #[serde(default)]
    pub compute: ComputeMode,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub topology: OneOrMany<GraphSpec>,
    pub dataset: DatasetConfig,
    pub objective: Objective,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(rename = "B")]
    pub b: OneOrMany<usize>,
    pub eta: EtaSetting,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub knee: KneeConfig,
    #[serde(default)]
    pub divergence: DivergenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingConfig>,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
}

/// Seeds derived from the experiment seed, one per random component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub partition: u64,
    pub train: u64,
    pub stats: u64,
    pub knee: u64,
    pub timing: u64,
}

impl Seeds {
    pub fn derive(seed: u64, timing: Option<u64>) -> Self {
        Seeds {
            partition: seed,
            train: seed.wrapping_add(1),
            stats: seed.wrapping_add(2),
            knee: seed.wrapping_add(3),
            timing: timing.unwrap_or(seed),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::new("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    /// Accepts a config or a run manifest (whose `config` field is used).
    pub fn from_value(value: serde_json::Value) -> Result<Self, ConfigError> {
        let value = match value {
            serde_json::Value::Object(mut map)
                if map.contains_key("config") && map.contains_key("version") =>
            {
                map.remove("config").expect("checked")
            }
            v => v,
        };
        if let serde_json::Value::Object(map) = &value {
            for key in ["topology", "dataset", "objective", "B", "eta", "K"] {
                if !map.contains_key(key) {
                    return Err(ConfigError::new(key, "missing required field"));
                }
            }
            // deserialize field by field so errors carry their path
            for (key, v) in map {
                let res = match key.as_str() {
                    "topology" => {
                        serde_json::from_value::<OneOrMany<GraphSpec>>(v.clone()).map(|_| ())
                    }
                    "dataset" => serde_json::from_value::<DatasetConfig>(v.clone()).map(|_| ()),
                    "objective" => serde_json::from_value::<Objective>(v.clone()).map(|_| ()),
                    "partition" => serde_json::from_value::<PartitionConfig>(v.clone()).map(|_| ()),
                    "B" => serde_json::from_value::<OneOrMany<usize>>(v.clone()).map(|_| ()),
                    "eta" => serde_json::from_value::<EtaSetting>(v.clone()).map(|_| ()),
                    "K" => serde_json::from_value::<usize>(v.clone()).map(|_| ()),
                    "seed" => serde_json::from_value::<u64>(v.clone()).map(|_| ()),
                    "init" => serde_json::from_value::<Init>(v.clone()).map(|_| ()),
                    "estimation" => {
                        serde_json::from_value::<EstimationConfig>(v.clone()).map(|_| ())
                    }
                    "knee" => serde_json::from_value::<KneeConfig>(v.clone()).map(|_| ()),
                    "divergence" => {
                        serde_json::from_value::<DivergenceConfig>(v.clone()).map(|_| ())
                    }
                    "timing" => {
                        serde_json::from_value::<Option<TimingConfig>>(v.clone()).map(|_| ())
                    }
                    "name" | "outputs" => Ok(()),
                    other => return Err(ConfigError::new(other, "unknown field")),
                };
                res.map_err(|e| ConfigError::new(key.clone(), e.to_string()))?;
            }
        }
        serde_json::from_value(value).map_err(|e| ConfigError::new("<root>", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed, self.timing.as_ref().and_then(|t| t.seed))
    }

    /// Checks the invariants that can be verified without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let topologies = self.topology.items();
        if topologies.is_empty() {
            return Err(ConfigError::new("topology", "sweep list is empty"));
        }
        for (i, spec) in topologies.iter().enumerate() {
            let field = match self.topology {
                OneOrMany::One(_) => "topology".to_string(),
                OneOrMany::Many(_) => format!("topology[{i}]"),
            };
            if spec.kind == GraphKind::Custom {
                return Err(ConfigError::new(
                    field,
                    "custom matrices cannot be generated from a config",
                ));
            }
            spec.check()
                .map_err(|e| ConfigError::new(field, e.to_string()))?;
        }
        let bs = self.b.items();
        if bs.is_empty() {
            return Err(ConfigError::new("B", "sweep list is empty"));
        }
        if bs.contains(&0) {
            return Err(ConfigError::new("B", "batch size must be at least 1"));
        }
        if self.k == 0 {
            return Err(ConfigError::new("K", "must be at least 1"));
        }
        if let EtaSetting::Fixed(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(ConfigError::new(
                    "eta",
                    format!("must be positive, got {eta}"),
                ));
            }
        }
        let d = &self.dataset;
        let sources = [d.path.is_some(), d.synthetic.is_some(), d.toy.is_some()];
        if sources.iter().filter(|&&x| x).count() != 1 {
            return Err(ConfigError::new(
                "dataset",
                "set exactly one of path, synthetic, toy",
            ));
        }
        if let Some(p) = &d.path {
            if !p.is_file() {
                return Err(ConfigError::new(
                    "dataset.path",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        if let Some(s) = &d.synthetic {
            if s.samples == 0 || s.features == 0 {
                return Err(ConfigError::new(
                    "dataset.synthetic",
                    "samples and features must be positive",
                ));
            }
        }
        if d.toy.is_some() && !matches!(self.objective, Objective::ToyLinear { .. }) {
            return Err(ConfigError::new(
                "objective",
                "the toy dataset needs the toy_linear objective",
            ));
        }
        let c = self.partition.c;
        for spec in &topologies {
            if c == 0 || c > spec.m {
                return Err(ConfigError::new(
                    "partition.C",
                    format!("must lie in 1..=M (M={})", spec.m),
                ));
            }
        }
        if self.partition.mode != PartitionMode::RandomSplit && c != 1 {
            return Err(ConfigError::new(
                "partition.C",
                "replication is only supported for random_split",
            ));
        }
        if d.toy.is_some()
            && self.partition.mode == PartitionMode::RandomSplit
            && self.partition.c != 1
        {
            return Err(ConfigError::new(
                "partition.C",
                "the toy problem uses one point per node",
            ));
        }
        if self.estimation.samples < 2 {
            return Err(ConfigError::new(
                "estimation.samples",
                "need at least 2 samples",
            ));
        }
        let kc = &self.knee;
        if !(kc.lo > 0.0 && kc.hi / kc.lo >= 1e3 * (1.0 - 1e-9) && kc.points >= 8) {
            return Err(ConfigError::new(
                "knee",
                "grid must be positive, span 3 decades and have 8 points",
            ));
        }
        if self
            .divergence
            .thresholds
            .iter()
            .any(|&p| !(p > 0.0 && p < 1.0))
        {
            return Err(ConfigError::new(
                "divergence.thresholds",
                "thresholds must lie in (0, 1)",
            ));
        }
        if let Some(t) = &self.timing {
            if let TimeDistribution::Trace { path } = &t.distribution {
                if !path.is_file() {
                    return Err(ConfigError::new(
                        "timing.distribution.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
            if !(t.comm_delay >= 0.0 && t.comm_delay.is_finite()) {
                return Err(ConfigError::new(
                    "timing.comm_delay",
                    "must be a non-negative number",
                ));
            }
            t.distribution
                .sampler()
                .map_err(|e| ConfigError::new("timing.distribution", e.to_string()))?;
        }
        let mut seen = BTreeMap::new();
        for spec in &topologies {
            for &b in &bs {
                let label = run_label(spec, b);
                if seen.insert(label.clone(), ()).is_some() {
                    return Err(ConfigError::new(
                        "topology",
                        format!("duplicate run {label}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads a config (or a run manifest) from disk.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

pub fn run_label(spec: &GraphSpec, b: usize) -> String {
    format!("{}_B{b}", spec.label())
}

/// The dataset shared by all runs, unless it depends on the topology.
fn shared_dataset(cfg: &ExperimentConfig) -> Result<Option<Dataset>, ExperimentError> {
    let d = &cfg.dataset;
    let ds = if let Some(path) = &d.path {
        load_csv(path, &d.columns).map_err(|e| ConfigError::new("dataset.path", e.to_string()))?
    } else if let Some(spec) = &d.synthetic {
        spec.generate()
            .map_err(|e| ConfigError::new("dataset.synthetic", e.to_string()))?
    } else {
        return Ok(None);
    };
    Ok(Some(if d.standardize { ds.standardized() } else { ds }))
}

/// Everything one run needs: the matrix, its spectrum, the data and the split.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub label: String,
    pub spec: GraphSpec,
    pub b: usize,
    pub matrix: ConsensusMatrix,
    pub decomposition: SpectralDecomposition,
    pub dataset: Dataset,
    pub partition: Partition,
    pub objective: Objective,
}

impl PreparedRun {
    pub fn problem(&self) -> Problem<'_> {
        Problem::new(self.objective, &self.dataset, &self.partition)
    }

    /// Builds the run for `(spec, b)`; `shared` is the topology-independent
    /// dataset, if any.
    pub fn new(
        cfg: &ExperimentConfig,
        spec: &GraphSpec,
        b: usize,
        shared: Option<&Dataset>,
    ) -> Result<PreparedRun, ExperimentError> {
        let label = run_label(spec, b);
        let fail = |e: RunFailure| ExperimentError::Run {
            run: label.clone(),
            source: e,
        };
        let matrix = generate(spec).map_err(|e| fail(e.into()))?;
        let decomposition = decompose(&matrix).map_err(|e| fail(e.into()))?;
        let seeds = cfg.seeds();
        let (dataset, partition) = match (&cfg.dataset.toy, shared) {
            (Some(toy), _) => {
                let (_, u) = data::toy::aligned_direction(&decomposition).ok_or_else(|| {
                    fail(RunFailure::Data(DataError::InvalidDataset(
                        "no real second eigenvector to align the toy data with".into(),
                    )))
                })?;
                let ds = build_toy_dataset(&u, toy.zeta).map_err(|e| fail(e.into()))?;
                let part = toy_aligned(&ds);
                (ds, part)
            }
            (None, Some(ds)) => {
                let part = match cfg.partition.mode {
                    PartitionMode::RandomSplit => {
                        random_split(ds, spec.m, cfg.partition.c, seeds.partition)
                    }
                    PartitionMode::ByLabel => split_by_label(ds, spec.m),
                    PartitionMode::ToyAligned => {
                        if ds.len() == spec.m {
                            Ok(toy_aligned(ds))
                        } else {
                            Err(DataError::InfeasibleReplication(format!(
                                "toy_aligned needs one point per node (S={}, M={})",
                                ds.len(),
                                spec.m
                            )))
                        }
                    }
                }
                .map_err(|e| fail(e.into()))?;
                (ds.clone(), part)
            }
            (None, None) => unreachable!("validated: exactly one dataset source"),
        };
        if b > partition.local_size() {
            return Err(fail(RunFailure::Data(DataError::BatchTooLarge {
                b,
                local: partition.local_size(),
            })));
        }
        Ok(PreparedRun {
            label,
            spec: spec.clone(),
            b,
            matrix,
            decomposition,
            dataset,
            partition,
            objective: cfg.objective,
        })
    }

    fn run_config(&self, cfg: &ExperimentConfig, eta: f64, k: usize) -> RunConfig {
        RunConfig::new(eta, k, self.b, cfg.seeds().train).with_init(cfg.init.clone())
    }

    /// `W(k)` reached by re-running the (deterministic) training for `k` steps.
    pub fn models_at(
        &self,
        cfg: &ExperimentConfig,
        eta: f64,
        k: usize,
    ) -> Result<DMatrix<f64>, ExperimentError> {
        let problem = self.problem();
        if k == 0 {
            return cfg
                .init
                .models(problem.dim(), problem.m())
                .map_err(|e| ExperimentError::run(&self.label, e));
        }
        let mut rc = self.run_config(cfg, eta, k);
        rc.track_local = false;
        engine::run(&self.matrix, &problem, &rc)
            .map(|o| o.final_w)
            .map_err(|e| ExperimentError::run(&self.label, e))
    }

    /// Statistics measured at `w` with this run's topology providing `α`.
    pub fn measure(
        &self,
        cfg: &ExperimentConfig,
        w: &DMatrix<f64>,
        samples: usize,
    ) -> Result<GradientStats, ExperimentError> {
        let mut st = measure_stats(
            &self.decomposition,
            &self.problem(),
            w,
            self.b,
            samples,
            cfg.seeds().stats,
        )
        .map_err(|e| ExperimentError::run(&self.label, e))?;
        st.alpha_topology = self.spec.label();
        Ok(st)
    }
}

/// Learning rate picked by the knee rule on `run`.
pub fn knee_for(cfg: &ExperimentConfig, run: &PreparedRun) -> Result<KneeResult, ExperimentError> {
    let grid = geometric_grid(cfg.knee.lo, cfg.knee.hi, cfg.knee.points);
    engine::knee_learning_rate(
        &run.matrix,
        &run.problem(),
        run.b,
        &cfg.init,
        cfg.seeds().knee,
        &grid,
    )
    .map_err(|e| ExperimentError::run(&run.label, e))
}

/// Ratios that multiply to `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaRatios {
    #[serde(with = "json_f64")]
    pub sqrt_e_over_esp: f64,
    #[serde(with = "json_f64")]
    pub sqrt_e_over_h: f64,
    #[serde(with = "json_f64")]
    pub inv_alpha: f64,
}

impl BetaRatios {
    fn of(st: &GradientStats) -> Self {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::INFINITY };
        BetaRatios {
            sqrt_e_over_esp: ratio(st.e, st.e_sp).sqrt(),
            sqrt_e_over_h: ratio(st.e.sqrt(), st.h),
            inv_alpha: ratio(1.0, st.alpha),
        }
    }
}

/// Content of `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub run: String,
    pub topology: GraphSpec,
    #[serde(rename = "B")]
    pub b: usize,
    pub spectral: SpectralSummary,
    pub eta: f64,
    pub eta_source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knee: Option<KneeResult>,
    pub stats: GradientStats,
    pub energy_mode: EnergyMode,
    pub closed_form: Option<ClosedFormEstimates>,
    #[serde(with = "json_f64")]
    pub beta: f64,
    #[serde(with = "json_f64")]
    pub beta_hat: f64,
    pub ratios: BetaRatios,
    pub dist0: OptimumDistance,
    /// Largest local full-batch subgradient norm at the start.
    #[serde(rename = "L_estimate")]
    pub l_estimate: f64,
    pub bound_inputs: BoundInputs,
}

/// One threshold's predictions and measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub pct: f64,
    /// Classic bound.
    pub k_o: Prediction,
    /// Refined bound, after the optional re-measurement.
    pub k_n: Prediction,
    pub k_n_first_pass: Prediction,
    pub k_o_first_pass: Prediction,
    /// Measured on the loss curves.
    pub k_experimental: Prediction,
    pub scale_new: f64,
    pub scale_classic: f64,
}

/// Content of `divergence.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub run: String,
    pub reference: String,
    pub thresholds: Vec<ThresholdResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Content of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub run: String,
    pub reference_run: bool,
    pub clique_reference: String,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    pub defaults: serde_json::Value,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run: String,
    pub dir: String,
    pub topology: GraphSpec,
    #[serde(rename = "B")]
    pub b: usize,
    pub reference_run: bool,
    pub clique_reference: String,
}

/// Content of `<outputs>/index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub name: Option<String>,
    pub version: String,
    pub runs: Vec<IndexEntry>,
}

fn defaults_record(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "knee_fraction": engine::KNEE_FRACTION,
        "knee_grid": {"lo": cfg.knee.lo, "hi": cfg.knee.hi, "points": cfg.knee.points},
        "estimation_samples": cfg.estimation.samples,
        "energy_mode": cfg.estimation.energy_mode,
        "expander_candidates_default": topology::DEFAULT_CANDIDATES,
        "stochastic_tol": topology::STOCHASTIC_TOL,
        "normality_tol": topology::NORMALITY_TOL,
        "eigen_group_tol": spectral::GROUP_TOL,
        "eigen_zero_snap": spectral::ZERO_SNAP,
        "oracle_enumeration_limit": estimators::ENUMERATION_LIMIT,
        "divergence_thresholds": cfg.divergence.thresholds,
        "divergence_refine": cfg.divergence.refine,
        "divergence_scaling": "min ratio of measured clique loss to clique bound",
        "prediction_index": "bound index K reported as iteration K-1",
        "alpha_topology": "topology of the run itself",
        "L_estimate": "max over nodes of the local full-batch subgradient norm at the start",
        "comm_delay": cfg.timing.as_ref().map(|t| t.comm_delay),
    })
}

struct RunResult {
    prepared: PreparedRun,
    eta: f64,
    log: MetricsLog,
    stats: RunStats,
}

/// Summary of a finished sweep.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub outputs: PathBuf,
    pub index: SweepIndex,
}

/// Number of workers: `DSMLAB_THREADS` if set, else rayon's default.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs every `(topology, B)` pair plus the clique references and writes all
/// artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, ExperimentError> {
    cfg.validate()?;
    with_worker_pool(|| run_inner(cfg))
}

/// Runs `f` inside a pool of [`worker_threads`] workers.
pub fn with_worker_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a worker pool ({e}); using the global one");
            f()
        }
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentSummary, ExperimentError> {
    let shared = shared_dataset(cfg)?;
    let topologies = cfg.topology.items();
    let bs = cfg.b.items();

    // (spec, b, is_reference) with one clique per (M, B)
    let mut plan: Vec<(GraphSpec, usize, bool)> = Vec::new();
    for spec in &topologies {
        for &b in &bs {
            plan.push((spec.clone(), b, false));
        }
    }
    // any complete graph in the sweep serves as the reference for its (M, B)
    let mut reference_of: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for (spec, b, _) in &plan {
        if spec.degree() + 1 == spec.m {
            reference_of
                .entry((spec.m, *b))
                .or_insert_with(|| run_label(spec, *b));
        }
    }
    for spec in &topologies {
        for &b in &bs {
            if let Entry::Vacant(slot) = reference_of.entry((spec.m, b)) {
                let clique = GraphSpec::clique(spec.m);
                slot.insert(run_label(&clique, b));
                plan.push((clique, b, true));
            }
        }
    }

    let prepared: Vec<PreparedRun> = plan
        .par_iter()
        .map(|(spec, b, _)| PreparedRun::new(cfg, spec, *b, shared.as_ref()))
        .collect::<Result<_, _>>()?;

    // learning rate per (M, B), picked on the clique reference when needed
    let mut etas: BTreeMap<(usize, usize), (f64, String, Option<KneeResult>)> = BTreeMap::new();
    for ((m, b), label) in &reference_of {
        let entry = match cfg.eta {
            EtaSetting::Fixed(x) => (x, "fixed".to_string(), None),
            EtaSetting::Knee => {
                let run = prepared
                    .iter()
                    .find(|p| &p.label == label)
                    .expect("reference planned");
                let knee = knee_for(cfg, run)?;
                (knee.eta, format!("knee rule on {label}"), Some(knee))
            }
        };
        etas.insert((*m, *b), entry);
    }

    fs::create_dir_all(&cfg.outputs).map_err(|e| IoError::io(&cfg.outputs, e))?;
    let results: Vec<RunResult> = prepared
        .into_par_iter()
        .map(|p| {
            let (eta, source, knee) = etas[&(p.spec.m, p.b)].clone();
            execute_run(cfg, p, eta, source, knee.as_ref())
        })
        .collect::<Result<_, _>>()?;

    let by_label: BTreeMap<&str, &RunResult> = results
        .iter()
        .map(|r| (r.prepared.label.as_str(), r))
        .collect();
    let seeds = cfg.seeds();
    let entries: Vec<IndexEntry> = results
        .par_iter()
        .zip(plan.par_iter())
        .map(|(r, (_, _, is_ref))| {
            let reference = &reference_of[&(r.prepared.spec.m, r.prepared.b)];
            let clique = by_label[reference.as_str()];
            let dir = cfg.outputs.join(&r.prepared.label);
            let record = divergence_for(cfg, r, clique)?;
            write_json(&dir.join("divergence.json"), &record)?;
            let manifest = Manifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                run: r.prepared.label.clone(),
                reference_run: *is_ref,
                clique_reference: reference.clone(),
                seeds,
                config: cfg.clone(),
                defaults: defaults_record(cfg),
                files: run_files(cfg),
            };
            write_json(&dir.join("manifest.json"), &manifest)?;
            Ok(IndexEntry {
                run: r.prepared.label.clone(),
                dir: r.prepared.label.clone(),
                topology: r.prepared.spec.clone(),
                b: r.prepared.b,
                reference_run: *is_ref,
                clique_reference: reference.clone(),
            })
        })
        .collect::<Result<_, ExperimentError>>()?;

    let index = SweepIndex {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        runs: entries,
    };
    write_json(&cfg.outputs.join("index.json"), &index)?;
    write_file(&cfg.outputs.join("config.json"), &(cfg.to_json() + "\n"))?;
    Ok(ExperimentSummary {
        outputs: cfg.outputs.clone(),
        index,
    })
}

fn run_files(cfg: &ExperimentConfig) -> Vec<String> {
    let mut files: Vec<String> = FILES.iter().map(|s| s.to_string()).collect();
    if cfg.timing.is_some() {
        files.extend(["schedule.csv", "throughput.csv", "loss_time.csv"].map(String::from));
    }
    files
}

/// Statistics, closed-form estimates, `β`, `β̂` and bound inputs of a run,
/// measured at `w0`. `later_iterations` holds the centered gradients of the
/// training steps and is only read in running-max mode.
pub fn run_stats(
    cfg: &ExperimentConfig,
    prepared: &PreparedRun,
    eta: f64,
    eta_source: String,
    knee: Option<KneeResult>,
    w0: &DMatrix<f64>,
    later_iterations: &[Vec<DMatrix<f64>>],
) -> Result<RunStats, ExperimentError> {
    let problem = prepared.problem();
    let fail = |e: RunFailure| ExperimentError::run(&prepared.label, e);
    let mut stats = prepared.measure(cfg, w0, cfg.estimation.samples)?;
    if cfg.estimation.energy_mode == EnergyMode::RunningMax {
        let samples = estimators::sample_gradients(
            &problem,
            w0,
            prepared.b,
            cfg.estimation.samples,
            cfg.seeds().stats,
        )
        .map_err(|e| fail(e.into()))?;
        let mut iterations = vec![samples
            .iter()
            .map(crate::numeric::center_columns)
            .collect::<Vec<_>>()];
        iterations.extend(later_iterations.iter().cloned());
        let profile = energy_fractions_running_max(&prepared.decomposition, &iterations)
            .map_err(|e| fail(e.into()))?;
        stats.alpha = profile.alpha;
        stats.fractions = profile.fractions;
        stats.zero_energy = profile.zero_energy;
    }

    let w_bar: Vec<f64> = crate::numeric::column_mean(w0).iter().copied().collect();
    let dist0 = distance_to_optimum(&prepared.objective, &prepared.dataset, &w_bar);
    let closed_form = if prepared.partition.mode() == PartitionMode::RandomSplit {
        estimators::closed_form_from_dataset(
            &prepared.objective,
            &prepared.dataset,
            &w_bar,
            prepared.spec.m,
            prepared.b,
            prepared.partition.replication(),
        )
        .ok()
    } else {
        None
    };
    let l_estimate = estimators::local_gradient_bound(&problem, &w_bar);
    let lambda = prepared.decomposition.lambda2_modulus();
    let mut inputs = BoundInputs::from_stats(prepared.spec.m, eta, lambda, &stats, dist0.dist0_sq)
        .with_l(l_estimate);
    inputs.alpha = inputs.alpha.clamp(f64::MIN_POSITIVE, 1.0);
    let beta_value = beta(&stats);
    let beta_hat_value = closed_form
        .as_ref()
        .map_or(f64::NAN, |p| beta_hat(p, stats.alpha));
    let record = RunStats {
        run: prepared.label.clone(),
        topology: prepared.spec.clone(),
        b: prepared.b,
        spectral: prepared.decomposition.summary(),
        eta,
        eta_source,
        knee,
        ratios: BetaRatios::of(&stats),
        stats,
        energy_mode: cfg.estimation.energy_mode,
        closed_form,
        beta: beta_value,
        beta_hat: beta_hat_value,
        dist0,
        l_estimate,
        bound_inputs: inputs,
    };
    Ok(record)
}

/// Trains one run and writes `metrics.csv`, `stats.json`, `bounds.csv` and
/// the timing curves.
fn execute_run(
    cfg: &ExperimentConfig,
    prepared: PreparedRun,
    eta: f64,
    eta_source: String,
    knee: Option<&KneeResult>,
) -> Result<RunResult, ExperimentError> {
    let label = prepared.label.clone();
    let dir = cfg.outputs.join(&label);
    fs::create_dir_all(&dir).map_err(|e| IoError::io(&dir, e))?;
    let problem = prepared.problem();
    let fail = |e: RunFailure| ExperimentError::Run {
        run: label.clone(),
        source: e,
    };

    let running_max = cfg.estimation.energy_mode == EnergyMode::RunningMax;
    let mut per_iteration: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let output = engine::run_observed(
        &prepared.matrix,
        &problem,
        &prepared.run_config(cfg, eta, cfg.k),
        |_, g, _| {
            if running_max {
                per_iteration.push(vec![crate::numeric::center_columns(g)]);
            }
        },
    )
    .map_err(|e| fail(e.into()))?;
    output
        .log
        .write_csv(&dir.join("metrics.csv"))
        .map_err(|e| fail(e.into()))?;

    let record = run_stats(
        cfg,
        &prepared,
        eta,
        eta_source,
        knee.cloned(),
        &output.w0,
        &per_iteration,
    )?;
    let inputs = record.bound_inputs;
    write_json(&dir.join("stats.json"), &record)?;

    let mut rows = Vec::with_capacity(cfg.k);
    for k in 1..=cfg.k as u64 {
        let mut row = vec![k as f64];
        for kind in BoundKind::ALL {
            row.push(kind.evaluate(&inputs, k).map_err(|e| fail(e.into()))?);
        }
        rows.push(row);
    }
    let mut header = vec!["K"];
    header.extend(BoundKind::ALL.iter().map(|k| k.name()));
    write_numeric_csv(&dir.join("bounds.csv"), &header, &rows).map_err(|e| fail(e.into()))?;

    if let Some(t) = &cfg.timing {
        let sampler = t.distribution.sampler().map_err(|e| fail(e.into()))?;
        let sched = timing::simulate_schedule(
            &prepared.matrix,
            &sampler,
            cfg.k,
            t.comm_delay,
            &t.compute,
            cfg.seeds().timing,
        )
        .map_err(|e| fail(e.into()))?;
        sched
            .write_csv(&dir.join("schedule.csv"))
            .map_err(|e| fail(e.into()))?;
        let tp: Vec<Vec<f64>> = timing::throughput_curve(&sched)
            .into_iter()
            .map(|(a, b)| vec![a, b])
            .collect();
        write_numeric_csv(&dir.join("throughput.csv"), &["time", "iterations"], &tp)
            .map_err(|e| fail(e.into()))?;
        let lt: Vec<Vec<f64>> = timing::loss_vs_time(&output.log, &sched)
            .map_err(|e| fail(e.into()))?
            .into_iter()
            .map(|(a, b)| vec![a, b])
            .collect();
        write_numeric_csv(&dir.join("loss_time.csv"), &["time", "loss"], &lt)
            .map_err(|e| fail(e.into()))?;
    }

    Ok(RunResult {
        prepared,
        eta,
        log: output.log,
        stats: record,
    })
}

fn curve_of(log: &MetricsLog) -> Vec<f64> {
    log.records.iter().map(|r| r.loss_avg_time).collect()
}

fn divergence_for(
    cfg: &ExperimentConfig,
    run: &RunResult,
    clique: &RunResult,
) -> Result<DivergenceRecord, ExperimentError> {
    let clique_curve = curve_of(&clique.log);
    let run_curve = curve_of(&run.log);
    let ring_inputs = run.stats.bound_inputs;
    let clique_inputs = clique.stats.bound_inputs;
    let mut cache: BTreeMap<u64, (BoundInputs, BoundInputs)> = BTreeMap::new();
    let mut remeasure = |k: u64| -> Result<(BoundInputs, BoundInputs), ExperimentError> {
        if let Some(v) = cache.get(&k) {
            return Ok(*v);
        }
        let at = |r: &RunResult, base: BoundInputs| -> Result<BoundInputs, ExperimentError> {
            let w = r.prepared.models_at(cfg, r.eta, k as usize)?;
            let st = r.prepared.measure(cfg, &w, cfg.estimation.samples)?;
            let mut inp =
                BoundInputs::from_stats(base.m, base.eta, base.lambda2_mod, &st, base.dist0_sq)
                    .with_l(base.l);
            inp.alpha = inp.alpha.clamp(f64::MIN_POSITIVE, 1.0);
            Ok(inp)
        };
        let pair = (at(run, ring_inputs)?, at(clique, clique_inputs)?);
        cache.insert(k, pair);
        Ok(pair)
    };
    let mut thresholds = Vec::new();
    let mut error = None;
    for &pct in &cfg.divergence.thresholds {
        let predict = |kind: BoundKind,
                       remeasure: &mut dyn FnMut(
            u64,
        ) -> Result<
            (BoundInputs, BoundInputs),
            ExperimentError,
        >|
         -> Result<(DivergenceOutcome, Prediction), ExperimentError> {
            let first = bounds::divergence_predictor(
                kind,
                &ring_inputs,
                &clique_inputs,
                &clique_curve,
                pct,
            )
            .map_err(|e| ExperimentError::run(&run.prepared.label, e))?;
            let combined = match (cfg.divergence.refine, first.prediction) {
                (true, Prediction::At(k)) if k >= 1 => {
                    let (r2, c2) = remeasure(k)?;
                    let second = bounds::divergence_predictor(kind, &r2, &c2, &clique_curve, pct)
                        .map_err(|e| ExperimentError::run(&run.prepared.label, e))?;
                    first.combined(Some(&second))
                }
                _ => first.prediction,
            };
            Ok((first, combined))
        };
        let outcome = (|| {
            let (old_first, old) = predict(BoundKind::Classic, &mut remeasure)?;
            let (new_first, new) = predict(BoundKind::New, &mut remeasure)?;
            let measured = experimental_divergence(&clique_curve, &run_curve, pct)
                .map_err(|e| ExperimentError::run(&run.prepared.label, e))?;
            Ok::<_, ExperimentError>(ThresholdResult {
                pct,
                k_o: old,
                k_n: new,
                k_n_first_pass: new_first.prediction,
                k_o_first_pass: old_first.prediction,
                k_experimental: measured,
                scale_new: new_first.scale,
                scale_classic: old_first.scale,
            })
        })();
        match outcome {
            Ok(t) => thresholds.push(t),
            Err(ExperimentError::Run {
                source: RunFailure::Bound(e),
                ..
            }) => {
                error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DivergenceRecord {
        run: run.prepared.label.clone(),
        reference: clique.prepared.label.clone(),
        thresholds,
        error,
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub reference: String,
    #[serde(with = "json_f64")]
    pub sqrt_e_over_esp: f64,
    #[serde(with = "json_f64")]
    pub sqrt_e_over_h: f64,
    #[serde(with = "json_f64")]
    pub inv_alpha: f64,
    #[serde(with = "json_f64")]
    pub beta: f64,
    #[serde(with = "json_f64")]
    pub beta_hat: f64,
    /// `(pct, k'_o, k'_n, k')` per threshold.
    pub divergence: Vec<(f64, Prediction, Prediction, Prediction)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ReportRow>,
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "n/a".into()
    } else if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.2}")
    }
}

impl Report {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "run",
            "sqrt(E/E_sp)",
            "sqrt(E)/H",
            "1/alpha",
            "beta",
            "beta_hat",
        ]
        .map(String::from)
        .to_vec();
        for p in &self.thresholds {
            let pc = (p * 100.0).round();
            h.push(format!("k'_o@{pc}%"));
            h.push(format!("k'_n@{pc}%"));
            h.push(format!("k'@{pc}%"));
        }
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c = vec![
                    r.run.clone(),
                    fmt_num(r.sqrt_e_over_esp),
                    fmt_num(r.sqrt_e_over_h),
                    fmt_num(r.inv_alpha),
                    fmt_num(r.beta),
                    fmt_num(r.beta_hat),
                ];
                for p in &self.thresholds {
                    match r.divergence.iter().find(|d| d.0 == *p) {
                        Some((_, o, n, e)) => {
                            c.extend([o.to_string(), n.to_string(), e.to_string()])
                        }
                        None => c.extend(["n/a".to_string(), "n/a".to_string(), "n/a".to_string()]),
                    }
                }
                c
            })
            .collect()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header) + "\n";
        for r in &cells {
            out += &line(r);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory write");
        for r in self.cells() {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::missing(path, e))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::missing(path, e))
}

fn read_curve(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    let log = MetricsLog::read_csv(path).map_err(|e| ExperimentError::missing(path, e))?;
    if log.is_empty() {
        return Err(ExperimentError::missing(path, "no iterations"));
    }
    Ok(curve_of(&log))
}

/// Builds the summary table of an artifact directory. The measured `k'`
/// values are recomputed from the metrics files.
pub fn report(dir: &Path) -> Result<Report, ExperimentError> {
    let index: SweepIndex = read_json(&dir.join("index.json"))?;
    let mut thresholds: Vec<f64> = Vec::new();
    let mut rows = Vec::new();
    for entry in &index.runs {
        let run_dir = dir.join(&entry.dir);
        for f in FILES {
            if !run_dir.join(f).is_file() {
                return Err(ExperimentError::missing(&run_dir.join(f), "file not found"));
            }
        }
        let stats: RunStats = read_json(&run_dir.join("stats.json"))?;
        let div: DivergenceRecord = read_json(&run_dir.join("divergence.json"))?;
        let _: Manifest = read_json(&run_dir.join("manifest.json"))?;
        let own = read_curve(&run_dir.join("metrics.csv"))?;
        let reference_dir = index
            .runs
            .iter()
            .find(|e| e.run == entry.clique_reference)
            .map(|e| dir.join(&e.dir))
            .ok_or_else(|| {
                ExperimentError::missing(
                    dir,
                    format!("reference run {} not indexed", entry.clique_reference),
                )
            })?;
        let reference = read_curve(&reference_dir.join("metrics.csv"))?;
        let mut divergence = Vec::new();
        for t in &div.thresholds {
            if !thresholds.contains(&t.pct) {
                thresholds.push(t.pct);
            }
            let measured =
                experimental_divergence(&reference, &own, t.pct).unwrap_or(Prediction::Never);
            divergence.push((t.pct, t.k_o, t.k_n, measured));
        }
        rows.push(ReportRow {
            run: entry.run.clone(),
            reference: entry.clique_reference.clone(),
            sqrt_e_over_esp: stats.ratios.sqrt_e_over_esp,
            sqrt_e_over_h: stats.ratios.sqrt_e_over_h,
            inv_alpha: stats.ratios.inv_alpha,
            beta: stats.beta,
            beta_hat: stats.beta_hat,
            divergence,
        });
    }
    if thresholds.is_empty() {
        thresholds = DEFAULT_THRESHOLDS.to_vec();
    }
    Ok(Report { thresholds, rows })
}

/// Trains the first `(topology, B)` pair of a config and returns its log.
pub fn train_single(
    cfg: &ExperimentConfig,
) -> Result<(PreparedRun, f64, MetricsLog), ExperimentError> {
    let (prepared, eta) = prepare_single(cfg)?;
    let out = engine::run(
        &prepared.matrix,
        &prepared.problem(),
        &prepared.run_config(cfg, eta, cfg.k),
    )
    .map_err(|e| ExperimentError::run(&prepared.label, e))?;
    Ok((prepared, eta, out.log))
}

/// The first `(topology, B)` pair of a config with its learning rate.
pub fn prepare_single(cfg: &ExperimentConfig) -> Result<(PreparedRun, f64), ExperimentError> {
    cfg.validate()?;
    let shared = shared_dataset(cfg)?;
    let spec = cfg.topology.items().remove(0);
    let b = cfg.b.items()[0];
    if cfg.topology.items().len() > 1 || cfg.b.items().len() > 1 {
        log::warn!(
            "config describes a sweep; using its first run {}",
            run_label(&spec, b)
        );
    }
    let prepared = PreparedRun::new(cfg, &spec, b, shared.as_ref())?;
    let eta = match cfg.eta {
        EtaSetting::Fixed(x) => x,
        EtaSetting::Knee => {
            let clique = PreparedRun::new(cfg, &GraphSpec::clique(spec.m), b, shared.as_ref())?;
            knee_for(cfg, &clique)?.eta
        }
    };
    Ok((prepared, eta))
}

/// Statistics of the first run of a config at its initial models, without
/// training.
pub fn estimate_single(cfg: &ExperimentConfig) -> Result<RunStats, ExperimentError> {
    let (prepared, eta) = prepare_single(cfg)?;
    let problem = prepared.problem();
    let w0 = cfg
        .init
        .models(problem.dim(), problem.m())
        .map_err(|e| ExperimentError::run(&prepared.label, e))?;
    let source = match cfg.eta {
        EtaSetting::Fixed(_) => "fixed".to_string(),
        EtaSetting::Knee => "knee rule on the clique".to_string(),
    };
    let mut flat = cfg.clone();
    flat.estimation.energy_mode = EnergyMode::FirstIteration;
    run_stats(&flat, &prepared, eta, source, None, &w0, &[])
}

/// Permutation oracle and closed-form estimates for the first run of a
/// config, at the average initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub run: String,
    pub oracle: OracleResult,
    pub closed_form: ClosedFormEstimates,
    pub seed: u64,
}

pub fn oracle_single(
    cfg: &ExperimentConfig,
    perms: usize,
    seed: u64,
) -> Result<OracleReport, ExperimentError> {
    let (prepared, _) = prepare_single(cfg)?;
    let fail = |e: EstimatorError| ExperimentError::run(&prepared.label, e);
    let problem = prepared.problem();
    let w0 = cfg
        .init
        .models(problem.dim(), problem.m())
        .map_err(|e| ExperimentError::run(&prepared.label, e))?;
    let w_bar: Vec<f64> = w0.column_mean().iter().copied().collect();
    let (m, b, c) = (
        prepared.spec.m,
        prepared.b,
        prepared.partition.replication(),
    );
    let oracle = estimators::permutation_oracle(
        &prepared.dataset,
        &prepared.objective,
        &w_bar,
        m,
        b,
        c,
        perms,
        seed,
    )
    .map_err(fail)?;
    let closed_form = estimators::closed_form_from_dataset(
        &prepared.objective,
        &prepared.dataset,
        &w_bar,
        m,
        b,
        c,
    )
    .map_err(fail)?;
    Ok(OracleReport {
        run: prepared.label.clone(),
        oracle,
        closed_form,
        seed,
    })
}
