use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use dsmlab::bounds::{self, BoundInputs, BoundKind};
use dsmlab::experiment::{self, ExperimentConfig, ExperimentError, RunStats};
use dsmlab::io::{read_loss_curve, read_matrix_csv, write_matrix_csv, write_numeric_csv};
use dsmlab::spectral::decompose;
use dsmlab::timing::{self, ComputeMode, TimeDistribution};
use dsmlab::topology::{self, ConsensusMatrix, GraphKind, GraphSpec};

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Experiment(e) if e.is_config() => 2,
            _ => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "dsmlab",
    version,
    about = "Decentralized subgradient training on consensus graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compute {
    Iid,
    Fixed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a consensus matrix and write it as CSV.
    Topology {
        #[arg(long, value_parser = parse_kind)]
        kind: GraphKind,
        #[arg(short = 'M', long = "nodes")]
        m: usize,
        #[arg(short = 'd', long = "degree", default_value_t = 0)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = topology::DEFAULT_CANDIDATES)]
        candidates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the spectrum summary of a matrix CSV as JSON.
    Spectral {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Train the first run of a config and write its metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure gradient statistics at the initial models.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Permutation oracle for the closed-form estimates.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        perms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a bound curve from stats JSON (or bare bound inputs).
    Bounds {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value = "new")]
        kind: String,
        /// `a:b`, `a:b:step` or a comma list.
        #[arg(short = 'K', long = "K", default_value = "1:1000")]
        k: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict where a topology's loss departs from the clique's.
    PredictDivergence {
        #[arg(long)]
        ring: PathBuf,
        #[arg(long)]
        clique: PathBuf,
        /// Clique loss curve (a metrics CSV works).
        #[arg(long)]
        loss: PathBuf,
        #[arg(long, default_value_t = 0.04)]
        pct: f64,
        #[arg(long, value_delimiter = ',', default_value = "classic,new")]
        kind: Vec<String>,
    },
    /// Simulate synchronized completion times on a matrix's support.
    SimulateTime {
        #[arg(long)]
        matrix: PathBuf,
        /// Trace CSV with one time per line.
        #[arg(long, conflicts_with = "dist")]
        trace: Option<PathBuf>,
        /// Distribution as JSON, e.g. '{"kind":"pareto","shape":2,"scale":1,"cap":100}'.
        #[arg(long)]
        dist: Option<String>,
        #[arg(short = 'K', long = "K")]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        comm_delay: f64,
        #[arg(long, value_enum, default_value_t = Compute::Iid)]
        compute: Compute,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        throughput: Option<PathBuf>,
    },
    /// Run a full sweep from a config (or a run manifest).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Summarize an artifact directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<GraphKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown graph kind '{s}'"))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(runtime)
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output types serialize") + "\n"
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config(format!("{what}: {} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    require_file(path, "--config")?;
    Ok(experiment::load_config(path)?)
}

fn load_matrix(path: &Path) -> Result<ConsensusMatrix, CliError> {
    require_file(path, "--matrix")?;
    let dense = read_matrix_csv(path).map_err(config)?;
    ConsensusMatrix::from_dense(dense).map_err(config)
}

/// Bound inputs from a stats JSON (`bound_inputs` key) or a bare object.
fn load_inputs(path: &Path) -> Result<BoundInputs, CliError> {
    require_file(path, "inputs")?;
    let text = fs::read_to_string(path).map_err(runtime)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let inner = value.get("bound_inputs").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Topology {
            kind,
            m,
            d,
            seed,
            candidates,
            out,
        } => {
            let spec = GraphSpec {
                kind,
                m,
                d,
                seed,
                candidates,
            };
            spec.check().map_err(config)?;
            let a = topology::generate(&spec).map_err(runtime)?;
            write_matrix_csv(&out, a.matrix()).map_err(runtime)?;
            let report = topology::validate(&a);
            emit(
                None,
                &to_json(
                    &serde_json::json!({"topology": spec, "label": spec.label(), "validation": report}),
                ),
            )
        }
        Command::Spectral { matrix } => {
            let a = load_matrix(&matrix)?;
            let dec = decompose(&a).map_err(runtime)?;
            emit(None, &to_json(&dec.summary()))
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let (prepared, eta, log) = experiment::train_single(&cfg)?;
            log.write_csv(&out).map_err(runtime)?;
            log::info!(
                "{}: {} iterations at eta {eta}, final loss {}",
                prepared.label,
                log.len(),
                log.records.last().map_or(f64::NAN, |r| r.loss_avg_time)
            );
            Ok(())
        }
        Command::Estimate {
            config,
            samples,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = samples {
                cfg.estimation.samples = n;
            }
            let stats: RunStats = experiment::estimate_single(&cfg)?;
            emit(Some(&out), &to_json(&stats))
        }
        Command::Oracle {
            config,
            perms,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let report =
                experiment::with_worker_pool(|| experiment::oracle_single(&cfg, perms, seed))?;
            emit(out.as_deref(), &to_json(&report))
        }
        Command::Bounds {
            inputs,
            kind,
            k,
            out,
        } => {
            let inp = load_inputs(&inputs)?;
            let kind: BoundKind = kind.parse().map_err(config)?;
            let grid = bounds::parse_grid(&k).map_err(config)?;
            let curve = bounds::curve(kind, &inp, &grid).map_err(config)?;
            let rows: Vec<Vec<f64>> = curve
                .values
                .iter()
                .map(|&(k, v)| vec![k as f64, v])
                .collect();
            match out {
                Some(path) => write_numeric_csv(&path, &["K", kind.name()], &rows).map_err(runtime),
                None => {
                    let mut text = format!("K,{}\n", kind.name());
                    for (k, v) in &curve.values {
                        text += &format!("{k},{}\n", dsmlab::io::format_f64(*v));
                    }
                    emit(None, &text)
                }
            }
        }
        Command::PredictDivergence {
            ring,
            clique,
            loss,
            pct,
            kind,
        } => {
            let ring = load_inputs(&ring)?;
            let clique_inputs = load_inputs(&clique)?;
            require_file(&loss, "--loss")?;
            let curve: Vec<f64> = read_loss_curve(&loss)
                .map_err(config)?
                .into_iter()
                .map(|(_, l)| l)
                .collect();
            let mut outcomes = Vec::new();
            for name in &kind {
                let k: BoundKind = name.parse().map_err(config)?;
                outcomes.push(
                    bounds::divergence_predictor(k, &ring, &clique_inputs, &curve, pct)
                        .map_err(runtime)?,
                );
            }
            emit(None, &to_json(&outcomes))
        }
        Command::SimulateTime {
            matrix,
            trace,
            dist,
            k,
            seed,
            comm_delay,
            compute,
            out,
            throughput,
        } => {
            let a = load_matrix(&matrix)?;
            let distribution = match (trace, dist) {
                (Some(path), None) => {
                    require_file(&path, "--trace")?;
                    TimeDistribution::Trace { path }
                }
                (None, Some(json)) => {
                    serde_json::from_str(&json).map_err(|e| config(format!("--dist: {e}")))?
                }
                _ => return Err(config("give exactly one of --trace and --dist")),
            };
            let sampler = distribution.sampler().map_err(config)?;
            let mode = match compute {
                Compute::Iid => ComputeMode::IidPerIteration,
                Compute::Fixed => ComputeMode::FixedPerNode,
            };
            let sched = timing::simulate_schedule(&a, &sampler, k, comm_delay, &mode, seed)
                .map_err(runtime)?;
            if let Some(path) = out {
                sched.write_csv(&path).map_err(runtime)?;
            }
            if let Some(path) = throughput {
                let rows: Vec<Vec<f64>> = timing::throughput_curve(&sched)
                    .into_iter()
                    .map(|(t, n)| vec![t, n])
                    .collect();
                write_numeric_csv(&path, &["time", "iterations"], &rows).map_err(runtime)?;
            }
            emit(
                None,
                &to_json(&serde_json::json!({
                    "M": sched.m(),
                    "K": sched.k(),
                    "mean_iteration_duration": sched.mean_iteration_duration(),
                    "completion_max": sched.completion_max(sched.k()),
                    "completion_min": sched.completion_min(sched.k()),
                })),
            )
        }
        Command::Run { config, outputs } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = outputs {
                cfg.outputs = dir;
            }
            let summary = experiment::run_experiment(&cfg)?;
            let index = summary.outputs.join("index.json");
            log::info!(
                "{} runs written under {}",
                summary.index.runs.len(),
                summary.outputs.display()
            );
            emit(None, &format!("{}\n", index.display()))
        }
        Command::Report { dir, format, out } => {
            let report = experiment::report(&dir)?;
            let text = match format {
                Format::Text => report.to_text(),
                Format::Csv => report.to_csv(),
                Format::Json => to_json(&report),
            };
            emit(out.as_deref(), &text)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
