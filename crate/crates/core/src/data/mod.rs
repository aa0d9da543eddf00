//! Datasets, partitions with replication, objectives and the aligned toy problem.

mod dataset;
mod objective;
mod partition;
mod synthetic;
pub mod toy;

pub use dataset::{load_csv, ColumnRoles, Dataset, TargetColumn};
pub use objective::{minibatch_subgradient, Objective};
pub use partition::{
    random_partition, random_split, split_by_label, toy_aligned, Partition, PartitionMode,
};
pub use synthetic::{ClassLayout, SyntheticSpec, SyntheticTask};
pub use toy::build_toy_dataset;

use thiserror::Error;

use crate::io::IoError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("infeasible replication: {0}")]
    InfeasibleReplication(String),
    #[error("labels are not balanced across {m} nodes: {detail}")]
    LabelImbalance { m: usize, detail: String },
    #[error("batch size {b} exceeds local dataset size {local}")]
    BatchTooLarge { b: usize, local: usize },
    #[error("degenerate toy point {index}: u + zeta = 0")]
    DegeneratePoint { index: usize },
    #[error("parameter dimension {got} does not match feature dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("node index {node} out of range for {m} nodes")]
    NodeOutOfRange { node: usize, m: usize },
    #[error(transparent)]
    Io(#[from] IoError),
}
