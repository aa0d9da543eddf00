//! # dsmlab
//!
//! A desk-scale laboratory for consensus-based decentralized (sub)gradient
//! training. Every worker keeps its own model, averages it with its
//! in-neighbours through a doubly-stochastic consensus matrix `A`, and then
//! applies a local minibatch subgradient step:
//!
//! ```text
//! W(k+1) = W(k) · A − η · G(k)
//! ```
//!
//! The crate provides the pieces needed to measure how the communication
//! topology affects convergence, both in iterations and in wall-clock time:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`topology`] | Cliques, ring lattices, random regular expanders and their uniform-weight consensus matrices |
//! | [`spectral`] | Modulus-ordered spectral decomposition with orthogonal projectors, spectral gap, energy fractions and `α` |
//! | [`data`] | Datasets, replicated partitions, objectives and minibatch subgradients (including the aligned toy problem) |
//! | [`engine`] | The synchronous iteration loop, metrics and the learning-rate knee rule |
//! | [`estimators`] | Gradient statistics `E`, `E_sp`, `H`, `R`, `R_sp`, the permutation estimates and `β` |
//! | [`bounds`] | Refined and classic convergence bounds, consensus-distance bound, divergence predictor and literature thresholds |
//! | [`timing`] | Straggler-driven completion-time simulation, throughput and loss-vs-time curves |
//! | [`experiment`] | JSON-configured experiment sweeps, artifact emission and summary reports |
//!
//! ## Quick start
//!
//! ```rust
//! use dsmlab::topology::{generate, GraphKind, GraphSpec};
//! use dsmlab::spectral::decompose;
//!
//! let ring = generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, 4, 2)).unwrap();
//! let dec = decompose(&ring).unwrap();
//! assert!((dec.lambda2_modulus() - 1.0 / 3.0).abs() < 1e-12);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod engine;
pub mod estimators;
pub mod experiment;
pub mod io;
pub mod spectral;
pub mod timing;
pub mod topology;

mod numeric;

pub use nalgebra::{DMatrix, DVector};
