//! Privacy-preserving multi-party dual learning.
//!
//! Two parties hold vertically partitioned features of partly overlapping
//! sample sets. On the overlap they jointly train a pair of dual generators
//! (A→B and B→A) under Laplace feature perturbation and Paillier-encrypted
//! exchange of the duality terms, then use the generators to supplement
//! one-sided samples before a collaborator trains a split central
//! classifier.
//!
//! Modules, bottom up:
//! - [`nn`]: dense networks, losses, SGD.
//! - [`dp`]: Laplace mechanism and one-shot feature perturbation.
//! - [`he`]: Paillier with signed fixed-point encoding.
//! - [`density`]: Gaussian KDE in log space.
//! - [`data`]: loading, partitions, splits, blinded entity alignment.
//! - [`transport`]: typed messages, backends, transcripts.
//! - [`dual`]: the encrypted dual training round.
//! - [`vertical`]: split training of the central model.
//! - [`orchestrator`]: the full dual cross-validation loop.
//! - [`graph`]: node representations, confusion-matrix product, link AUC.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod density;
pub mod dp;
pub mod dual;
pub mod error;
pub mod graph;
pub mod he;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod selftest;
pub mod stats;
pub mod transport;
pub mod vertical;

pub use error::{Error, Result};
