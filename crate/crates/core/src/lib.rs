//! Community detection on attributed graphs.
//!
//! The pipeline trains a one-layer GCN encoder with an InfoNCE objective
//! whose negatives are filtered by clustering pseudo-labels, adds a
//! cross-entropy self-training term on incrementally sampled K-medoids, and
//! jointly optimizes a DEC-style clustering layer whose centers are aligned
//! with the self-training head.
//!
//! Module map:
//!
//! * [`graph_io`]: dataset loaders, canonical bundle format, normalized adjacency.
//! * [`autodiff`]: reverse-mode differentiation over dense matrices.
//! * [`encoder`]: GCN encoder, MLP head, feature masking.
//! * [`contrastive`]: debiased negative sampling and InfoNCE.
//! * [`pest`]: K-medoids sampling schedule and self-training loss.
//! * [`algc`]: soft assignment, target distribution, clustering and alignment losses.
//! * [`trainer`]: joint optimization loop.
//! * [`eval`]: clustering metrics and modularity.
//! * [`theory`]: propagation-convergence check.
//! * [`config`]: training configuration files and overrides.
//! * [`optim`]: Adam optimizer.
//! * [`sparse`], [`assignment`], [`rng`]: CSR matrices, the Hungarian
//!   solver and seeded random streams.
//! * [`synthetic`]: stochastic block models and random connected graphs.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod algc;
pub mod assignment;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph_io;
pub mod optim;
pub mod pest;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use graph_io::{GraphBundle, LoadReport, NormalizedAdjacency};
pub use trainer::{TrainConfig, TrainOutcome};
