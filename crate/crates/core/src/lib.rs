//! Multi-level self-expressive subspace clustering.
//!
//! The library trains a mirrored convolutional autoencoder whose encoder
//! levels are each wired to their symmetric decoder levels through
//! fully-connected linear "connection" layers. Every connection layer
//! multiplies the flattened level features by `C + D^l`, where `C` is a
//! consistency matrix shared across levels and `D^l` is a per-level
//! distinctive matrix. Training alternates full-batch Adam epochs on the
//! joint reconstruction / self-expression objective with periodic spectral
//! re-clusterings that refresh the pseudo-label membership matrix `Q`.
//!
//! Modules:
//! - [`datasets`]: benchmark image ingestion, cache container, synthetic
//!   union-of-subspaces generator.
//! - [`selfexpress`]: the connection-layer parameters and every loss term.
//! - [`network`]: the convolutional autoencoder, forward/backward passes,
//!   model checkpoints.
//! - [`spectral`]: affinity construction, normalized spectral clustering,
//!   clustering-error scoring.
//! - [`classic`]: closed-form and proximal-gradient self-expression solvers
//!   used as baselines and as independent oracles.
//! - [`trainer`]: the alternating optimize/re-cluster loop with Adam,
//!   checkpointing and resume.

// Force the BLAS backend to be linked.
extern crate blas_src;

pub mod classic;
pub mod datasets;
pub mod error;
pub mod network;
pub mod selfexpress;
pub mod spectral;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
pub use selfexpress::{LossBreakdown, LossWeights, MembershipMatrix, SelfExpressionParams};
