//! Streaming analysis of randomized experiments under a strict
//! data-minimization contract: every estimator keeps O(k^2) state and each
//! raw record can be discarded the moment it has been folded in.
//!
//! The crate provides:
//! - recursive means and recursive least squares with a running inverse
//!   Gram matrix ([`mean`], [`rls`]);
//! - an online bootstrap with deterministic Poisson(1) weights, including
//!   cluster-seeded weights that emulate the cluster bootstrap
//!   ([`bootstrap`], [`rng`]);
//! - robust covariance assembly: cluster sandwich, recursive-residual
//!   HC0-style meat, and a delta-method cluster variance ([`robust`]);
//! - a simulated one-round federated protocol for cluster-robust standard
//!   errors with anonymous k-length contributions ([`federated`]);
//! - synthetic data generators and full-retention batch oracles used only
//!   for verification ([`datagen`], [`oracle`]).

pub mod bootstrap;
pub mod datagen;
pub mod error;
pub mod federated;
pub mod ingest;
pub mod mean;
pub mod oracle;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod rls;
pub mod rng;
pub mod robust;

pub use error::{Error, Result};
pub use mean::{pate_point_estimate, pate_transform, EffectEstimate, RecursiveMean};
pub use record::{DfDivisor, Record, StreamConfig};
pub use rls::{iid_variance, rls_init, RlsState, RlsStream, VarianceReport};
pub use rng::{SplitMix64, WeightGenerator, WeightMode};
