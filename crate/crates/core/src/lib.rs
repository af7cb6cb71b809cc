//! Federated learning simulator with data-free client contribution scoring.
//!
//! Clients train a small MLP locally; the server scores each client's
//! final-layer update by the von Neumann entropy of its class-space Gram
//! matrix, optionally fuses it with class-wise cosine alignment through a
//! rank-adaptive Kalman filter, and aggregates with the resulting weights.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Jacobi eigenvalues, correlations, robust statistics
//! - [`nn`]: MLP forward/backward and local SGD
//! - [`data`]: synthetic blobs, IDX ingestion, non-IID partitions
//! - [`scoring`]: entropy, CSSV, CGSV, smoothing, simplex normalization
//! - [`fusion`]: the rank-adaptive Kalman filter
//! - [`federation`]: round protocol, strategies, standalone baselines
//! - [`analysis`]: free-rider detection, layer-wise study, hyperparameter sweeps
//! - [`config`] and [`cli`]: configuration files, run persistence, exports

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod fusion;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
