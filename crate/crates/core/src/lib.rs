//! Continuous-time stochastic models for sparse, irregular panel data.
//!
//! The crate covers the whole pipeline: building a latent state space from a
//! raw panel ([`statespace`]), estimating drift and diffusion fields with a
//! neural Kramers–Moyal estimator ([`lbn`]) or a sparse Gaussian-process SDE
//! ([`npsde`]), simulating fitted models ([`simulate`]), evaluating transition
//! densities ([`likelihood`]), and trajectory diagnostics ([`diagnostics`],
//! [`impute`]).

pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod impute;
pub mod lbn;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod npsde;
pub mod rng;
pub mod simulate;
pub mod statespace;
pub mod types;

pub use error::{Error, Result};
pub use linalg::{Matrix, PsdMatrix, EIGEN_FLOOR};
pub use model::{LinearSde, SdeModel};
pub use rng::{RngStream, StreamKey};
pub use types::{StateVector, TimeRescaling};
