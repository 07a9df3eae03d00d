//! Mean-square stability analysis for LTI systems in feedback with
//! multiplicative white-noise gains.
//!
//! The forward block `M` (a state-space realization or a sampled impulse
//! response) is closed through a diagonal gain `dΓ = diag(dγ)` driven by a
//! Wiener process with covariance rate `Γ̄`, plus an additive Wiener
//! disturbance `w` with rate `W̄`. The loop is mean-square stable iff the
//! equivalent forward block has finite H² norm and the loop gain operator has
//! spectral radius below one. Both Itô and Stratonovich readings of the
//! feedback product are supported; Stratonovich loops are analysed through
//! their Itô-equivalent forward block.
//!
//! [`analysis`] produces verdicts and covariances, [`simulate`] checks them
//! by Monte Carlo, and [`cli`] wires both to a command-line front end.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod noise;
pub mod operator;
pub mod report;
pub mod simulate;
pub mod system;

pub use analysis::{analyze, AnalysisOptions, MssVerdict};
pub use error::{Error, Result};
pub use noise::{validate_noise, NoiseRng, NoiseSpec};
pub use operator::{Backend, Interpretation, LoopGain, SpectralResult};
pub use simulate::{run_ensemble, SimulationConfig, SimulationEnsemble};
pub use system::{H2Norm, LtiSystem};
