//! Mean-reverting SDE diffusion toolkit.
//!
//! Forward process `dx = θ_t (μ − x) dt + τ σ_t dW` with the coupling
//! σ_t²/(2θ_t) = λ², its closed-form Gaussian marginals, random-dynamical-system
//! checks, a temporal discrepancy lower bound, analytic and learned scores,
//! and a reverse-time Euler–Maruyama sampler.

pub mod discrepancy;
pub mod error;
pub mod forward_sde;
pub mod rds_analysis;
pub mod reverse_sampler;
pub mod rng;
pub mod schedules;
pub mod score_model;
pub mod stats;

pub use error::{Error, Result};
pub use forward_sde::{
    sample_marginal, simulate_ensemble, stationary_law, BrownianPath, EnsembleConfig, EnsembleStats, ForwardProcess,
    GaussianMarginal, Kernel, ProcessParams, Trajectory, VolatilityMode,
};
pub use rng::{NoiseStream, StreamDomain};
pub use schedules::{CoupledVolatility, DecoupledVolatility, Schedule, ScheduleKind};
