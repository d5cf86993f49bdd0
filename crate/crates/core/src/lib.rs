//! Simulation and cross-validation of incremental learning in deep linear models.
//!
//! The crate is organized around a scalar toy model whose induced weights
//! follow `σ̇ = σ^{2-2/N} (σ* - σ)` and a set of larger models whose spectra
//! obey (or approximately obey) the same law:
//!
//! * [`dynamics`]: the toy model, its closed forms, an adaptive integrator,
//!   α-times and the flow initialization-threshold machinery.
//! * [`gd`]: the discrete gradient-descent recurrence and its thresholds.
//! * [`sensing`]: deep matrix sensing.
//! * [`quadratic`]: quadratic networks under the variance and squared losses.
//! * [`classify`]: diagonal and circular-convolutional linear classifiers.
//! * [`sparse`]: orthogonal matching pursuit versus the deep ± model.
//! * [`harness`]: configuration, seeding and persistence of experiments.


pub mod classify;
pub mod dynamics;
pub mod error;
pub mod gd;
pub mod harness;

pub mod linalg;
pub mod quadratic;

pub mod rng;
pub mod sensing;
pub mod sparse;



pub use dynamics::{
    alpha_time, closed_form_sigma, empirical_threshold, flow_rhs, flow_threshold_bounds,
    integrate_flow, is_incremental, AlphaTime, Depth, IncrementalQuery, Method, Regime,
    StepControl, ThresholdBounds, ToyModelSpec, Trajectory,
};
pub use error::{Error, Result};
pub use linalg::SpectrumTrajectory;
