//! Diffusive weak measurement of a single qubit.
//!
//! The measured qubit's diagonal state is tracked in the log-odds coordinate
//! `z = atanh(rho00 - rho11)`, in which the measurement-induced collapse is a
//! Gaussian random walk and the Born rule appears as the martingale property
//! of `rho00`. The crate provides:
//!
//! * [`state`]: state, parameter, ensemble and histogram types;
//! * [`sde`]: Monte Carlo trajectories via symmetric Trotter splitting of the
//!   exact diffusion and relaxation sub-evolutions, plus an Euler-Maruyama
//!   reference integrator;
//! * [`fokker_planck`]: the closed-form two-Gaussian solution and a
//!   finite-volume solver for the trajectory density with relaxation;
//! * [`bayesian`]: synthetic measurement records, trajectory reconstruction
//!   from records and calibration fits;
//! * [`fitting`]: chi-square comparison of distributions, single-parameter
//!   `tau` fits and systematic error budgets;
//! * [`io`]: record, ensemble, histogram and fit-report file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayesian;
pub mod error;
pub mod fitting;
pub mod fokker_planck;
pub mod io;
mod par;
pub mod rng;
pub mod sde;
pub mod state;
pub mod stats;

pub use error::{Error, Result};
pub use rng::{SeedSpec, StepDraw};
pub use state::{
    Binning, CalibrationParams, DistributionSnapshot, ModelParams, QubitState,
    TrajectoryEnsemble, Z_CAP,
};
