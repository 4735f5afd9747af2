//! Ensemble Kalman methods for state estimation and inverse problems.
//!
//! The crate provides four layers:
//!
//! - [`gaussian`]: dense Gaussian/ensemble kernel (PSD square roots, joint
//!   conditioning, empirical moments, seeded sampling);
//! - [`models`] and [`filters`]: Lorenz '96 and linear test models with
//!   discrete-time (3DVAR, KF, GPF, EnKF, EAKF, ETKF) and continuous-time
//!   (3DVAR, Kalman-Bucy, EnKBF) estimators;
//! - [`inversion`] and [`transport`]: ensemble Kalman inversion in transport
//!   and iteration-to-infinity form, the preconditioned Langevin sampler,
//!   and the full second-order transport families;
//! - [`harness`]: configuration-driven twin experiments and inversion runs
//!   with deterministic, seeded output.

pub mod error;
pub mod gaussian;
pub mod harness;
pub mod inversion;
pub mod models;
pub mod rng;
pub mod transport;

pub mod filters {
    pub mod continuous;
    pub mod discrete;
}

pub use error::{Error, Result};
