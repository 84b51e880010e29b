//! Network-wide path delay tracking and prediction from partial
//! measurements.
//!
//! The pipeline is: a [`topology::Network`] gives the Gramian that shapes
//! the spatial covariance; [`covmodel`] holds the state-space parameters and
//! can simulate traces; [`kkf`] runs the kriged Kalman filter; [`estimation`]
//! learns the covariances from a training window; [`selection`] picks which
//! paths to measure next; [`baseline`] is the memoryless network-kriging
//! predictor; [`harness`] ties everything into experiments.

pub mod baseline;
pub mod covmodel;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod kkf;
pub mod linalg;
pub mod selection;
pub mod topology;

pub use error::{Error, Result};
