//! Identification of continuous-time nonlinear systems with neural
//! state-space models.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: single-hidden-layer networks with exact VJPs
//! - [`models`]: state-space structures built from those networks
//! - [`ode`]: fixed-step simulation, backpropagation through the solver and
//!   one-step scheme residuals
//! - [`train`]: fitting criteria and the optimization loop
//! - [`data`]: datasets, the nonlinear RLC generator, CSV I/O, preprocessing
//! - [`metrics`]: channel-wise R² and RMSE

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ode;
pub mod train;

pub use error::{Error, Result};
