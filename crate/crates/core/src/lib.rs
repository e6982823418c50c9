//! Closed-loop depth-of-anesthesia simulation.
//!
//! A propofol PK-PD virtual patient with a delayed BIS monitor is driven by
//! one of two constrained model-predictive controllers: a state-space MPC fed
//! by an extended Kalman filter, or an output-feedback MPC with a
//! constant-disturbance bias correction. The [`scenario`] module runs
//! closed-loop experiments and the transport-delay tolerance search, and
//! [`cli`] exposes them as commands that write CSV traces.

pub mod cli;
pub mod config;
pub mod controllers;
pub mod error;
pub mod estimator;
pub mod patient_model;
pub mod qp_solver;
pub mod scenario;

pub use error::{ModelError, QpError, SimError};
pub use patient_model::{DiscreteModel, PatientParams, PatientState};
