//! Transient-stability contingency engine with an IBR penetration threshold
//! search.
//!
//! The pipeline: parse a network case ([`case`]), solve the pre-disturbance
//! operating point and initialize device states ([`powerflow`]), run fixed-step
//! time-domain simulations of contingencies ([`sim`]) with synchronous-machine,
//! inverter, and composite-load dynamics ([`devices`]), grade the results
//! against frequency/voltage/tie-line criteria ([`criteria`]), and bisect the
//! renewable penetration fraction to the largest level whose violation profile
//! is no worse than the base case ([`threshold`]). Reports, CSV dumps, and SVG
//! plots live in [`report`] and [`svg`].

pub mod case;
pub mod criteria;
pub mod devices;
pub mod powerflow;
pub mod report;
pub mod sim;
pub mod svg;
pub mod threshold;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {message}")]
    Schema { message: String },
    #[error("reference error at {path}: {message}")]
    Reference { path: String, message: String },
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("bus '{bus}' has no in-service connection")]
    IsolatedBus { bus: String },
    #[error("power flow did not converge after {iterations} iterations (max mismatch {max_mismatch:.3e} pu)")]
    NotConverged {
        iterations: usize,
        max_mismatch: f64,
    },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("device '{device}' has no feasible equilibrium: {reason}")]
    InfeasibleEquilibrium { device: String, reason: String },
    #[error("case error: {0}")]
    Case(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("network solution did not converge at t={t:.4} s (residual {residual:.3e})")]
    NetworkDiverged { t: f64, residual: f64 },
    #[error("device '{device}' diverged at t={t:.4} s: {reason}")]
    DeviceDiverged {
        device: String,
        t: f64,
        reason: String,
    },
    #[error("event targets unknown element '{target}'")]
    UnknownEventTarget { target: String },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("bracket invalid: base level already fails ({0})")]
    BaseLevelFails(String),
    #[error("penetration {target:.4} unreachable: {reason}")]
    Unreachable { target: f64, reason: String },
    #[error("profiles evaluated under different sensitivity flags ({candidate} vs {base})")]
    FlagMismatch { candidate: String, base: String },
    #[error("profiles cover different contingency sets")]
    ContingencySetMismatch,
    #[error("non-reproducible evaluation at p={p:.4}: verification disagreed with probe")]
    NotReproducible { p: f64 },
    #[error("zero total generation in study area")]
    ZeroGeneration,
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}
