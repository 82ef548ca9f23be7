use alloc::string::String;

use thiserror::Error;

/// Problems found while building or validating a [`GridModel`](crate::grid::GridModel).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("line `{line}`: {reason}")]
    InvalidLine { line: String, reason: String },
    #[error("interfacing converter `{ic}`: {reason}")]
    InvalidIc { ic: String, reason: String },
    #[error("device `{device}`: {reason}")]
    InvalidDevice { device: String, reason: String },
    #[error("AC component containing `{node}` has {count} slack nodes (exactly one required)")]
    SlackCount { node: String, count: usize },
    #[error("DC component containing `{0}` has no voltage-imposing node")]
    NoDcVoltageReference(String),
    #[error("admittance matrix is not symmetric at ({row}, {col})")]
    AsymmetricAdmittance { row: usize, col: usize },
    #[error("invalid base: {0}")]
    InvalidBase(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("setpoints do not match the grid: {0}")]
    InconsistentSpec(String),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {max_mismatch:e} p.u.)")]
    NotConverged { iterations: usize, max_mismatch: f64 },
    #[error("singular Jacobian at iteration {iteration}, equation row {row} ({equation})")]
    SingularJacobian {
        iteration: usize,
        row: usize,
        equation: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScError {
    #[error("variable {variable} is not controllable at node `{node}`")]
    InvalidVariable { variable: String, node: String },
    #[error("sensitivity matrix is singular at row {row} ({equation}), condition estimate {condition:e}")]
    SingularA {
        row: usize,
        equation: String,
        condition: f64,
    },
    #[error("delta vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("delta for node `{node}` has no matching variable in the bundle")]
    MissingVariable { node: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("step {step} is outside the profile horizon {horizon}")]
    OutOfHorizon { step: usize, horizon: usize },
    #[error("resource `{0}` has no MPP series")]
    NoMpp(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("problem is infeasible; most violated rows: {rows:?}")]
    Infeasible { rows: alloc::vec::Vec<usize> },
    #[error("active-set iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Sensitivity(#[from] ScError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("inconsistent control problem: {0}")]
    Inconsistent(String),
    #[error("missing MPP forecast for `{0}`")]
    MissingForecast(String),
}
