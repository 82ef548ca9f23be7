//! Hybrid AC/DC microgrid engine: unified power flow, analytical sensitivity
//! coefficients and a linearized real-time optimal controller, together with
//! the closed-loop simulator that exercises them.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and wall-clock timing live in the `acdc` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod controller;
pub mod devices;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod power_flow;
pub mod qp;
pub mod sensitivity;
pub mod simulator;

pub use controller::{ControlConfig, ControlDecision, ControlProblem, Controller};
pub use devices::{DctModel, Fidelity, ResourceProfile};
pub use error::{ControlError, DeviceError, GridError, PfError, QpError, ScError};
pub use grid::{GridModel, GridState, IcMode, NodeKind};
pub use power_flow::{solve_pf, PfSolution, PfSpec};
pub use sensitivity::{ControlVariable, SensitivityBundle, VarKind};
pub use simulator::{Scenario, ScenarioTrace};
