//! Files, wall-clock timing and the command-line front end for
//! [`acdc_core`].

pub mod formats;
pub mod grid_file;
pub mod scenario;

pub use grid_file::{grid_to_json, load_grid, parse_grid, save_grid};
pub use scenario::{load_scenario, metrics_report, trace_csv, write_trace, LoadedScenario, StdClock};
