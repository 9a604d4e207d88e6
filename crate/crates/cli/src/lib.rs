//! Experiment harness around `superrep`: TOML configuration, dispatch to the
//! solvers, an append-only CSV results store and convergence reporting.

pub mod config;
pub mod error;
pub mod experiment;
pub mod results;
pub mod table;

pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, RunOptions, RunOutcome};
pub use results::{read_rows, ResultRow, ResultStore, Status};
pub use table::{convergence_table, load_convergence_table, ConvergenceRow, ConvergenceTable};
