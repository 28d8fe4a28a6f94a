//! Config-driven experiments on top of `switching_mdp`: parsing, the five
//! commands, and CSV output carrying the config hash and master seed.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;

pub use commands::{run, Command, RunOptions};
pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, CliResult};
