//! Configuration loading, experiment orchestration and result output for the
//! `beamsched` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod records;

pub use commands::{cmd_index, cmd_simulate, cmd_sweep, cmd_verify, RunOptions};
pub use config::{parse_config, ConfigFile, ExperimentSpec};
pub use error::{CliError, CliResult};
pub use records::{fingerprint, ResultRecord};
