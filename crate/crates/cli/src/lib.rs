//! Configuration, archives and subcommands behind the `mmlqg` binary.

pub mod archive;
pub mod commands;
pub mod config;

pub use archive::MatrixArchive;
pub use commands::{cmd_nash_gap, cmd_reproduce_paper, cmd_simulate, cmd_solve, CliError, ReproduceOptions};
pub use config::RunConfig;
