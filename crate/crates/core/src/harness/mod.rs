//! Experiment drivers behind the command-line tool.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::RunConfig;
pub use experiments::{run, Command, Manifest, Outcome, Status};
