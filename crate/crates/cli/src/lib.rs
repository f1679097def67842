pub mod commands;
pub mod error;
pub mod logging;
pub mod pipeline;
pub mod service;
pub mod wire;

pub use commands::{run, Cli};
pub use error::CliError;
