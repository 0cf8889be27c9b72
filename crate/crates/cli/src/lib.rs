//! Command-line front end: raster preparation, registration runs and
//! diagnostics.

pub mod args;
pub mod commands;
pub mod config;
pub mod mosaic;

use std::process::ExitCode;

pub use args::{Cli, Command};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Registration did not converge with enough inliers under the target.
    RegistrationFailed,
}

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_REGISTRATION_FAILED: u8 = 1;
pub const EXIT_INPUT_ERROR: u8 = 2;

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Rasterize(a) => commands::rasterize(&a),
        Command::Register(a) => commands::register(&a),
        Command::Checkerboard(a) => commands::checkerboard(&a),
        Command::Simsurface(a) => commands::simsurface(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

/// Runs a parsed command line and maps the outcome to an exit status.
pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(Status::Success) => ExitCode::from(EXIT_SUCCESS),
        Ok(Status::RegistrationFailed) => ExitCode::from(EXIT_REGISTRATION_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT_ERROR)
        }
    }
}
