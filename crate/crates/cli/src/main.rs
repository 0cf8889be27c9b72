use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    aerolidar_cli::main_with(aerolidar_cli::Cli::parse())
}
