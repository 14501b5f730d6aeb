use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    lobgen_cli::main_with(lobgen_cli::Cli::parse())
}
