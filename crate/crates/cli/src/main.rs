use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = meshface_cli::Cli::parse();
    match meshface_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
