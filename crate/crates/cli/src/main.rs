use std::process::ExitCode;

use clap::Parser;
use specsim_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match specsim_cli::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
