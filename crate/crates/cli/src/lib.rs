//! The `specsim` command-line runner: argument parsing, command execution
//! and reports.

pub mod args;
pub mod commands;
pub mod report;

use std::io::Write;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;

use args::{Cli, Command};
use report::report_summary;

fn out_path(command: &Command) -> Option<&std::path::Path> {
    match command {
        Command::RunListing(a) => a.common.out.as_deref(),
        Command::DetectPredictor(a) => a.common.out.as_deref(),
        Command::Probe(a) => a.common.out.as_deref(),
        Command::Derandomize(a) => a.common.out.as_deref(),
        Command::SweepProfiles(a) => a.out.as_deref(),
        Command::DemoGuard(a) => a.out.as_deref(),
        Command::ReadMemory(a) => a.common.out.as_deref(),
        Command::ExportProfiles(_) => None,
    }
}

/// Runs a parsed command line and returns the process exit status. With
/// `--out` the report goes to the file and the summary to standard output;
/// otherwise the report goes to standard output and the summary to
/// standard error.
pub fn run(cli: &Cli) -> Result<u8> {
    let started = Instant::now();
    let outcome = commands::execute(&cli.command)?;
    let Some(mut report) = outcome.report else {
        print!("{}", outcome.text);
        return Ok(outcome.exit);
    };
    report.meta.wall_time_ms = started.elapsed().as_millis() as u64;
    report.meta.timestamp_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let human = format!("{}{}", outcome.text, report_summary(&report));
    match out_path(&cli.command) {
        Some(path) => {
            report.write(path)?;
            print!("{human}");
        }
        None => {
            std::io::stdout().write_all(report.to_json().as_bytes())?;
            eprint!("{human}");
        }
    }
    Ok(outcome.exit)
}
