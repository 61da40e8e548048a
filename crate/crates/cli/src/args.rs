use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specsim::attacks::{Technique, DEFAULT_IMUL_COUNT};
use specsim::oslayout::{Os, LINUX_DEFAULT_IMAGE_PAGES, LINUX_DEFAULT_MODULE_PAGES};

#[derive(Debug, Parser)]
#[command(name = "specsim", version, about = "Speculative execution side-channel experiments on a simulated core")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble and run a listing (a file, or a corpus name such as listing1.asm).
    RunListing(RunListingArgs),
    /// Tell whether forward branches are statically predicted taken or not taken.
    DetectPredictor(DetectArgs),
    /// Probe kernel addresses for mappings.
    Probe(ProbeArgs),
    /// Scan a randomized kernel layout for its mapped pages.
    Derandomize(DerandomizeArgs),
    /// Run one experiment on every built-in profile (or every profile in a file).
    SweepProfiles(SweepArgs),
    /// Compare an unguarded and a guarded conditional.
    DemoGuard(Common),
    /// Read bytes through nested speculation.
    ReadMemory(ReadArgs),
    /// Write the built-in profiles in the profile file format.
    ExportProfiles(ExportArgs),
}

/// Flags shared by every experiment.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Built-in profile name, a profile file, or `file#name` for a file
    /// holding several profiles.
    #[arg(long, default_value = "haswell")]
    pub profile: String,
    /// Seeds the layout and the noise streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `off`, `default`, or `jitter=<cycles>,evict=<probability>`.
    #[arg(long, default_value = "off")]
    pub noise: String,
    /// Cycle budget of each simulated run.
    #[arg(long)]
    pub cycle_budget: Option<u64>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeOptions {
    #[arg(long, default_value = "dependent-load", value_parser = parse_technique)]
    pub technique: Technique,
    /// Minimum over this many runs per address.
    #[arg(long, default_value_t = 2)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_IMUL_COUNT)]
    pub imul_count: usize,
    /// Loads issued by the exhaustion technique.
    #[arg(long)]
    pub exhaustion_loads: Option<usize>,
    /// Timing samples as CSV: address,trial,cycles,verdict.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunListingArgs {
    pub listing: String,
    #[command(flatten)]
    pub common: Common,
    /// Write the event log as JSON lines (to trace.jsonl when no path is given).
    #[arg(long, num_args = 0..=1, default_missing_value = "trace.jsonl")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = DEFAULT_IMUL_COUNT)]
    pub imul_count: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub probe: ProbeOptions,
    /// Addresses to probe (hex or decimal). Without --os they are looked
    /// up in a fixture with one mapped kernel page.
    #[arg(long = "address", value_parser = parse_u64)]
    pub addresses: Vec<u64>,
    /// Probe against a layout randomized from --seed.
    #[arg(long, value_parser = parse_os)]
    pub os: Option<Os>,
}

#[derive(Debug, Args)]
pub struct DerandomizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub probe: ProbeOptions,
    #[arg(long, default_value = "linux", value_parser = parse_os)]
    pub os: Os,
    /// Scan layouts for seeds seed, seed+1, ... seed+repeat-1.
    #[arg(long, default_value_t = 1)]
    pub repeat: u64,
    /// Load the layout from a JSON file instead of randomizing one.
    #[arg(long, conflicts_with = "repeat")]
    pub layout: Option<PathBuf>,
    #[arg(long, default_value_t = LINUX_DEFAULT_IMAGE_PAGES)]
    pub image_pages: u64,
    #[arg(long, default_value_t = LINUX_DEFAULT_MODULE_PAGES)]
    pub module_pages: u64,
    /// Leave out the Windows decoy allocations.
    #[arg(long)]
    pub no_decoys: bool,
    /// Exit with status 3 unless every scan has no false positives or negatives.
    #[arg(long)]
    pub assert_exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepCommand {
    DetectPredictor,
    BufferParams,
    Flushing,
    Guard,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "command", value_enum)]
    pub experiment: SweepCommand,
    /// Sweep the profiles in this file instead of the built-ins.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "off")]
    pub noise: String,
    #[arg(long)]
    pub cycle_budget: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_IMUL_COUNT)]
    pub imul_count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReadArgs {
    #[command(flatten)]
    pub common: Common,
    /// First address to read (hex or decimal); defaults to the fixture's user data.
    #[arg(long, value_parser = parse_u64)]
    pub address: Option<u64>,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    #[arg(long, default_value_t = DEFAULT_IMUL_COUNT)]
    pub imul_count: usize,
    /// Read from a layout randomized from --seed rather than the fixture.
    #[arg(long, value_parser = parse_os)]
    pub os: Option<Os>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    let t = s.replace('_', "");
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse(),
    };
    r.map_err(|e| format!("`{s}`: {e}"))
}

fn parse_technique(s: &str) -> Result<Technique, String> {
    s.parse()
}

fn parse_os(s: &str) -> Result<Os, String> {
    s.parse()
}
