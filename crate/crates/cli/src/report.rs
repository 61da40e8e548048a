//! The versioned JSON report every command emits, plus its text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use specsim::attacks::TimingSample;

/// Bumped whenever a field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    /// The resolved settings the command ran with.
    pub config: serde_json::Value,
    /// Command-specific results.
    pub result: serde_json::Value,
    pub summary: Summary,
    /// Wall-clock facts; the only part that differs between identical runs.
    pub meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub false_positives: Option<u64>,
    pub false_negatives: Option<u64>,
    pub simulated_cycles: u64,
    pub timing: Vec<TimingGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingGroup {
    pub group: String,
    pub samples: usize,
    pub min: u64,
    pub median: u64,
    pub mean: f64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub timestamp_unix: u64,
    pub wall_time_ms: u64,
}

impl Report {
    pub fn new(command: &str, config: impl Serialize, result: impl Serialize, summary: Summary) -> Result<Report> {
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            result: serde_json::to_value(result)?,
            summary,
            meta: Meta { timestamp_unix: 0, wall_time_ms: 0 },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing report to {}", path.display()))
    }
}

impl Summary {
    pub fn cycles(simulated_cycles: u64) -> Summary {
        Summary { false_positives: None, false_negatives: None, simulated_cycles, timing: Vec::new() }
    }
}

/// Groups cycle counts by label, in label order.
pub fn timing_groups(samples: impl IntoIterator<Item = (String, u64)>) -> Vec<TimingGroup> {
    let mut groups: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (label, cycles) in samples {
        groups.entry(label).or_default().push(cycles);
    }
    groups.into_iter().map(|(group, v)| timing_group(group, v)).collect()
}

/// Order statistics of one group. The median is the lower middle value.
pub fn timing_group(group: String, mut cycles: Vec<u64>) -> TimingGroup {
    cycles.sort_unstable();
    let n = cycles.len();
    if n == 0 {
        return TimingGroup { group, samples: 0, min: 0, median: 0, mean: 0.0, max: 0 };
    }
    TimingGroup {
        group,
        samples: n,
        min: cycles[0],
        median: cycles[(n - 1) / 2],
        mean: cycles.iter().map(|&c| c as f64).sum::<f64>() / n as f64,
        max: cycles[n - 1],
    }
}

pub fn address_groups(samples: &[TimingSample]) -> Vec<TimingGroup> {
    timing_groups(samples.iter().map(|s| (format!("{:#018x}", s.address), s.cycles)))
}

/// Human-readable rendering of a report.
pub fn report_summary(report: &Report) -> String {
    let s = &report.summary;
    let mut out = format!("{} (schema {})\n", report.command, report.schema_version);
    if let (Some(fp), Some(fn_)) = (s.false_positives, s.false_negatives) {
        let _ = writeln!(out, "false positives: {fp}, false negatives: {fn_}");
    }
    let _ = writeln!(out, "simulated cycles: {}", s.simulated_cycles);
    if !s.timing.is_empty() {
        let width = s.timing.iter().map(|g| g.group.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(out, "{:<width$} {:>8} {:>8} {:>8} {:>10}", "group", "samples", "min", "median", "mean");
        for g in &s.timing {
            let _ = writeln!(out, "{:<width$} {:>8} {:>8} {:>8} {:>10.1}", g.group, g.samples, g.min, g.median, g.mean);
        }
    }
    out
}

/// Writes timing samples as `address,trial,cycles,verdict`.
pub fn write_samples_csv(path: &Path, samples: &[TimingSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["address", "trial", "cycles", "verdict"])?;
    for s in samples {
        let verdict = if s.verdict { "mapped" } else { "unmapped" };
        w.write_record([format!("{:#x}", s.address), s.trial.to_string(), s.cycles.to_string(), verdict.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
