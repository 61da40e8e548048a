use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::isa::NUM_GPRS;
use crate::memory::{FaultKind, NoiseConfig};

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Terminal {
    /// The program ran off its end or committed a `hlt`.
    Exited,
    /// A faulting memory access reached commit.
    SegFault { addr: u64, fault: FaultKind },
    CycleBudgetExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    /// A micro-op entered the reorder buffer. `speculative` is set when an
    /// older conditional branch was still unresolved.
    Issue { seq: u64, uop: usize, instr: usize, speculative: bool },
    Dispatch { seq: u64 },
    Complete { seq: u64 },
    Commit { seq: u64, instr: usize },
    Predict { seq: u64, address: u64, taken: bool },
    Resolve { seq: u64, taken: bool, mispredicted: bool },
    Flush { branch_seq: u64, flushed: u64, cost: u64, quiesced: bool },
    LoadFault { seq: u64, addr: u64, fault: FaultKind, stalled: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub cycle: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Writes events as JSON lines.
pub fn write_trace<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreOptions {
    /// Maximum number of cycles a single run may take.
    pub cycle_budget: u64,
    pub seed: u64,
    pub noise: Option<NoiseConfig>,
    pub trace: bool,
    /// Whether [`RunResult`] carries cache and memory snapshots.
    pub capture_state: bool,
}

impl Default for CoreOptions {
    fn default() -> CoreOptions {
        CoreOptions { cycle_budget: 10_000_000, seed: 0, noise: None, trace: false, capture_state: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub registers: [u64; NUM_GPRS],
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub committed: u64,
    pub flushed: u64,
    pub max_speculation_depth: usize,
    /// Resident cache lines at the end of the run (empty unless captured).
    pub cache: BTreeSet<u64>,
    /// Committed store bytes (empty unless captured).
    pub memory_writes: BTreeMap<u64, u8>,
    pub events: Vec<TraceEvent>,
    pub terminal: Terminal,
}

impl RunResult {
    pub fn cycles(&self) -> u64 {
        self.end_cycle - self.start_cycle
    }

    pub fn issued(&self) -> u64 {
        self.committed + self.flushed
    }
}
