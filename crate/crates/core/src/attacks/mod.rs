//! Attack programs built on forced speculation, the timing measurement
//! protocol, per-address probes and KASLR derandomization drivers.

mod derandomize;
mod detect;
mod exhaustion;
pub mod fixture;
mod flushing;
mod guard;
pub mod harness;
mod measure;
mod probe;
mod read;

use serde::{Deserialize, Serialize};

use crate::memory::{splitmix64, NoiseConfig};
use crate::pipeline::{CoreOptions, Terminal};

pub use derandomize::{derandomize, derandomize_linux, derandomize_windows, fingerprint_runs, DerandomizationReport, WindowsBatch};
pub use detect::{detect_static_predictor, PredictorVerdict};
pub use exhaustion::{min_stalling_loads, recover_buffer_params, BufferParams};
pub use flushing::{flushing_channel_probe, ConditionState};
pub use guard::{guarded_conditional_demo, GuardOutcome, SOMEVAR};
pub use harness::{build_speculation_harness, BranchLayout, Harness, Measurement, DEFAULT_IMUL_COUNT};
pub use measure::{calibrate, measure_access, measurement_program, Calibration};
pub use probe::{probe_address, probe_program, Decision, ProbeConfig, ProbeVerdict, Prober, Technique, TimingSample};
pub use read::{arbitrary_read, kernel_read, Reader};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error("{technique} is ineffective on {profile}: {reason}")]
    TechniqueIneffective { technique: Technique, profile: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("could not read {addr:#x}: the speculative load never completed")]
    ReadFailure { addr: u64 },
    #[error("calibration failed: cached access took {hit} cycles, uncached {miss}")]
    Calibration { hit: u64, miss: u64 },
    #[error("program did not exit normally: {0:?}")]
    Terminated(Terminal),
    #[error(transparent)]
    Program(#[from] crate::isa::AsmError),
}

/// Simulation settings shared by every run an attack performs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub noise: Option<NoiseConfig>,
    pub seed: u64,
    pub cycle_budget: u64,
}

impl Default for SimOptions {
    fn default() -> SimOptions {
        SimOptions { noise: None, seed: 0, cycle_budget: 2_000_000 }
    }
}

impl SimOptions {
    /// Core options for one run; `salt` separates the noise streams of
    /// different runs so results do not depend on execution order.
    pub fn core_options(&self, salt: u64) -> CoreOptions {
        CoreOptions {
            cycle_budget: self.cycle_budget,
            seed: splitmix64(self.seed ^ splitmix64(salt)),
            noise: self.noise,
            trace: false,
            capture_state: false,
        }
    }
}
