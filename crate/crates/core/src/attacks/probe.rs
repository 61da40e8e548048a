//! Per-address probes that decide whether a kernel address is mapped.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{fixture_map, FEEDBACK, KERNEL_MAPPED, KERNEL_UNMAPPED};
use super::harness::{build_speculation_harness, emit_zero_split, BranchLayout, Harness, Measurement, CHAIN_SEED};
use super::measure::calibrate;
use super::{AttackError, SimOptions, DEFAULT_IMUL_COUNT};
use crate::isa::{DecodedProgram, MacroOp, MemOperand, Program, Reg};
use crate::memory::MemoryMap;
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    /// Nested check `cmp [K], 0` that caches the feedback line on a zero read.
    TwoLevel,
    /// `mov rax, [K]; mov rsi, [U + rax]`.
    DependentLoad,
    /// A run of loads from K followed by a load of U.
    Exhaustion,
    /// Flush duration of a nested misprediction that halts.
    Flushing,
}

impl Technique {
    pub const ALL: [Technique; 4] =
        [Technique::TwoLevel, Technique::DependentLoad, Technique::Exhaustion, Technique::Flushing];

    pub fn name(self) -> &'static str {
        match self {
            Technique::TwoLevel => "two-level",
            Technique::DependentLoad => "dependent-load",
            Technique::Exhaustion => "exhaustion",
            Technique::Flushing => "flushing",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> Result<Technique, String> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown technique `{s}` (expected two-level, dependent-load, exhaustion or flushing)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub technique: Technique,
    pub imul_count: usize,
    pub trials: usize,
    /// Loads issued by the exhaustion probe; defaults to the middle of the
    /// profile's usable range.
    pub exhaustion_loads: Option<usize>,
    pub feedback: u64,
    /// Decision threshold in cycles; calibrated when absent.
    pub threshold: Option<u64>,
    /// Lay branches out for the profile's static forward prediction.
    pub adapt_static_prediction: bool,
    pub sim: SimOptions,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            technique: Technique::DependentLoad,
            imul_count: DEFAULT_IMUL_COUNT,
            trials: 2,
            exhaustion_loads: None,
            feedback: FEEDBACK,
            threshold: None,
            adapt_static_prediction: true,
            sim: SimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSample {
    pub address: u64,
    pub trial: usize,
    pub cycles: u64,
    /// Whether this sample alone points to a mapped page.
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub address: u64,
    pub mapped: bool,
    pub samples: Vec<TimingSample>,
    /// Cycles simulated across all trials.
    pub simulated_cycles: u64,
}

/// How timings translate into a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub threshold: u64,
    /// Whether mapped pages produce timings below the threshold.
    pub mapped_below: bool,
}

impl Decision {
    pub fn mapped(&self, cycles: u64) -> bool {
        (cycles < self.threshold) == self.mapped_below
    }
}

/// A calibrated probe for one profile and configuration, reusable across
/// addresses and memory maps.
#[derive(Debug, Clone)]
pub struct Prober {
    profile: MicroArchProfile,
    config: ProbeConfig,
    program: DecodedProgram,
    decision: Decision,
}

/// Range of exhaustion load counts that separate mapped from unmapped
/// pages: at least the miss-slot count, fewer than the load buffer.
fn exhaustion_range(profile: &MicroArchProfile) -> Option<(usize, usize)> {
    profile.load_buffer_entries.map(|lb| (profile.parallel_miss_slots, lb.saturating_sub(1)))
}

fn flushing_nops(profile: &MicroArchProfile) -> usize {
    64.min(profile.rob_entries / 4)
}

/// Builds the probe program for `technique`; r10 holds K and r11 the
/// feedback address at run time.
pub fn probe_program(profile: &MicroArchProfile, config: &ProbeConfig) -> Result<DecodedProgram, AttackError> {
    let mut h = Harness::new(profile, config.imul_count, config.adapt_static_prediction);
    let inner = if config.adapt_static_prediction { h.layout } else { BranchLayout::FallThrough };
    let k = MemOperand::reg(Reg::R10);
    let u = MemOperand::reg(Reg::R11);
    let program = match config.technique {
        Technique::TwoLevel => build_speculation_harness(&h, |b, exit| {
            b.op(MacroOp::CmpMemImm { mem: k, imm: 0 });
            emit_zero_split(b, inner, "", exit, |b| {
                b.load(Reg::RSI, u);
            }, |_| {});
        })?,
        Technique::DependentLoad => build_speculation_harness(&h, |b, _| {
            b.load(Reg::RAX, k);
            b.load(Reg::RSI, MemOperand { index: Some(Reg::RAX), ..u });
        })?,
        Technique::Exhaustion => {
            let n = match (config.exhaustion_loads, exhaustion_range(profile)) {
                (Some(n), Some((lo, hi))) if n < lo || n > hi => {
                    return Err(AttackError::InvalidConfig(format!(
                        "exhaustion load count {n} outside [{lo}, {hi}] for {}",
                        profile.name
                    )))
                }
                (Some(n), _) => n,
                (None, Some((lo, hi))) => lo + (hi - lo) / 2,
                (None, None) => profile.parallel_miss_slots,
            };
            exhaustion_harness(&h, n)?
        }
        Technique::Flushing => {
            h = h.measuring(Measurement::Block);
            h.flush.clear();
            let nops = flushing_nops(profile);
            build_speculation_harness(&h, |b, exit| {
                b.op(MacroOp::CmpMemImm { mem: k, imm: 0 });
                emit_zero_split(b, inner, "", exit, |b| {
                    b.op(MacroOp::Hlt);
                }, |b| {
                    b.nops(nops);
                });
            })?
        }
    };
    Ok(DecodedProgram::new(&program))
}

/// `loads` loads of `[r10]` followed by a load of `[r11]` inside one
/// speculation window.
pub(super) fn exhaustion_harness(h: &Harness, loads: usize) -> Result<Program, AttackError> {
    Ok(build_speculation_harness(h, |b, _| {
        for _ in 0..loads {
            b.load(Reg::RAX, MemOperand::reg(Reg::R10));
        }
        b.load(Reg::RSI, MemOperand::reg(Reg::R11));
    })?)
}

fn trial_salt(address: u64, trial: usize) -> u64 {
    address.rotate_left(17) ^ (trial as u64).wrapping_mul(0x9e37_79b9)
}

impl Prober {
    /// Builds the probe and calibrates it on a private fixture map with one
    /// mapped and one unmapped kernel page.
    pub fn new(profile: &MicroArchProfile, config: ProbeConfig) -> Result<Prober, AttackError> {
        if config.trials == 0 {
            return Err(AttackError::InvalidConfig("at least one trial is needed".into()));
        }
        let program = probe_program(profile, &config)?;
        let mut prober = Prober {
            profile: profile.clone(),
            config,
            program,
            decision: Decision { threshold: 0, mapped_below: true },
        };
        let fixture = Arc::new(fixture_map());
        let mapped = prober.min_cycles(&fixture, KERNEL_MAPPED)?;
        let unmapped = prober.min_cycles(&fixture, KERNEL_UNMAPPED)?;
        let ineffective = |reason: String| AttackError::TechniqueIneffective {
            technique: prober.config.technique,
            profile: profile.name.clone(),
            reason,
        };
        prober.decision = match prober.config.technique {
            Technique::Flushing => {
                if mapped == unmapped {
                    return Err(ineffective(format!("mapped and unmapped blocks both take {mapped} cycles")));
                }
                let threshold = prober.config.threshold.unwrap_or((mapped + unmapped).div_ceil(2));
                Decision { threshold, mapped_below: mapped < unmapped }
            }
            _ => {
                let threshold = match prober.config.threshold {
                    Some(t) => t,
                    None => calibrate(profile, &prober.config.sim)?.threshold,
                };
                let d = Decision { threshold, mapped_below: true };
                if !d.mapped(mapped) || d.mapped(unmapped) {
                    let state = |c: u64| if c < threshold { "cached" } else { "not cached" };
                    return Err(ineffective(format!(
                        "feedback line is {} for a mapped page and {} for an unmapped one",
                        state(mapped),
                        state(unmapped)
                    )));
                }
                d
            }
        };
        Ok(prober)
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn program(&self) -> &DecodedProgram {
        &self.program
    }

    /// One trial on a fresh core, as a new process would see it. Returns the
    /// measured cycles and the cycles the run took.
    pub fn trial(&self, map: &Arc<MemoryMap>, address: u64, trial: usize) -> Result<(u64, u64), AttackError> {
        let options = self.config.sim.core_options(trial_salt(address, trial));
        let mut core = Core::new(&self.profile, map.clone(), options);
        let prog = self.program.with_init(vec![
            (Reg::R9, CHAIN_SEED),
            (Reg::R10, address),
            (Reg::R11, self.config.feedback),
        ]);
        let r = core.run(&prog);
        match r.terminal {
            Terminal::Exited => Ok((r.registers[14], r.cycles())),
            t => Err(AttackError::Terminated(t)),
        }
    }

    fn min_cycles(&self, map: &Arc<MemoryMap>, address: u64) -> Result<u64, AttackError> {
        let mut best = u64::MAX;
        for t in 0..self.config.trials {
            best = best.min(self.trial(map, address, t)?.0);
        }
        Ok(best)
    }

    /// Probes `address`; the verdict uses the minimum over all trials.
    pub fn probe(&self, map: &Arc<MemoryMap>, address: u64) -> Result<ProbeVerdict, AttackError> {
        let mut samples = Vec::with_capacity(self.config.trials);
        let mut simulated_cycles = 0;
        for trial in 0..self.config.trials {
            let (cycles, simulated) = self.trial(map, address, trial)?;
            simulated_cycles += simulated;
            samples.push(TimingSample { address, trial, cycles, verdict: self.decision.mapped(cycles) });
        }
        let best = samples.iter().map(|s| s.cycles).min().expect("at least one trial");
        Ok(ProbeVerdict { address, mapped: self.decision.mapped(best), samples, simulated_cycles })
    }
}

/// Calibrates a probe and checks one address.
pub fn probe_address(
    address: u64,
    config: &ProbeConfig,
    profile: &MicroArchProfile,
    map: Arc<MemoryMap>,
) -> Result<ProbeVerdict, AttackError> {
    Prober::new(profile, config.clone())?.probe(&map, address)
}
