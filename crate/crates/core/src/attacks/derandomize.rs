//! KASLR derandomization: scanning a kernel range page by page and
//! comparing the result with the layout's ground truth.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{fixture_map, FEEDBACK, KERNEL_MAPPED, KERNEL_UNMAPPED, RESULTS, RESULTS_PAGES};
use super::harness::{emit_access_measurement, emit_window, Harness, Measurement, CHAIN_SEED};
use super::measure::{calibrate, Calibration};
use super::probe::{ProbeConfig, Prober, Technique, TimingSample};
use super::AttackError;
use crate::isa::{DecodedProgram, MacroOp, MemOperand, ProgramBuilder, Reg, RegRef, Src, Width};
use crate::memory::{MemoryMap, PAGE_2M, PAGE_4K};
use crate::oslayout::{ground_truth, KaslrLayout, Os, SearchRange, WINDOWS_DEFAULT_IMAGE_SLOTS};
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerandomizationReport {
    pub os: Os,
    pub profile: String,
    pub technique: Technique,
    pub layout_seed: u64,
    pub probes: u64,
    pub detected_pages: Vec<u64>,
    pub ground_truth_pages: Vec<u64>,
    pub false_positives: Vec<u64>,
    pub false_negatives: Vec<u64>,
    /// Linux: lowest detected page of the image range. Windows: start of
    /// the only run of exactly five consecutive mapped slots.
    pub image_base: Option<u64>,
    pub image_base_correct: bool,
    pub simulated_cycles: u64,
    pub samples: Vec<TimingSample>,
}

impl DerandomizationReport {
    fn new(
        layout: &KaslrLayout,
        profile: &MicroArchProfile,
        technique: Technique,
        detected: BTreeSet<u64>,
        image_base: Option<u64>,
        simulated_cycles: u64,
        samples: Vec<TimingSample>,
    ) -> DerandomizationReport {
        let truth = ground_truth(layout);
        DerandomizationReport {
            os: layout.os,
            profile: profile.name.clone(),
            technique,
            layout_seed: layout.seed,
            probes: samples.iter().map(|s| s.address).collect::<BTreeSet<_>>().len() as u64,
            false_positives: detected.difference(&truth).copied().collect(),
            false_negatives: truth.difference(&detected).copied().collect(),
            image_base_correct: image_base == Some(layout.image_base),
            detected_pages: detected.into_iter().collect(),
            ground_truth_pages: truth.into_iter().collect(),
            image_base,
            simulated_cycles,
            samples,
        }
    }

    pub fn fp(&self) -> usize {
        self.false_positives.len()
    }

    pub fn fn_count(&self) -> usize {
        self.false_negatives.len()
    }

    pub fn is_exact(&self) -> bool {
        self.false_positives.is_empty() && self.false_negatives.is_empty()
    }
}

/// Probes every image slot and module page with a fresh core per trial.
pub fn derandomize_linux(
    layout: &KaslrLayout,
    map: Arc<MemoryMap>,
    profile: &MicroArchProfile,
    config: &ProbeConfig,
) -> Result<DerandomizationReport, AttackError> {
    let prober = Prober::new(profile, config.clone())?;
    let ranges = std::iter::once(layout.search).chain(layout.module_search);
    let mut detected = BTreeSet::new();
    let mut samples = Vec::new();
    let mut cycles = 0;
    for addr in ranges.flat_map(|r| r.addresses()) {
        let v = prober.probe(&map, addr)?;
        if v.mapped {
            detected.insert(addr);
        }
        cycles += v.simulated_cycles;
        samples.extend(v.samples);
    }
    let image_base = detected.iter().copied().find(|a| layout.search.contains(*a));
    Ok(DerandomizationReport::new(layout, profile, config.technique, detected, image_base, cycles, samples))
}

/// Shape of the batch program used for Windows: one program probes many
/// slots, several per speculation window, and stores each feedback timing
/// to the results page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowsBatch {
    /// Slots probed in one window. Unmapped slots hold a miss slot each and
    /// so does every feedback load, so this must stay at or below half the
    /// miss slots.
    pub probes_per_window: usize,
    pub windows_per_program: usize,
    pub imul_count: usize,
}

impl WindowsBatch {
    pub fn for_profile(profile: &MicroArchProfile, imul_count: usize) -> WindowsBatch {
        WindowsBatch {
            probes_per_window: (profile.parallel_miss_slots / 2).clamp(1, 20),
            windows_per_program: 64,
            imul_count,
        }
    }

    fn per_program(&self) -> usize {
        self.probes_per_window * self.windows_per_program
    }
}

struct BatchProbe {
    profile: MicroArchProfile,
    batch: WindowsBatch,
    program: DecodedProgram,
    calibration: Calibration,
}

/// Distance between the code of consecutive batch programs, so no two
/// probes share a branch address.
const CODE_STRIDE: u64 = 1 << 24;

impl BatchProbe {
    fn new(profile: &MicroArchProfile, config: &ProbeConfig, batch: WindowsBatch) -> Result<BatchProbe, AttackError> {
        if config.technique != Technique::DependentLoad {
            return Err(AttackError::InvalidConfig(format!(
                "the batch scan uses dependent-load probes, not {}",
                config.technique
            )));
        }
        let p = batch.probes_per_window;
        if p == 0 || 2 * p > profile.parallel_miss_slots || batch.windows_per_program == 0 {
            return Err(AttackError::InvalidConfig(format!(
                "{p} probes per window do not fit {} miss slots",
                profile.parallel_miss_slots
            )));
        }
        if batch.per_program() * 8 > (RESULTS_PAGES * PAGE_4K) as usize {
            return Err(AttackError::InvalidConfig("batch results overflow the results page".into()));
        }
        let mut h = Harness::new(profile, batch.imul_count, config.adapt_static_prediction).measuring(Measurement::None);
        h.flush = (0..p).map(feedback).collect();
        let mut b = ProgramBuilder::new();
        b.init(Reg::R9, CHAIN_SEED).init(Reg::R11, FEEDBACK).init(Reg::R12, RESULTS);
        for w in 0..batch.windows_per_program {
            let exit = emit_window(&mut b, &h, &w.to_string(), |b, _| {
                for i in 0..p {
                    let k = MemOperand { disp: (i as u64 * PAGE_2M) as i64, ..MemOperand::reg(Reg::R10) };
                    b.load(Reg::RAX, k);
                    b.load(Reg::RSI, MemOperand { index: Some(Reg::RAX), ..feedback(i) });
                }
            });
            b.label(&exit);
            for i in 0..p {
                emit_access_measurement(&mut b, feedback(i), h.rdtscp);
                let slot = MemOperand { disp: 8 * (w * p + i) as i64, ..MemOperand::reg(Reg::R12) };
                b.store(slot, Src::Reg(RegRef::full(Reg::R14)));
            }
            b.op(MacroOp::Add { dst: RegRef::full(Reg::R10), src: Src::Imm((p as u64 * PAGE_2M) as i64) });
        }
        let program = DecodedProgram::new(&b.build()?);
        let calibration = match config.threshold {
            Some(t) => Calibration { hit: 0, miss: 0, threshold: t },
            None => calibrate(profile, &config.sim)?,
        };
        Ok(BatchProbe { profile: profile.clone(), batch, program, calibration })
    }

    /// Runs one batch program starting at `start` and returns the measured
    /// feedback timings in slot order.
    fn run(&self, core: &mut Core, chunk: u64, start: u64) -> Result<Vec<u64>, AttackError> {
        let mut init = self.program.init_regs.clone();
        init.push((Reg::R10, start));
        let prog = self.program.with_init(init).with_code_base(chunk * CODE_STRIDE);
        let r = core.run(&prog);
        if r.terminal != Terminal::Exited {
            return Err(AttackError::Terminated(r.terminal));
        }
        Ok((0..self.batch.per_program() as u64).map(|j| core.memory().read(RESULTS + 8 * j, Width::Qword)).collect())
    }

    /// Checks the batch on the fixture: every slot from the unmapped kernel
    /// page up to the top of the address space must come out right.
    fn validate(&self, config: &ProbeConfig) -> Result<(), AttackError> {
        let map = Arc::new(fixture_map());
        let mut core = Core::new(&self.profile, map, config.sim.core_options(0x00ba_7c40));
        let timings = self.run(&mut core, 0, KERNEL_UNMAPPED)?;
        for (j, t) in timings.iter().enumerate() {
            // stop at the first window that wraps around into user space
            let p = self.batch.probes_per_window as u64;
            let window_end = (j as u64 / p + 1) * p * PAGE_2M;
            if KERNEL_UNMAPPED.checked_add(window_end).is_none() {
                break;
            }
            let addr = KERNEL_UNMAPPED + j as u64 * PAGE_2M;
            if self.calibration.is_cached(*t) != (addr == KERNEL_MAPPED) {
                return Err(AttackError::TechniqueIneffective {
                    technique: Technique::DependentLoad,
                    profile: self.profile.name.clone(),
                    reason: format!("batch probe misjudged {addr:#x} ({t} cycles)"),
                });
            }
        }
        Ok(())
    }
}

fn feedback(i: usize) -> MemOperand {
    MemOperand { disp: 64 * i as i64, ..MemOperand::reg(Reg::R11) }
}

/// Start slots of runs of exactly `len` consecutive detected slots.
pub fn fingerprint_runs(detected: &BTreeSet<u64>, range: &SearchRange, len: u64) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut iter = detected.iter().copied().filter(|a| range.contains(*a)).peekable();
    while let Some(start) = iter.next() {
        let mut n = 1;
        while iter.peek() == Some(&(start + n * range.stride)) {
            iter.next();
            n += 1;
        }
        if n == len {
            runs.push(start);
        }
    }
    runs
}

/// Scans every Windows slot with batch programs on one persistent core
/// and locates the image by its five-slot fingerprint.
pub fn derandomize_windows(
    layout: &KaslrLayout,
    map: Arc<MemoryMap>,
    profile: &MicroArchProfile,
    config: &ProbeConfig,
    batch: WindowsBatch,
) -> Result<DerandomizationReport, AttackError> {
    let probe = BatchProbe::new(profile, config, batch)?;
    probe.validate(config)?;
    let range = layout.search;
    let per_program = batch.per_program() as u64;
    let mut core = Core::new(profile, map, config.sim.core_options(layout.seed));
    let mut detected = BTreeSet::new();
    let mut samples = Vec::with_capacity(range.len() as usize);
    let start_cycle = core.cycle();
    for chunk in 0..range.len().div_ceil(per_program) {
        let first = chunk * per_program;
        let timings = probe.run(&mut core, chunk + 1, range.start + first * range.stride)?;
        for (j, cycles) in timings.into_iter().enumerate() {
            let slot = first + j as u64;
            if slot >= range.len() {
                break;
            }
            let address = range.start + slot * range.stride;
            let verdict = probe.calibration.is_cached(cycles);
            if verdict {
                detected.insert(address);
            }
            samples.push(TimingSample { address, trial: 0, cycles, verdict });
        }
    }
    let runs = fingerprint_runs(&detected, &range, WINDOWS_DEFAULT_IMAGE_SLOTS);
    let image_base = if runs.len() == 1 { Some(runs[0]) } else { None };
    let cycles = core.cycle() - start_cycle;
    Ok(DerandomizationReport::new(layout, profile, config.technique, detected, image_base, cycles, samples))
}

/// Scans the layout's ranges with the OS-appropriate driver.
pub fn derandomize(
    layout: &KaslrLayout,
    map: Arc<MemoryMap>,
    profile: &MicroArchProfile,
    config: &ProbeConfig,
) -> Result<DerandomizationReport, AttackError> {
    match layout.os {
        Os::Linux => derandomize_linux(layout, map, profile, config),
        Os::Windows => {
            let batch = WindowsBatch::for_profile(profile, config.imul_count);
            derandomize_windows(layout, map, profile, config, batch)
        }
    }
}
