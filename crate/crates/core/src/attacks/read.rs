//! Byte reads through nested speculation, one bit per probe.

use std::sync::Arc;

use super::fixture::FEEDBACK;
use super::harness::{build_speculation_harness, emit_zero_split, Harness, CHAIN_SEED};
use super::measure::{calibrate, Calibration};
use super::{AttackError, SimOptions, DEFAULT_IMUL_COUNT};
use crate::isa::{DecodedProgram, MacroOp, MemOperand, Reg, RegRef, Src, UopKind, Width};
use crate::memory::MemoryMap;
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

/// Runs the nine probe programs of a byte read: one per bit plus a liveness
/// probe whose mask is zero, so it caches the feedback line whenever the
/// target load completes at all.
#[derive(Debug, Clone)]
pub struct Reader {
    profile: MicroArchProfile,
    sim: SimOptions,
    calibration: Calibration,
    /// Index 0..8 tests bit i; index 8 is the liveness probe.
    programs: Vec<DecodedProgram>,
}

/// `mov r10b, BYTE PTR [r10]; test r10b, mask` inside a window, caching
/// `[r11]` on the zero side.
fn bit_program(profile: &MicroArchProfile, imul_count: usize, mask: u8) -> Result<DecodedProgram, AttackError> {
    let h = Harness::new(profile, imul_count, true);
    let inner = h.layout;
    let program = build_speculation_harness(&h, |b, exit| {
        b.op(MacroOp::Load {
            dst: RegRef::byte(Reg::R10),
            mem: MemOperand::reg(Reg::R10).with_width(Width::Byte),
        });
        b.op(MacroOp::Test { lhs: RegRef::byte(Reg::R10), rhs: Src::Imm(mask as i64) });
        emit_zero_split(b, inner, "", exit, |b| {
            b.load(Reg::RSI, MemOperand::reg(Reg::R11));
        }, |_| {});
    })?;
    Ok(DecodedProgram::new(&program))
}

impl Reader {
    pub fn new(profile: &MicroArchProfile, sim: &SimOptions) -> Result<Reader, AttackError> {
        Reader::with_imul_count(profile, sim, DEFAULT_IMUL_COUNT)
    }

    /// The window has to outlast a memory access for the target byte to
    /// arrive before the outer branch resolves.
    pub fn with_imul_count(profile: &MicroArchProfile, sim: &SimOptions, imul_count: usize) -> Result<Reader, AttackError> {
        let window = imul_count.min(profile.rob_entries) as u64 * profile.latency(UopKind::AluMul) as u64;
        if window <= profile.memory_latency as u64 {
            return Err(AttackError::InvalidConfig(format!(
                "a window of about {window} cycles cannot cover a {}-cycle memory access",
                profile.memory_latency
            )));
        }
        let masks = (0..8).map(|i| 1u8 << i).chain([0]);
        let programs = masks.map(|m| bit_program(profile, imul_count, m)).collect::<Result<_, _>>()?;
        Ok(Reader { profile: profile.clone(), sim: *sim, calibration: calibrate(profile, sim)?, programs })
    }

    fn feedback_cached(&self, map: &Arc<MemoryMap>, addr: u64, probe: usize) -> Result<bool, AttackError> {
        let salt = addr.rotate_left(9) ^ probe as u64;
        let mut core = Core::new(&self.profile, map.clone(), self.sim.core_options(salt));
        let prog = self.programs[probe].with_init(vec![(Reg::R9, CHAIN_SEED), (Reg::R10, addr), (Reg::R11, FEEDBACK)]);
        let r = core.run(&prog);
        match r.terminal {
            Terminal::Exited => Ok(self.calibration.is_cached(r.registers[14])),
            t => Err(AttackError::Terminated(t)),
        }
    }

    /// Reads the byte at `addr` as the speculative path sees it.
    pub fn read_byte(&self, map: &Arc<MemoryMap>, addr: u64) -> Result<u8, AttackError> {
        if !self.feedback_cached(map, addr, 8)? {
            return Err(AttackError::ReadFailure { addr });
        }
        let mut byte = 0u8;
        for bit in 0..8 {
            if !self.feedback_cached(map, addr, bit)? {
                byte |= 1 << bit;
            }
        }
        Ok(byte)
    }

    pub fn read(&self, map: &Arc<MemoryMap>, addr: u64, len: usize) -> Result<Vec<u8>, AttackError> {
        (0..len as u64).map(|i| self.read_byte(map, addr + i)).collect()
    }
}

/// Reads one byte of user memory through nested speculation.
pub fn arbitrary_read(target: u64, profile: &MicroArchProfile, map: Arc<MemoryMap>, sim: &SimOptions) -> Result<u8, AttackError> {
    Reader::new(profile, sim)?.read_byte(&map, target)
}

/// The same read pointed at kernel memory. Profiles whose privilege check
/// returns zero yield 0x00; stalling ones fail.
pub fn kernel_read(target: u64, profile: &MicroArchProfile, map: Arc<MemoryMap>, sim: &SimOptions) -> Result<u8, AttackError> {
    arbitrary_read(target, profile, map, sim)
}
