//! Timestamp measurement of single accesses and threshold calibration.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{feedback_line, fixture_map};
use super::harness::emit_access_measurement;
use super::{AttackError, SimOptions};
use crate::isa::{DecodedProgram, MemOperand, ProgramBuilder};
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

/// The measurement sequence around one load of `addr`, as a program.
pub fn measurement_program(addr: u64, rdtscp: bool) -> DecodedProgram {
    let mut b = ProgramBuilder::new();
    emit_access_measurement(&mut b, MemOperand::absolute(addr), rdtscp);
    DecodedProgram::new(&b.build().expect("measurement program has no labels"))
}

/// Measures one access to `addr` on `core`, leaving the line resident.
pub fn measure_access(core: &mut Core, addr: u64) -> Result<u64, AttackError> {
    let prog = measurement_program(addr, core.profile().has_rdtscp);
    let r = core.run(&prog);
    match r.terminal {
        Terminal::Exited => Ok(r.registers[14]),
        t => Err(AttackError::Terminated(t)),
    }
}

/// Reference timings of a cached and an uncached access and the decision
/// threshold between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calibration {
    pub hit: u64,
    pub miss: u64,
    pub threshold: u64,
}

impl Calibration {
    pub fn from_timings(hit: u64, miss: u64) -> Calibration {
        Calibration { hit, miss, threshold: hit + (miss.saturating_sub(hit)) / 2 }
    }

    pub fn is_cached(&self, cycles: u64) -> bool {
        cycles < self.threshold
    }
}

/// Rounds of calibration; the minimum of each kind is kept so a spurious
/// eviction or jitter in one round cannot invert the two.
const CALIBRATION_ROUNDS: usize = 8;

/// Measures known-uncached and then known-cached lines on a private
/// fixture map. Noise in `sim` applies.
pub fn calibrate(profile: &MicroArchProfile, sim: &SimOptions) -> Result<Calibration, AttackError> {
    let mut core = Core::new(profile, Arc::new(fixture_map()), sim.core_options(0x00ca_11b8));
    let (mut hit, mut miss) = (u64::MAX, u64::MAX);
    for i in 0..CALIBRATION_ROUNDS {
        let line = feedback_line(i);
        miss = miss.min(measure_access(&mut core, line)?);
        hit = hit.min(measure_access(&mut core, line)?);
    }
    if hit >= miss {
        return Err(AttackError::Calibration { hit, miss });
    }
    Ok(Calibration::from_timings(hit, miss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uarch::builtin_profiles;

    #[test]
    fn hit_and_miss_differ_by_the_latency_gap() {
        for p in builtin_profiles() {
            let c = calibrate(&p, &SimOptions::default()).unwrap();
            assert_eq!(c.miss - c.hit, (p.memory_latency - p.l1_hit_latency) as u64, "{}", p.name);
            assert!(c.hit >= p.l1_hit_latency as u64);
        }
    }
}
