//! Telling a forward-not-taken static predictor from a forward-taken one.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{fixture_map, FEEDBACK};
use super::harness::{build_speculation_harness, BranchLayout, Harness, CHAIN_SEED};
use super::measure::calibrate;
use super::{AttackError, SimOptions};
use crate::isa::{DecodedProgram, MemOperand, Reg};
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorVerdict {
    ForwardNotTaken,
    ForwardTaken,
    Inconclusive,
}

impl PredictorVerdict {
    /// Single-letter column value: N, T or ?.
    pub fn letter(self) -> char {
        match self {
            PredictorVerdict::ForwardNotTaken => 'N',
            PredictorVerdict::ForwardTaken => 'T',
            PredictorVerdict::Inconclusive => '?',
        }
    }
}

/// Runs the two detection programs on fresh cores: one with the feedback
/// load on the fall-through side of a taken `je`, one on the taken side of
/// a not-taken `jne`. Whichever caches the line reveals the policy.
pub fn detect_static_predictor(
    profile: &MicroArchProfile,
    imul_count: usize,
    sim: &SimOptions,
) -> Result<PredictorVerdict, AttackError> {
    let calibration = calibrate(profile, sim)?;
    let map = Arc::new(fixture_map());
    let cached = |layout: BranchLayout| -> Result<bool, AttackError> {
        let mut h = Harness::new(profile, imul_count, false);
        h.layout = layout;
        let program = build_speculation_harness(&h, |b, _| {
            b.load(Reg::RSI, MemOperand::reg(Reg::R11));
        })?;
        let prog = DecodedProgram::new(&program).with_init(vec![(Reg::R9, CHAIN_SEED), (Reg::R11, FEEDBACK)]);
        let mut core = Core::new(profile, map.clone(), sim.core_options(layout as u64));
        let r = core.run(&prog);
        match r.terminal {
            Terminal::Exited => Ok(calibration.is_cached(r.registers[14])),
            t => Err(AttackError::Terminated(t)),
        }
    };
    Ok(match (cached(BranchLayout::FallThrough)?, cached(BranchLayout::Taken)?) {
        (true, false) => PredictorVerdict::ForwardNotTaken,
        (false, true) => PredictorVerdict::ForwardTaken,
        _ => PredictorVerdict::Inconclusive,
    })
}
