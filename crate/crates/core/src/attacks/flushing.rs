//! The flushing-duration channel: halting on a mispredicted path shortens
//! the flush that follows.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::fixture_map;
use super::harness::{build_speculation_harness, BranchLayout, Harness, Measurement, CHAIN_SEED};
use super::{AttackError, SimOptions, DEFAULT_IMUL_COUNT};
use crate::isa::{DecodedProgram, MacroOp, Reg, UopKind};
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionState {
    /// The slow branch is predicted the wrong way and the body is flushed.
    Mispredicted,
    /// The predictor was trained on the real outcome beforehand.
    CorrectlyPredicted,
}

/// Cycles for the whole block: the chain, the slow branch and a body of
/// nops that ends in `hlt` when `with_hlt` is set.
pub fn flushing_channel_probe(
    state: ConditionState,
    with_hlt: bool,
    profile: &MicroArchProfile,
    sim: &SimOptions,
) -> Result<u64, AttackError> {
    let mut h = Harness::new(profile, DEFAULT_IMUL_COUNT, true).measuring(Measurement::Block);
    h.flush.clear();
    let nops = 128.min(profile.rob_entries.saturating_sub(8));
    let program = build_speculation_harness(&h, |b, _| {
        b.nops(nops);
        if with_hlt {
            b.op(MacroOp::Hlt);
        }
    })?;
    let prog = DecodedProgram::new(&program).with_init(vec![(Reg::R9, CHAIN_SEED)]);
    let mut core = Core::new(profile, Arc::new(fixture_map()), sim.core_options(with_hlt as u64));
    if state == ConditionState::CorrectlyPredicted {
        let branch = prog.uops.iter().position(|u| u.kind == UopKind::BranchCond).expect("harness has a branch");
        // `je Exit` is taken and `jne Body` is not
        let counter = match h.layout {
            BranchLayout::FallThrough => 3,
            BranchLayout::Taken => 0,
        };
        let addr = prog.branch_address(branch);
        core.predictor_mut().set_counter(addr, counter);
    }
    let r = core.run(&prog);
    match r.terminal {
        Terminal::Exited => Ok(r.registers[14]),
        t => Err(AttackError::Terminated(t)),
    }
}
