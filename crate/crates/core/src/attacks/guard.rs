//! A conditional guarded by a backward jump on the same condition, which
//! keeps a forward-not-taken predictor from speculating into the else
//! branch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{fixture_map, FEEDBACK, USER_DATA};
use super::harness::emit_access_measurement;
use super::measure::calibrate;
use super::{AttackError, SimOptions};
use crate::isa::{Cond, DecodedProgram, MacroOp, MemOperand, ProgramBuilder, Reg, RegRef, Src};
use crate::pipeline::{Core, Terminal};
use crate::uarch::{ForwardPrediction, MicroArchProfile};

/// The secret-dependent comparison reads this user variable.
pub const SOMEVAR: u64 = USER_DATA + 0x40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardOutcome {
    /// Whether the variable compared equal architecturally.
    pub equal: bool,
    pub unguarded_leak: bool,
    pub guarded_leak: bool,
}

/// `if (rax == somevar) { A } else { B }` where the gadget (a load of the
/// feedback line) sits on whichever side never runs architecturally.
/// With `guarded`, a backward `je` to itself heads the fall-through side.
fn demo_program(equal: bool, guarded: bool, rdtscp: bool) -> Result<DecodedProgram, AttackError> {
    let somevar = MemOperand::absolute(SOMEVAR);
    let u = MemOperand::reg(Reg::R11);
    let mut b = ProgramBuilder::new();
    b.init(Reg::R11, FEEDBACK).load(Reg::RAX, somevar);
    if !equal {
        b.op(MacroOp::Add { dst: RegRef::full(Reg::RAX), src: Src::Imm(1) });
    }
    b.clflush(somevar)
        .clflush(u)
        .op(MacroOp::Cpuid)
        .op(MacroOp::CmpRegMem { lhs: RegRef::full(Reg::RAX), mem: somevar })
        .jcc(Cond::Zero, "Equal")
        .label("FallThrough1");
    if guarded {
        b.jcc(Cond::Zero, "FallThrough1");
    }
    if equal {
        b.load(Reg::RSI, u);
    } else {
        b.mov(Reg::RCX, Src::Imm(2));
    }
    b.jmp("Exit").label("Equal");
    if equal {
        b.mov(Reg::RCX, Src::Imm(1));
    } else {
        b.load(Reg::RSI, u);
    }
    b.label("Exit");
    emit_access_measurement(&mut b, u, rdtscp);
    Ok(DecodedProgram::new(&b.build()?))
}

/// Runs the unguarded and guarded conditional. The guard always takes the
/// shape that defeats a forward-not-taken predictor; the architectural
/// outcome is chosen so the gadget sits on the side the profile's static
/// predictor speculates into.
pub fn guarded_conditional_demo(profile: &MicroArchProfile, sim: &SimOptions) -> Result<GuardOutcome, AttackError> {
    let equal = profile.static_forward == ForwardPrediction::NotTaken;
    let calibration = calibrate(profile, sim)?;
    let map = Arc::new(fixture_map());
    let leak = |guarded: bool| -> Result<bool, AttackError> {
        let prog = demo_program(equal, guarded, profile.has_rdtscp)?;
        let mut core = Core::new(profile, map.clone(), sim.core_options(guarded as u64));
        let r = core.run(&prog);
        match r.terminal {
            Terminal::Exited => Ok(calibration.is_cached(r.registers[14])),
            t => Err(AttackError::Terminated(t)),
        }
    };
    Ok(GuardOutcome { equal, unguarded_leak: leak(false)?, guarded_leak: leak(true)? })
}
