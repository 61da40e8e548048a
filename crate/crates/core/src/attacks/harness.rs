//! Code generation for forced speculation and timestamp measurement.

use serde::{Deserialize, Serialize};

use crate::isa::{AsmError, Cond, MacroOp, MemOperand, Program, ProgramBuilder, Reg, RegRef, Src};
use crate::uarch::{ForwardPrediction, MicroArchProfile};

pub const DEFAULT_IMUL_COUNT: usize = 2048;
/// Initial value of the multiplication chain register. Any power of three
/// whose exponent is odd leaves 3 in the low byte, so the chain always ends
/// with `cmp r9b, 3` setting ZF.
pub const CHAIN_SEED: u64 = 3;

/// Where the speculated body sits relative to the slow branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLayout {
    /// `je Exit` with the body on the fall-through side.
    FallThrough,
    /// `jne Body` with the body on the taken side, for forward-taken
    /// predictors.
    Taken,
}

impl BranchLayout {
    pub fn for_profile(profile: &MicroArchProfile, adapt: bool) -> BranchLayout {
        if adapt && profile.static_forward == ForwardPrediction::Taken {
            BranchLayout::Taken
        } else {
            BranchLayout::FallThrough
        }
    }
}

/// What the code after the speculation window measures. Results land in
/// r14.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurement {
    None,
    /// Access time of `[r11]` after the window.
    Access,
    /// Duration of the whole block, from before the chain to after the
    /// window.
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harness {
    pub imul_count: usize,
    pub layout: BranchLayout,
    pub measurement: Measurement,
    /// Whether the closing timestamp uses `rdtscp`; otherwise `cpuid; rdtsc`.
    pub rdtscp: bool,
    /// Lines flushed before the window starts.
    pub flush: Vec<MemOperand>,
}

impl Harness {
    pub fn new(profile: &MicroArchProfile, imul_count: usize, adapt: bool) -> Harness {
        Harness {
            imul_count,
            layout: BranchLayout::for_profile(profile, adapt),
            measurement: Measurement::Access,
            rdtscp: profile.has_rdtscp,
            flush: vec![MemOperand::reg(Reg::R11)],
        }
    }

    pub fn measuring(mut self, m: Measurement) -> Harness {
        self.measurement = m;
        self
    }
}

fn full(r: Reg) -> RegRef {
    RegRef::full(r)
}

/// Emits `cpuid; rdtsc; mov r13, rax; mov rax, [mem]; rdtscp; mov r14, rax;
/// cpuid; sub r14, r13`, or the `cpuid; rdtsc` fallback for the closing
/// timestamp.
pub fn emit_access_measurement(b: &mut ProgramBuilder, mem: MemOperand, rdtscp: bool) {
    b.op(MacroOp::Cpuid).op(MacroOp::Rdtsc).mov(Reg::R13, Src::Reg(full(Reg::RAX))).load(Reg::RAX, mem);
    emit_closing_timestamp(b, rdtscp);
}

fn emit_closing_timestamp(b: &mut ProgramBuilder, rdtscp: bool) {
    if rdtscp {
        b.op(MacroOp::Rdtscp);
    } else {
        b.op(MacroOp::Cpuid).op(MacroOp::Rdtsc);
    }
    b.mov(Reg::R14, Src::Reg(full(Reg::RAX)))
        .op(MacroOp::Cpuid)
        .op(MacroOp::Sub { dst: full(Reg::R14), src: Src::Reg(full(Reg::R13)) });
}

/// Emits one speculation window: flushes, the multiplication chain, the
/// slow branch and `body` on the speculated side. Labels get `tag` appended
/// so several windows can share a program. `body` receives the exit label;
/// a jump to it is appended after the body. Returns the exit label, which
/// the caller must define.
pub fn emit_window(
    b: &mut ProgramBuilder,
    h: &Harness,
    tag: &str,
    body: impl FnOnce(&mut ProgramBuilder, &str),
) -> String {
    let exit = format!("Exit{tag}");
    for m in &h.flush {
        b.clflush(*m);
    }
    b.op(MacroOp::Cpuid);
    if h.measurement == Measurement::Block {
        b.op(MacroOp::Rdtsc).mov(Reg::R13, Src::Reg(full(Reg::RAX)));
    }
    b.mov(Reg::R9, Src::Imm(CHAIN_SEED as i64));
    for _ in 0..h.imul_count {
        b.imul(Reg::R9, 3);
    }
    b.op(MacroOp::Cmp { lhs: RegRef::byte(Reg::R9), rhs: Src::Imm(CHAIN_SEED as i64) });
    match h.layout {
        BranchLayout::FallThrough => {
            b.jcc(Cond::Zero, &exit);
            body(b, &exit);
            b.jmp(&exit);
        }
        BranchLayout::Taken => {
            let start = format!("Body{tag}");
            b.jcc(Cond::NotZero, &start).jmp(&exit).label(&start);
            body(b, &exit);
            b.jmp(&exit);
        }
    }
    exit
}

/// A complete single-window program: window, then the measurement.
pub fn build_speculation_harness(h: &Harness, body: impl FnOnce(&mut ProgramBuilder, &str)) -> Result<Program, AsmError> {
    let mut b = ProgramBuilder::new();
    b.init(Reg::R9, CHAIN_SEED);
    let exit = emit_window(&mut b, h, "", body);
    b.label(&exit);
    match h.measurement {
        Measurement::None => {}
        Measurement::Access => emit_access_measurement(&mut b, MemOperand::reg(Reg::R11), h.rdtscp),
        Measurement::Block => emit_closing_timestamp(&mut b, h.rdtscp),
    }
    b.build()
}

/// Emits a conditional branch on ZF whose statically predicted side is
/// `cold` and whose other side is `hot`, given the profile's forward
/// prediction. The hot side runs only once the condition resolves as "zero".
///
/// With a forward-not-taken predictor this is `jz Hot; <cold>; Hot: <hot>`,
/// otherwise `jnz Cold; <hot>; Cold: <cold>`.
pub fn emit_zero_split(
    b: &mut ProgramBuilder,
    layout: BranchLayout,
    tag: &str,
    exit: &str,
    hot: impl FnOnce(&mut ProgramBuilder),
    cold: impl FnOnce(&mut ProgramBuilder),
) {
    match layout {
        BranchLayout::FallThrough => {
            let hot_label = format!("C2True{tag}");
            b.jcc(Cond::Zero, &hot_label);
            cold(b);
            b.jmp(exit).label(&hot_label);
            hot(b);
        }
        BranchLayout::Taken => {
            let cold_label = format!("C2False{tag}");
            b.jcc(Cond::NotZero, &cold_label);
            hot(b);
            b.jmp(exit).label(&cold_label);
            cold(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{assemble, render};
    use crate::uarch::builtin_profile;

    #[test]
    fn harness_round_trips_through_text() {
        let p = builtin_profile("haswell").unwrap();
        let h = Harness::new(&p, 16, true);
        let prog = build_speculation_harness(&h, |b, _| {
            b.load(Reg::RSI, MemOperand::reg(Reg::R11));
        })
        .unwrap();
        let again = assemble(&render(&prog)).unwrap();
        assert!(again.same_structure(&prog));
    }

    #[test]
    fn taken_layout_for_forward_taken_profiles() {
        let p = builtin_profile("nehalem").unwrap();
        assert_eq!(BranchLayout::for_profile(&p, true), BranchLayout::Taken);
        assert_eq!(BranchLayout::for_profile(&p, false), BranchLayout::FallThrough);
    }
}
