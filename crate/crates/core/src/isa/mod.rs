//! Simulated instruction set: registers, macro-ops, the textual assembly
//! format and the macro-op to micro-op decoder.

mod asm;
mod builder;
mod decode;
mod reg;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use asm::{assemble, render, AsmError};
pub use builder::ProgramBuilder;
pub use decode::{decode, AluOp, DecodedProgram, MicroOp, UopKind};
pub use reg::{Reg, RegRef, View, Width, NUM_GPRS, NUM_REGS, NUM_TEMPS};

/// `[base + index + disp]` with an access width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub disp: i64,
    pub width: Width,
}

impl MemOperand {
    pub fn reg(base: Reg) -> MemOperand {
        MemOperand { base: Some(base), index: None, disp: 0, width: Width::Qword }
    }

    pub fn absolute(addr: u64) -> MemOperand {
        MemOperand { base: None, index: None, disp: addr as i64, width: Width::Qword }
    }

    pub fn with_width(mut self, width: Width) -> MemOperand {
        self.width = width;
        self
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width {
            Width::Byte => f.write_str("BYTE PTR ")?,
            Width::Dword => f.write_str("DWORD PTR ")?,
            Width::Qword => f.write_str("QWORD PTR ")?,
        }
        f.write_str("[")?;
        let mut first = true;
        for r in [self.base, self.index].into_iter().flatten() {
            if !first {
                f.write_str(" + ")?;
            }
            write!(f, "{r}")?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp as u64)?;
        } else if self.disp > 0 {
            write!(f, " + {:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, " - {:#x}", self.disp.unsigned_abs())?;
        }
        f.write_str("]")
    }
}

/// Register or immediate source operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Reg(RegRef),
    Imm(i64),
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Reg(r) => write!(f, "{r}"),
            Src::Imm(v) if *v < 0 => write!(f, "-{:#x}", v.unsigned_abs()),
            Src::Imm(v) => write!(f, "{v:#x}"),
        }
    }
}

/// Branch condition. Only the zero flag is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    /// `je` / `jz`
    Zero,
    /// `jne` / `jnz`
    NotZero,
}

impl Cond {
    pub fn holds(self, zf: bool) -> bool {
        match self {
            Cond::Zero => zf,
            Cond::NotZero => !zf,
        }
    }

    pub fn inverse(self) -> Cond {
        match self {
            Cond::Zero => Cond::NotZero,
            Cond::NotZero => Cond::Zero,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Zero => "je",
            Cond::NotZero => "jne",
        }
    }
}

/// A programmer-visible instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacroOp {
    /// `imul reg, imm`
    Imul { dst: RegRef, imm: i64 },
    /// `add reg, reg|imm`
    Add { dst: RegRef, src: Src },
    /// `sub reg, reg|imm`
    Sub { dst: RegRef, src: Src },
    /// `add [mem], imm` (read-modify-write)
    AddMem { mem: MemOperand, imm: i64 },
    /// `mov reg, reg|imm`
    Mov { dst: RegRef, src: Src },
    /// `mov reg, [mem]`
    Load { dst: RegRef, mem: MemOperand },
    /// `mov [mem], reg|imm`
    Store { mem: MemOperand, src: Src },
    /// `cmp reg, reg|imm`
    Cmp { lhs: RegRef, rhs: Src },
    /// `cmp reg, [mem]`
    CmpRegMem { lhs: RegRef, mem: MemOperand },
    /// `cmp [mem], imm`
    CmpMemImm { mem: MemOperand, imm: i64 },
    /// `test reg, reg|imm`
    Test { lhs: RegRef, rhs: Src },
    Jcc { cond: Cond, target: usize },
    Jmp { target: usize },
    Clflush { mem: MemOperand },
    Rdtsc,
    Rdtscp,
    Cpuid,
    Hlt,
    Nop,
}

impl MacroOp {
    pub fn branch_target(&self) -> Option<usize> {
        match self {
            MacroOp::Jcc { target, .. } | MacroOp::Jmp { target } => Some(*target),
            _ => None,
        }
    }

    fn registers(&self) -> Vec<Reg> {
        let mut regs = Vec::new();
        let mem = |m: &MemOperand, regs: &mut Vec<Reg>| {
            regs.extend(m.base);
            regs.extend(m.index);
        };
        let src = |s: &Src, regs: &mut Vec<Reg>| {
            if let Src::Reg(r) = s {
                regs.push(r.reg);
            }
        };
        match self {
            MacroOp::Imul { dst, .. } => regs.push(dst.reg),
            MacroOp::Add { dst, src: s } | MacroOp::Sub { dst, src: s } | MacroOp::Mov { dst, src: s } => {
                regs.push(dst.reg);
                src(s, &mut regs);
            }
            MacroOp::Cmp { lhs, rhs } | MacroOp::Test { lhs, rhs } => {
                regs.push(lhs.reg);
                src(rhs, &mut regs);
            }
            MacroOp::AddMem { mem: m, .. } | MacroOp::CmpMemImm { mem: m, .. } | MacroOp::Clflush { mem: m } => {
                mem(m, &mut regs)
            }
            MacroOp::Load { dst, mem: m } => {
                regs.push(dst.reg);
                mem(m, &mut regs);
            }
            MacroOp::CmpRegMem { lhs, mem: m } => {
                regs.push(lhs.reg);
                mem(m, &mut regs);
            }
            MacroOp::Store { mem: m, src: s } => {
                mem(m, &mut regs);
                src(s, &mut regs);
            }
            _ => {}
        }
        regs
    }
}

/// A macro-op together with the source line it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    pub op: MacroOp,
    pub line: usize,
}

/// An assembled program.
///
/// Branch targets are instruction indices. A target equal to `ops.len()`
/// denotes the end of the program (a trailing `Exit:` label).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    pub ops: Vec<Instr>,
    pub labels: BTreeMap<String, usize>,
    pub entry: usize,
    pub init_regs: BTreeMap<Reg, u64>,
    /// Virtual address of instruction 0. Branch predictor state is keyed by
    /// `code_base + index`.
    pub code_base: u64,
}

/// Structural problems in a [`Program`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("entry point {0} out of bounds")]
    EntryOutOfBounds(usize),
    #[error("instruction {index}: branch target {target} out of bounds")]
    TargetOutOfBounds { index: usize, target: usize },
    #[error("label {0:?} points past the end of the program")]
    LabelOutOfBounds(String),
    #[error("instruction {index}: register {reg} is not a general-purpose register")]
    UndeclaredRegister { index: usize, reg: Reg },
}

impl Program {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let n = self.ops.len();
        if self.entry > n {
            return Err(ProgramError::EntryOutOfBounds(self.entry));
        }
        for (index, instr) in self.ops.iter().enumerate() {
            if let Some(target) = instr.op.branch_target() {
                if target > n {
                    return Err(ProgramError::TargetOutOfBounds { index, target });
                }
            }
            if let Some(&reg) = instr.op.registers().iter().find(|r| !r.is_gpr()) {
                return Err(ProgramError::UndeclaredRegister { index, reg });
            }
        }
        if let Some((name, _)) = self.labels.iter().find(|(_, &i)| i > n) {
            return Err(ProgramError::LabelOutOfBounds(name.clone()));
        }
        Ok(())
    }

    /// Equality ignoring source line numbers.
    pub fn same_structure(&self, other: &Program) -> bool {
        self.entry == other.entry
            && self.init_regs == other.init_regs
            && self.labels == other.labels
            && self.ops.len() == other.ops.len()
            && self.ops.iter().zip(&other.ops).all(|(a, b)| a.op == b.op)
    }

    /// Virtual address of instruction `index`.
    pub fn address_of(&self, index: usize) -> u64 {
        self.code_base.wrapping_add(index as u64 * 4)
    }
}
