use std::sync::Arc;

use super::{Cond, MacroOp, MemOperand, Program, Reg, RegRef, Src, Width};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UopKind {
    Load,
    Store,
    AluMul,
    AluAddSub,
    AluLogic,
    BranchCond,
    BranchUncond,
    FlushLine,
    ReadTsc { serializing: bool },
    Serialize,
    Halt,
    Nop,
}

impl UopKind {
    pub const ALL: [UopKind; 13] = [
        UopKind::Load,
        UopKind::Store,
        UopKind::AluMul,
        UopKind::AluAddSub,
        UopKind::AluLogic,
        UopKind::BranchCond,
        UopKind::BranchUncond,
        UopKind::FlushLine,
        UopKind::ReadTsc { serializing: false },
        UopKind::ReadTsc { serializing: true },
        UopKind::Serialize,
        UopKind::Halt,
        UopKind::Nop,
    ];

    /// Dense index into [`UopKind::ALL`].
    pub fn index(self) -> usize {
        match self {
            UopKind::Load => 0,
            UopKind::Store => 1,
            UopKind::AluMul => 2,
            UopKind::AluAddSub => 3,
            UopKind::AluLogic => 4,
            UopKind::BranchCond => 5,
            UopKind::BranchUncond => 6,
            UopKind::FlushLine => 7,
            UopKind::ReadTsc { serializing: false } => 8,
            UopKind::ReadTsc { serializing: true } => 9,
            UopKind::Serialize => 10,
            UopKind::Halt => 11,
            UopKind::Nop => 12,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UopKind::Load => "load",
            UopKind::Store => "store",
            UopKind::AluMul => "alu_mul",
            UopKind::AluAddSub => "alu_addsub",
            UopKind::AluLogic => "alu_logic",
            UopKind::BranchCond => "branch_cond",
            UopKind::BranchUncond => "branch_uncond",
            UopKind::FlushLine => "flush_line",
            UopKind::ReadTsc { serializing: false } => "read_tsc",
            UopKind::ReadTsc { serializing: true } => "read_tscp",
            UopKind::Serialize => "serialize",
            UopKind::Halt => "halt",
            UopKind::Nop => "nop",
        }
    }

    pub fn from_name(name: &str) -> Option<UopKind> {
        UopKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Mul,
    Add,
    Sub,
    And,
    Mov,
}

impl AluOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Mov => b,
        }
    }
}

pub const MAX_SOURCES: usize = 4;

/// A decoded micro-op.
///
/// `a`/`b` are the ALU operands (for a store, `a` is the stored value),
/// `width` is the operation width used for flags and memory accesses.
/// Branch targets are macro-op indices from [`decode`] and micro-op indices
/// inside a [`DecodedProgram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroOp {
    pub kind: UopKind,
    pub alu: AluOp,
    pub dst: Option<RegRef>,
    pub a: Option<Src>,
    pub b: Option<Src>,
    pub mem: Option<MemOperand>,
    pub width: Width,
    pub writes_flags: bool,
    pub cond: Option<Cond>,
    pub target: Option<usize>,
    pub parent: usize,
    srcs: [Option<Reg>; MAX_SOURCES],
}

impl MicroOp {
    fn new(kind: UopKind, parent: usize) -> MicroOp {
        MicroOp {
            kind,
            alu: AluOp::Mov,
            dst: None,
            a: None,
            b: None,
            mem: None,
            width: Width::Qword,
            writes_flags: false,
            cond: None,
            target: None,
            parent,
            srcs: [None; MAX_SOURCES],
        }
    }

    fn finish(mut self) -> MicroOp {
        let mut list: Vec<Reg> = Vec::with_capacity(MAX_SOURCES);
        let mut add = |r: Reg| {
            if !list.contains(&r) {
                list.push(r);
            }
        };
        for s in [self.a, self.b].into_iter().flatten() {
            if let Src::Reg(r) = s {
                add(r.reg);
            }
        }
        if let Some(m) = self.mem {
            m.base.into_iter().chain(m.index).for_each(&mut add);
        }
        if let Some(d) = self.dst {
            if d.merges() {
                add(d.reg);
            }
        }
        if self.kind == UopKind::BranchCond {
            add(Reg::FLAGS);
        }
        for (slot, r) in self.srcs.iter_mut().zip(list) {
            *slot = Some(r);
        }
        self
    }

    /// Registers read by this micro-op, without duplicates.
    pub fn sources(&self) -> impl Iterator<Item = Reg> + '_ {
        self.srcs.iter().map_while(|r| *r)
    }

    pub fn source_count(&self) -> usize {
        self.sources().count()
    }

    /// Position of `reg` in [`MicroOp::sources`].
    pub fn source_slot(&self, reg: Reg) -> Option<usize> {
        self.srcs.iter().position(|r| *r == Some(reg))
    }

    fn operand(&self, src: Option<Src>, vals: &[u64]) -> u64 {
        match src {
            Some(Src::Imm(v)) => v as u64,
            Some(Src::Reg(r)) => r.read(vals[self.source_slot(r.reg).expect("operand register is a source")]),
            None => 0,
        }
    }

    fn reg_value(&self, reg: Reg, vals: &[u64]) -> u64 {
        self.source_slot(reg).map_or(0, |i| vals[i])
    }

    /// Effective address given source values in [`MicroOp::sources`] order.
    pub fn address(&self, vals: &[u64]) -> u64 {
        let m = self.mem.expect("memory micro-op");
        let mut addr = m.disp as u64;
        for r in m.base.into_iter().chain(m.index) {
            addr = addr.wrapping_add(self.reg_value(r, vals));
        }
        addr
    }

    /// ALU result as `(new destination register value, zero flag)`.
    pub fn compute(&self, vals: &[u64]) -> (u64, bool) {
        let a = self.operand(self.a, vals);
        let b = self.operand(self.b, vals);
        let raw = self.alu.apply(a, b);
        let zf = raw & self.width.mask() == 0;
        let value = match self.dst {
            Some(d) => d.write(self.reg_value(d.reg, vals), raw),
            None => 0,
        };
        (value, zf)
    }

    /// Value of the store operand, truncated to the access width.
    pub fn store_value(&self, vals: &[u64]) -> u64 {
        self.operand(self.a, vals) & self.width.mask()
    }

    /// New destination value for a load that read `loaded` from memory.
    pub fn load_result(&self, vals: &[u64], loaded: u64) -> u64 {
        let d = self.dst.expect("load has a destination");
        d.write(self.reg_value(d.reg, vals), loaded & self.width.mask())
    }

    /// Whether a conditional branch is taken given the flags register value.
    pub fn branch_taken(&self, vals: &[u64]) -> bool {
        match self.kind {
            UopKind::BranchCond => {
                let zf = self.reg_value(Reg::FLAGS, vals) != 0;
                self.cond.expect("conditional branch").holds(zf)
            }
            _ => true,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn alu(kind: UopKind, op: AluOp, dst: Option<RegRef>, a: Src, b: Src, width: Width, flags: bool, parent: usize) -> MicroOp {
    let mut u = MicroOp::new(kind, parent);
    u.alu = op;
    u.dst = dst;
    u.a = Some(a);
    u.b = Some(b);
    u.width = width;
    u.writes_flags = flags;
    u.finish()
}

fn load(dst: RegRef, mem: MemOperand, parent: usize) -> MicroOp {
    let mut u = MicroOp::new(UopKind::Load, parent);
    u.dst = Some(dst);
    u.mem = Some(mem);
    u.width = mem.width;
    u.finish()
}

fn store(mem: MemOperand, value: Src, parent: usize) -> MicroOp {
    let mut u = MicroOp::new(UopKind::Store, parent);
    u.mem = Some(mem);
    u.a = Some(value);
    u.width = mem.width;
    u.finish()
}

/// Decodes one macro-op located at index `parent`.
pub fn decode(op: &MacroOp, parent: usize) -> Vec<MicroOp> {
    use UopKind::*;
    let t0 = RegRef::full(Reg::temp(0));
    match *op {
        MacroOp::Imul { dst, imm } => {
            vec![alu(AluMul, AluOp::Mul, Some(dst), Src::Reg(dst), Src::Imm(imm), dst.view.width(), false, parent)]
        }
        MacroOp::Add { dst, src } => {
            vec![alu(AluAddSub, AluOp::Add, Some(dst), Src::Reg(dst), src, dst.view.width(), true, parent)]
        }
        MacroOp::Sub { dst, src } => {
            vec![alu(AluAddSub, AluOp::Sub, Some(dst), Src::Reg(dst), src, dst.view.width(), true, parent)]
        }
        MacroOp::AddMem { mem, imm } => vec![
            load(t0, mem, parent),
            alu(AluAddSub, AluOp::Add, Some(t0), Src::Reg(t0), Src::Imm(imm), mem.width, true, parent),
            store(mem, Src::Reg(t0), parent),
        ],
        MacroOp::Mov { dst, src } => {
            // no dependency on the old destination unless a byte view merges into it
            let mut u = MicroOp::new(AluLogic, parent);
            u.dst = Some(dst);
            u.b = Some(src);
            u.width = dst.view.width();
            vec![u.finish()]
        }
        MacroOp::Load { dst, mem } => vec![load(dst, mem, parent)],
        MacroOp::Store { mem, src } => vec![store(mem, src, parent)],
        MacroOp::Cmp { lhs, rhs } => {
            vec![alu(AluAddSub, AluOp::Sub, None, Src::Reg(lhs), rhs, lhs.view.width(), true, parent)]
        }
        MacroOp::CmpRegMem { lhs, mem } => vec![
            load(t0, mem, parent),
            alu(AluAddSub, AluOp::Sub, None, Src::Reg(lhs), Src::Reg(t0), lhs.view.width(), true, parent),
        ],
        MacroOp::CmpMemImm { mem, imm } => vec![
            load(t0, mem, parent),
            alu(AluAddSub, AluOp::Sub, None, Src::Reg(t0), Src::Imm(imm), mem.width, true, parent),
        ],
        MacroOp::Test { lhs, rhs } => {
            vec![alu(AluLogic, AluOp::And, None, Src::Reg(lhs), rhs, lhs.view.width(), true, parent)]
        }
        MacroOp::Jcc { cond, target } => {
            let mut u = MicroOp::new(BranchCond, parent);
            u.cond = Some(cond);
            u.target = Some(target);
            vec![u.finish()]
        }
        MacroOp::Jmp { target } => {
            let mut u = MicroOp::new(BranchUncond, parent);
            u.target = Some(target);
            vec![u.finish()]
        }
        MacroOp::Clflush { mem } => {
            let mut u = MicroOp::new(FlushLine, parent);
            u.mem = Some(mem);
            vec![u.finish()]
        }
        MacroOp::Rdtsc | MacroOp::Rdtscp => {
            let mut u = MicroOp::new(ReadTsc { serializing: *op == MacroOp::Rdtscp }, parent);
            u.dst = Some(RegRef::full(Reg::RAX));
            vec![u.finish()]
        }
        MacroOp::Cpuid => vec![MicroOp::new(Serialize, parent).finish()],
        MacroOp::Hlt => vec![MicroOp::new(Halt, parent).finish()],
        MacroOp::Nop => vec![MicroOp::new(Nop, parent).finish()],
    }
}

/// A whole program lowered to micro-ops, with branch targets rewritten to
/// micro-op indices. Cheap to clone and share between simulations.
#[derive(Debug, Clone)]
pub struct DecodedProgram {
    pub uops: Arc<[MicroOp]>,
    /// `macro_start[i]` is the first micro-op of macro-op `i`; the last
    /// element equals `uops.len()`.
    pub macro_start: Arc<[usize]>,
    pub entry: usize,
    pub init_regs: Vec<(Reg, u64)>,
    pub code_base: u64,
}

impl DecodedProgram {
    pub fn new(program: &Program) -> DecodedProgram {
        let mut uops = Vec::with_capacity(program.ops.len());
        let mut starts = Vec::with_capacity(program.ops.len() + 1);
        for (i, instr) in program.ops.iter().enumerate() {
            starts.push(uops.len());
            uops.extend(decode(&instr.op, i));
        }
        starts.push(uops.len());
        for u in &mut uops {
            if let Some(t) = u.target {
                u.target = Some(starts[t]);
            }
        }
        DecodedProgram {
            uops: uops.into(),
            entry: starts[program.entry.min(program.ops.len())],
            macro_start: starts.into(),
            init_regs: program.init_regs.iter().map(|(r, v)| (*r, *v)).collect(),
            code_base: program.code_base,
        }
    }

    pub fn len(&self) -> usize {
        self.uops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uops.is_empty()
    }

    /// Address the predictor uses for the micro-op at `index`.
    pub fn branch_address(&self, index: usize) -> u64 {
        self.code_base.wrapping_add(self.uops[index].parent as u64 * 4)
    }

    /// Same code with a different set of initial register values.
    pub fn with_init(&self, init_regs: Vec<(Reg, u64)>) -> DecodedProgram {
        DecodedProgram { init_regs, ..self.clone() }
    }

    /// Same code placed at another base address.
    pub fn with_code_base(&self, code_base: u64) -> DecodedProgram {
        DecodedProgram { code_base, ..self.clone() }
    }
}
