//! In-order reference interpreter. Executes macro-ops one at a time with no
//! speculation; timestamp reads produce tainted values that are excluded
//! from comparisons.

use std::collections::{BTreeMap, BTreeSet};

use specsim::isa::{Cond, MacroOp, MemOperand, Program, RegRef, Src, Width};
use specsim::memory::{FaultKind, MemoryMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Exited,
    SegFault { addr: u64, fault: FaultKind },
    StepLimit,
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub regs: [u64; 16],
    /// Registers whose value depends on a timestamp read.
    pub tainted: [bool; 16],
    pub writes: BTreeMap<u64, u8>,
    pub tainted_bytes: BTreeSet<u64>,
    pub cache: BTreeSet<u64>,
    pub outcome: Outcome,
}

fn line(addr: u64) -> u64 {
    addr & !63
}

struct Machine<'a> {
    map: &'a MemoryMap,
    regs: [u64; 16],
    tainted: [bool; 16],
    zf: bool,
    zf_tainted: bool,
    writes: BTreeMap<u64, u8>,
    tainted_bytes: BTreeSet<u64>,
    cache: BTreeSet<u64>,
    tsc: u64,
}

impl Machine<'_> {
    fn read_reg(&self, r: RegRef) -> (u64, bool) {
        let i = r.reg.index();
        (r.read(self.regs[i]), self.tainted[i])
    }

    fn write_reg(&mut self, r: RegRef, v: u64, taint: bool) {
        let i = r.reg.index();
        self.regs[i] = r.write(self.regs[i], v);
        self.tainted[i] = taint || (r.merges() && self.tainted[i]);
    }

    fn src(&self, s: Src) -> (u64, bool) {
        match s {
            Src::Imm(v) => (v as u64, false),
            Src::Reg(r) => self.read_reg(r),
        }
    }

    fn addr(&self, m: &MemOperand) -> (u64, bool) {
        let mut a = m.disp as u64;
        let mut t = false;
        for r in [m.base, m.index].into_iter().flatten() {
            a = a.wrapping_add(self.regs[r.index()]);
            t |= self.tainted[r.index()];
        }
        (a, t)
    }

    fn check(&self, addr: u64) -> Result<(), Outcome> {
        match self.map.lookup(addr) {
            None => Err(Outcome::SegFault { addr, fault: FaultKind::NotMapped }),
            Some((_, e)) if e.kernel => Err(Outcome::SegFault { addr, fault: FaultKind::Protection }),
            Some(_) => Ok(()),
        }
    }

    fn load(&mut self, m: &MemOperand) -> Result<(u64, bool), Outcome> {
        let (a, t) = self.addr(m);
        assert!(!t, "reference interpreter cannot follow timestamp-dependent addresses");
        self.check(a)?;
        let mut v = 0u64;
        let mut taint = false;
        for i in 0..m.width.bytes() as u64 {
            let b = a.wrapping_add(i);
            let byte = match self.writes.get(&b) {
                Some(x) => *x,
                None => self.map.byte(b).unwrap_or(0),
            };
            taint |= self.tainted_bytes.contains(&b);
            v |= (byte as u64) << (8 * i);
        }
        self.cache.insert(line(a));
        Ok((v, taint))
    }

    fn store(&mut self, m: &MemOperand, v: u64, taint: bool) -> Result<(), Outcome> {
        let (a, t) = self.addr(m);
        assert!(!t, "reference interpreter cannot follow timestamp-dependent addresses");
        self.check(a)?;
        for i in 0..m.width.bytes() as u64 {
            let b = a.wrapping_add(i);
            self.writes.insert(b, (v >> (8 * i)) as u8);
            if taint {
                self.tainted_bytes.insert(b);
            } else {
                self.tainted_bytes.remove(&b);
            }
        }
        self.cache.insert(line(a));
        Ok(())
    }

    fn flags(&mut self, v: u64, width: Width, taint: bool) {
        self.zf = v & width.mask() == 0;
        self.zf_tainted = taint;
    }
}

/// Runs `program` in order for at most `max_steps` instructions.
pub fn interpret(program: &Program, map: &MemoryMap, max_steps: usize) -> Reference {
    let mut m = Machine {
        map,
        regs: [0; 16],
        tainted: [false; 16],
        zf: false,
        zf_tainted: false,
        writes: BTreeMap::new(),
        tainted_bytes: BTreeSet::new(),
        cache: BTreeSet::new(),
        tsc: 0,
    };
    for (r, v) in &program.init_regs {
        m.regs[r.index()] = *v;
    }
    let mut pc = program.entry;
    let mut outcome = Outcome::StepLimit;
    for _ in 0..max_steps {
        if pc >= program.len() {
            outcome = Outcome::Exited;
            break;
        }
        let mut next = pc + 1;
        let step: Result<(), Outcome> = (|| {
            match program.ops[pc].op {
                MacroOp::Imul { dst, imm } => {
                    let (v, t) = m.read_reg(dst);
                    m.write_reg(dst, v.wrapping_mul(imm as u64), t);
                }
                MacroOp::Add { dst, src } | MacroOp::Sub { dst, src } => {
                    let (a, ta) = m.read_reg(dst);
                    let (b, tb) = m.src(src);
                    let v = match program.ops[pc].op {
                        MacroOp::Add { .. } => a.wrapping_add(b),
                        _ => a.wrapping_sub(b),
                    };
                    m.write_reg(dst, v, ta || tb);
                    m.flags(v, dst.view.width(), ta || tb);
                }
                MacroOp::AddMem { mem, imm } => {
                    let (v, t) = m.load(&mem)?;
                    let r = v.wrapping_add(imm as u64) & mem.width.mask();
                    m.store(&mem, r, t)?;
                    m.flags(r, mem.width, t);
                }
                MacroOp::Mov { dst, src } => {
                    let (v, t) = m.src(src);
                    m.write_reg(dst, v, t);
                }
                MacroOp::Load { dst, mem } => {
                    let (v, t) = m.load(&mem)?;
                    m.write_reg(dst, v, t);
                }
                MacroOp::Store { mem, src } => {
                    let (v, t) = m.src(src);
                    m.store(&mem, v & mem.width.mask(), t)?;
                }
                MacroOp::Cmp { lhs, rhs } => {
                    let (a, ta) = m.read_reg(lhs);
                    let (b, tb) = m.src(rhs);
                    m.flags(a.wrapping_sub(b), lhs.view.width(), ta || tb);
                }
                MacroOp::CmpRegMem { lhs, mem } => {
                    let (b, tb) = m.load(&mem)?;
                    let (a, ta) = m.read_reg(lhs);
                    m.flags(a.wrapping_sub(b), lhs.view.width(), ta || tb);
                }
                MacroOp::CmpMemImm { mem, imm } => {
                    let (a, t) = m.load(&mem)?;
                    m.flags(a.wrapping_sub(imm as u64), mem.width, t);
                }
                MacroOp::Test { lhs, rhs } => {
                    let (a, ta) = m.read_reg(lhs);
                    let (b, tb) = m.src(rhs);
                    m.flags(a & b, lhs.view.width(), ta || tb);
                }
                MacroOp::Jcc { cond, target } => {
                    assert!(!m.zf_tainted, "reference interpreter cannot follow timestamp-dependent branches");
                    let taken = match cond {
                        Cond::Zero => m.zf,
                        Cond::NotZero => !m.zf,
                    };
                    if taken {
                        next = target;
                    }
                }
                MacroOp::Jmp { target } => next = target,
                MacroOp::Clflush { mem } => {
                    let (a, _) = m.addr(&mem);
                    m.cache.remove(&line(a));
                }
                MacroOp::Rdtsc | MacroOp::Rdtscp => {
                    m.tsc += 1;
                    m.regs[0] = m.tsc;
                    m.tainted[0] = true;
                }
                MacroOp::Hlt => return Err(Outcome::Exited),
                MacroOp::Cpuid | MacroOp::Nop => {}
            }
            Ok(())
        })();
        if let Err(o) = step {
            outcome = o;
            break;
        }
        pc = next;
    }
    Reference {
        regs: m.regs,
        tainted: m.tainted,
        writes: m.writes,
        tainted_bytes: m.tainted_bytes,
        cache: m.cache,
        outcome,
    }
}
