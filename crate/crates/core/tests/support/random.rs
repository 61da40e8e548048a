//! Random terminating programs for differential testing against the
//! reference interpreter. Branches only jump forward, so every program ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specsim::attacks::fixture::{FEEDBACK, KERNEL_MAPPED, KERNEL_UNMAPPED, RESULTS, USER_DATA};
use specsim::isa::{Cond, MacroOp, MemOperand, Program, ProgramBuilder, Reg, RegRef, Src, Width};

const DATA_REGS: [Reg; 5] = [Reg::RAX, Reg::RBX, Reg::RCX, Reg::RDX, Reg::RSI];

struct Gen {
    rng: ChaCha8Rng,
    b: ProgramBuilder,
    labels: usize,
}

impl Gen {
    fn reg(&mut self) -> Reg {
        DATA_REGS[self.rng.gen_range(0..DATA_REGS.len())]
    }

    fn regref(&mut self) -> RegRef {
        let r = self.reg();
        if self.rng.gen_bool(0.2) {
            RegRef::byte(r)
        } else {
            RegRef::full(r)
        }
    }

    fn src(&mut self) -> Src {
        if self.rng.gen_bool(0.5) {
            Src::Imm(self.rng.gen_range(-300..300))
        } else {
            Src::Reg(self.regref())
        }
    }

    fn width(&mut self) -> Width {
        [Width::Byte, Width::Dword, Width::Qword][self.rng.gen_range(0..3)]
    }

    fn user_mem(&mut self) -> MemOperand {
        let base = if self.rng.gen_bool(0.5) { USER_DATA } else { FEEDBACK };
        MemOperand::absolute(base + self.rng.gen_range(0..0x2000)).with_width(self.width())
    }

    fn result_mem(&mut self) -> MemOperand {
        MemOperand::absolute(RESULTS + self.rng.gen_range(0..0x800)).with_width(self.width())
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!("L{}", self.labels)
    }

    /// One instruction that never faults architecturally.
    fn simple(&mut self) {
        let op = match self.rng.gen_range(0..12) {
            0 => MacroOp::Add { dst: self.regref(), src: self.src() },
            1 => MacroOp::Sub { dst: self.regref(), src: self.src() },
            2 => MacroOp::Mov { dst: self.regref(), src: self.src() },
            3 => MacroOp::Imul { dst: RegRef::full(self.reg()), imm: self.rng.gen_range(-9..9) },
            4 | 5 => MacroOp::Load { dst: RegRef::full(self.reg()), mem: self.user_mem() },
            6 => MacroOp::Store { mem: self.result_mem(), src: self.src() },
            7 => MacroOp::AddMem { mem: self.result_mem(), imm: self.rng.gen_range(-5..5) },
            8 => MacroOp::Cmp { lhs: self.regref(), rhs: self.src() },
            9 => MacroOp::CmpRegMem { lhs: self.regref(), mem: self.user_mem() },
            10 => MacroOp::Test { lhs: self.regref(), rhs: self.src() },
            _ => MacroOp::Clflush { mem: self.user_mem() },
        };
        self.b.op(op);
    }

    /// Any instruction, including ones that fault if they commit.
    fn wild(&mut self) {
        match self.rng.gen_range(0..8) {
            0 => {
                let k = if self.rng.gen_bool(0.5) { KERNEL_MAPPED } else { KERNEL_UNMAPPED };
                let (r, off) = (self.reg(), self.rng.gen_range(0..4096));
                self.b.load(r, MemOperand::absolute(k + off));
            }
            1 => {
                self.b.op(MacroOp::Hlt);
            }
            2 => {
                let r = self.reg();
                self.b.store(MemOperand::absolute(KERNEL_MAPPED), Src::Reg(RegRef::full(r)));
            }
            _ => self.simple(),
        }
    }

    fn forward_branch(&mut self) {
        let l = self.label();
        let cond = if self.rng.gen_bool(0.5) { Cond::Zero } else { Cond::NotZero };
        let cmp = MacroOp::Cmp { lhs: self.regref(), rhs: self.src() };
        self.b.op(cmp);
        self.b.jcc(cond, &l);
        for _ in 0..self.rng.gen_range(1..6) {
            self.simple();
        }
        self.b.label(&l);
    }

    /// A slow comparison followed by a body that may or may not run
    /// architecturally; when it does not, it runs speculatively.
    fn window(&mut self) {
        let l = self.label();
        let n = self.rng.gen_range(0..300);
        self.b.mov(Reg::R9, Src::Imm(3));
        for _ in 0..n {
            self.b.imul(Reg::R9, 3);
        }
        self.b.op(MacroOp::Cmp { lhs: RegRef::byte(Reg::R9), rhs: Src::Imm(3) });
        // 3^(n+1) ends in 3 exactly when n is a multiple of 64
        let skips = n % 64 == 0;
        self.b.jcc(Cond::Zero, &l);
        for _ in 0..self.rng.gen_range(1..12) {
            if skips {
                self.wild();
            } else {
                self.simple();
            }
        }
        self.b.label(&l);
    }
}

/// A random program that exits normally in the reference interpreter.
pub fn random_program(seed: u64) -> Program {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), b: ProgramBuilder::new(), labels: 0 };
    for r in DATA_REGS {
        let v = g.rng.gen_range(0..1000);
        g.b.init(r, v);
    }
    for _ in 0..g.rng.gen_range(10..40) {
        match g.rng.gen_range(0..10) {
            0 | 1 => g.window(),
            2 | 3 => g.forward_branch(),
            4 => {
                g.b.op(MacroOp::Cpuid);
            }
            5 => {
                // keep timestamps out of data and control flow
                g.b.op(MacroOp::Rdtsc).mov(Reg::R13, Src::Reg(RegRef::full(Reg::RAX))).mov(Reg::RAX, Src::Imm(7));
            }
            _ => g.simple(),
        }
    }
    g.b.build().expect("generated program is well formed")
}
