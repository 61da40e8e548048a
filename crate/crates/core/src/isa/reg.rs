use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of general-purpose registers.
pub const NUM_GPRS: usize = 16;
/// Number of decoder temporaries.
pub const NUM_TEMPS: usize = 8;
/// Size of the full register namespace: GPRs, the flags register, temporaries.
pub const NUM_REGS: usize = NUM_GPRS + 1 + NUM_TEMPS;

const GPR_NAMES: [&str; NUM_GPRS] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15",
];
const DWORD_NAMES: [&str; NUM_GPRS] = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d",
    "r13d", "r14d", "r15d",
];
const BYTE_NAMES: [&str; NUM_GPRS] = [
    "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b",
    "r13b", "r14b", "r15b",
];

/// A register id. `0..16` are the GPRs, `16` is the flags register and the
/// remaining ids are decoder temporaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const RAX: Reg = Reg(0);
    pub const RCX: Reg = Reg(1);
    pub const RDX: Reg = Reg(2);
    pub const RBX: Reg = Reg(3);
    pub const RSI: Reg = Reg(6);
    pub const R9: Reg = Reg(9);
    pub const R10: Reg = Reg(10);
    pub const R11: Reg = Reg(11);
    pub const R12: Reg = Reg(12);
    pub const R13: Reg = Reg(13);
    pub const R14: Reg = Reg(14);
    pub const R15: Reg = Reg(15);
    pub const FLAGS: Reg = Reg(NUM_GPRS as u8);

    pub fn gpr(n: usize) -> Reg {
        assert!(n < NUM_GPRS, "gpr index {n} out of range");
        Reg(n as u8)
    }

    pub fn temp(n: usize) -> Reg {
        assert!(n < NUM_TEMPS, "temporary index {n} out of range");
        Reg((NUM_GPRS + 1 + n) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_gpr(self) -> bool {
        (self.0 as usize) < NUM_GPRS
    }

    pub fn is_temp(self) -> bool {
        (self.0 as usize) > NUM_GPRS
    }

    pub fn name(self) -> String {
        let i = self.0 as usize;
        if i < NUM_GPRS {
            GPR_NAMES[i].to_string()
        } else if i == NUM_GPRS {
            "flags".to_string()
        } else {
            format!("t{}", i - NUM_GPRS - 1)
        }
    }

    /// Parses a 64-bit register name (`rax`, `r9`, or the numeric form `r0`..`r15`).
    pub fn parse(name: &str) -> Option<Reg> {
        RegRef::parse(name).filter(|r| r.view == View::Full).map(|r| r.reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Which slice of a register an operand reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Full,
    /// Low 32 bits. Writes zero-extend.
    Dword,
    /// Low 8 bits. Writes merge into the parent register.
    Byte,
}

impl View {
    pub fn mask(self) -> u64 {
        match self {
            View::Full => u64::MAX,
            View::Dword => 0xffff_ffff,
            View::Byte => 0xff,
        }
    }

    pub fn width(self) -> Width {
        match self {
            View::Full => Width::Qword,
            View::Dword => Width::Dword,
            View::Byte => Width::Byte,
        }
    }
}

/// A register operand: a register plus the view through which it is accessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegRef {
    pub reg: Reg,
    pub view: View,
}

impl RegRef {
    pub fn full(reg: Reg) -> RegRef {
        RegRef { reg, view: View::Full }
    }

    pub fn byte(reg: Reg) -> RegRef {
        RegRef { reg, view: View::Byte }
    }

    pub fn read(self, value: u64) -> u64 {
        value & self.view.mask()
    }

    /// Applies a write of `value` through this view to a register currently
    /// holding `old`.
    pub fn write(self, old: u64, value: u64) -> u64 {
        match self.view {
            View::Full => value,
            View::Dword => value & 0xffff_ffff,
            View::Byte => (old & !0xff) | (value & 0xff),
        }
    }

    /// Whether a write through this view needs the old register value.
    pub fn merges(self) -> bool {
        self.view == View::Byte
    }

    pub fn parse(name: &str) -> Option<RegRef> {
        let lower = name.to_ascii_lowercase();
        let find = |table: &[&str; NUM_GPRS]| table.iter().position(|n| *n == lower);
        if let Some(i) = find(&GPR_NAMES) {
            return Some(RegRef { reg: Reg(i as u8), view: View::Full });
        }
        if let Some(i) = find(&DWORD_NAMES) {
            return Some(RegRef { reg: Reg(i as u8), view: View::Dword });
        }
        if let Some(i) = find(&BYTE_NAMES) {
            return Some(RegRef { reg: Reg(i as u8), view: View::Byte });
        }
        // r0..r7 numeric aliases for the legacy registers
        let rest = lower.strip_prefix('r')?;
        let (digits, view) = if let Some(d) = rest.strip_suffix('b') {
            (d, View::Byte)
        } else if let Some(d) = rest.strip_suffix('d') {
            (d, View::Dword)
        } else {
            (rest, View::Full)
        };
        let n: usize = digits.parse().ok()?;
        (n < NUM_GPRS).then_some(RegRef { reg: Reg(n as u8), view })
    }
}

impl fmt::Display for RegRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.reg.index();
        if i >= NUM_GPRS {
            return write!(f, "{}", self.reg);
        }
        let name = match self.view {
            View::Full => GPR_NAMES[i],
            View::Dword => DWORD_NAMES[i],
            View::Byte => BYTE_NAMES[i],
        };
        f.write_str(name)
    }
}

/// Memory access width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Dword,
    Qword,
}

impl Width {
    pub fn bytes(self) -> usize {
        match self {
            Width::Byte => 1,
            Width::Dword => 4,
            Width::Qword => 8,
        }
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::Byte => 0xff,
            Width::Dword => 0xffff_ffff,
            Width::Qword => u64::MAX,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_resolve_to_same_register() {
        assert_eq!(Reg::parse("rax"), Some(Reg::RAX));
        assert_eq!(Reg::parse("r0"), Some(Reg::RAX));
        assert_eq!(Reg::parse("r9"), Some(Reg::R9));
        assert_eq!(RegRef::parse("r9b"), Some(RegRef::byte(Reg::R9)));
        assert_eq!(RegRef::parse("eax").unwrap().view, View::Dword);
        assert_eq!(RegRef::parse("r16"), None);
        assert_eq!(RegRef::parse("xmm0"), None);
    }

    #[test]
    fn byte_write_keeps_upper_bits() {
        let r = RegRef::byte(Reg::R10);
        assert_eq!(r.write(0x1122_3344_5566_7788, 0xab), 0x1122_3344_5566_77ab);
        let d = RegRef::parse("r10d").unwrap();
        assert_eq!(d.write(0xffff_ffff_0000_0000, 0x1_2345_6789), 0x2345_6789);
    }
}
