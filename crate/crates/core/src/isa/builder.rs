use std::collections::BTreeMap;

use super::{AsmError, Cond, Instr, MacroOp, MemOperand, Program, Reg, RegRef, Src};

enum Slot {
    Op(MacroOp),
    Jump(Option<Cond>, String),
}

/// Builds a [`Program`] directly, with symbolic labels resolved at
/// [`ProgramBuilder::build`]. Faster than rendering text and assembling it.
#[derive(Default)]
pub struct ProgramBuilder {
    slots: Vec<Slot>,
    labels: BTreeMap<String, usize>,
    duplicate: Option<String>,
    init_regs: BTreeMap<Reg, u64>,
    code_base: u64,
}

impl ProgramBuilder {
    pub fn new() -> ProgramBuilder {
        ProgramBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn init(&mut self, reg: Reg, value: u64) -> &mut Self {
        self.init_regs.insert(reg, value);
        self
    }

    pub fn code_base(&mut self, base: u64) -> &mut Self {
        self.code_base = base;
        self
    }

    /// Defines `name` at the next instruction.
    pub fn label(&mut self, name: &str) -> &mut Self {
        if self.labels.insert(name.to_string(), self.slots.len()).is_some() && self.duplicate.is_none() {
            self.duplicate = Some(name.to_string());
        }
        self
    }

    pub fn op(&mut self, op: MacroOp) -> &mut Self {
        self.slots.push(Slot::Op(op));
        self
    }

    pub fn ops(&mut self, ops: impl IntoIterator<Item = MacroOp>) -> &mut Self {
        self.slots.extend(ops.into_iter().map(Slot::Op));
        self
    }

    pub fn jcc(&mut self, cond: Cond, label: &str) -> &mut Self {
        self.slots.push(Slot::Jump(Some(cond), label.to_string()));
        self
    }

    pub fn jmp(&mut self, label: &str) -> &mut Self {
        self.slots.push(Slot::Jump(None, label.to_string()));
        self
    }

    pub fn imul(&mut self, reg: Reg, imm: i64) -> &mut Self {
        self.op(MacroOp::Imul { dst: RegRef::full(reg), imm })
    }

    pub fn mov(&mut self, dst: Reg, src: Src) -> &mut Self {
        self.op(MacroOp::Mov { dst: RegRef::full(dst), src })
    }

    pub fn load(&mut self, dst: Reg, mem: MemOperand) -> &mut Self {
        self.op(MacroOp::Load { dst: RegRef::full(dst), mem })
    }

    pub fn store(&mut self, mem: MemOperand, src: Src) -> &mut Self {
        self.op(MacroOp::Store { mem, src })
    }

    pub fn clflush(&mut self, mem: MemOperand) -> &mut Self {
        self.op(MacroOp::Clflush { mem })
    }

    pub fn nops(&mut self, n: usize) -> &mut Self {
        self.ops(std::iter::repeat_n(MacroOp::Nop, n))
    }

    /// Resolves labels. Jumps to a label defined after the last instruction
    /// target the end of the program.
    pub fn build(&self) -> Result<Program, AsmError> {
        if let Some(label) = &self.duplicate {
            return Err(AsmError::DuplicateLabel { line: 0, label: label.clone() });
        }
        let mut ops = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter().enumerate() {
            let op = match slot {
                Slot::Op(op) => *op,
                Slot::Jump(cond, label) => {
                    let target = *self
                        .labels
                        .get(label)
                        .ok_or_else(|| AsmError::UnresolvedLabel { line: i + 1, label: label.clone() })?;
                    match cond {
                        Some(cond) => MacroOp::Jcc { cond: *cond, target },
                        None => MacroOp::Jmp { target },
                    }
                }
            };
            ops.push(Instr { op, line: i + 1 });
        }
        Ok(Program {
            ops,
            labels: self.labels.clone(),
            entry: 0,
            init_regs: self.init_regs.clone(),
            code_base: self.code_base,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_end_labels_resolve() {
        let mut b = ProgramBuilder::new();
        b.jcc(Cond::Zero, "Exit").op(MacroOp::Nop).jmp("Exit").label("Exit");
        let p = b.build().unwrap();
        assert_eq!(p.ops[0].op, MacroOp::Jcc { cond: Cond::Zero, target: 3 });
        assert_eq!(p.ops[2].op, MacroOp::Jmp { target: 3 });
        p.validate().unwrap();
    }

    #[test]
    fn missing_label_is_reported() {
        let mut b = ProgramBuilder::new();
        b.jmp("Nowhere");
        assert!(matches!(b.build(), Err(AsmError::UnresolvedLabel { .. })));
    }
}
