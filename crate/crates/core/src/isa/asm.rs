//! Textual assembly format.
//!
//! One instruction per line, Intel operand order, `;` starts a comment and
//! `name:` defines a label (optionally followed by an instruction on the same
//! line). Directives:
//!
//! ```text
//! .init r9, 3          ; initial register value
//! .equ  U, 0x400000    ; named constant, usable as immediate or displacement
//! .entry start         ; entry label or index (default 0)
//! .base 0x1000         ; code base address used to key branch prediction
//! .rept 2048           ; repeat the lines up to the matching .endr
//!   imul r9, 3
//! .endr
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::{Cond, Instr, MacroOp, MemOperand, Program, Reg, RegRef, Src, Width};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
}

enum Operand {
    Reg(RegRef),
    Imm(i64),
    Mem(MemOperand, bool),
    Label(String),
}

struct Parser<'a> {
    line: usize,
    equs: &'a HashMap<String, i64>,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> AsmError {
        AsmError::Syntax { line: self.line, msg: msg.into() }
    }

    fn number(&self, text: &str) -> Result<i64, AsmError> {
        let t = text.trim();
        if let Some(v) = self.equs.get(t) {
            return Ok(*v);
        }
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest.trim()),
            None => (false, t),
        };
        let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
            u64::from_str_radix(&hex.replace('_', ""), 16)
        } else {
            body.replace('_', "").parse::<u64>()
        }
        .map_err(|_| self.err(format!("bad number `{t}`")))?;
        let v = magnitude as i64;
        Ok(if neg { v.wrapping_neg() } else { v })
    }

    fn memory(&self, text: &str) -> Result<Operand, AsmError> {
        let mut t = text.trim();
        let mut width = None;
        let upper = t.to_ascii_uppercase();
        for (kw, w) in [("BYTE", Width::Byte), ("DWORD", Width::Dword), ("QWORD", Width::Qword)] {
            if upper.starts_with(kw) {
                width = Some(w);
                t = t[kw.len()..].trim_start();
                if t.to_ascii_uppercase().starts_with("PTR") {
                    t = t[3..].trim_start();
                }
                break;
            }
        }
        let inner = t
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| self.err(format!("bad memory operand `{text}`")))?;
        let mut mem = MemOperand { base: None, index: None, disp: 0, width: width.unwrap_or(Width::Qword) };
        // split into signed terms
        let mut terms: Vec<(bool, String)> = Vec::new();
        let mut cur = String::new();
        let mut neg = false;
        for ch in inner.chars() {
            if ch == '+' || ch == '-' {
                if !cur.trim().is_empty() {
                    terms.push((neg, cur.trim().to_string()));
                } else if ch == '-' && terms.is_empty() && cur.trim().is_empty() {
                    neg = !neg;
                    continue;
                }
                cur.clear();
                neg = ch == '-';
            } else {
                cur.push(ch);
            }
        }
        if !cur.trim().is_empty() {
            terms.push((neg, cur.trim().to_string()));
        }
        if terms.is_empty() {
            return Err(self.err("empty memory operand"));
        }
        for (neg, term) in terms {
            if let Some(r) = RegRef::parse(&term) {
                if r.view != super::View::Full {
                    return Err(self.err(format!("address register `{term}` must be 64-bit")));
                }
                if neg {
                    return Err(self.err("registers cannot be subtracted in an address"));
                }
                if mem.base.is_none() {
                    mem.base = Some(r.reg);
                } else if mem.index.is_none() {
                    mem.index = Some(r.reg);
                } else {
                    return Err(self.err("at most two registers in an address"));
                }
            } else {
                let v = self.number(&term)?;
                mem.disp = if neg { mem.disp.wrapping_sub(v) } else { mem.disp.wrapping_add(v) };
            }
        }
        Ok(Operand::Mem(mem, width.is_some()))
    }

    fn operand(&self, text: &str) -> Result<Operand, AsmError> {
        let t = text.trim();
        if t.is_empty() {
            return Err(self.err("missing operand"));
        }
        if t.contains('[') {
            return self.memory(t);
        }
        if let Some(r) = RegRef::parse(t) {
            return Ok(Operand::Reg(r));
        }
        if let Ok(v) = self.number(t) {
            return Ok(Operand::Imm(v));
        }
        if is_ident(t) {
            return Ok(Operand::Label(t.to_string()));
        }
        Err(self.err(format!("bad operand `{t}`")))
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

enum Pending {
    Op(MacroOp),
    Branch(Option<Cond>, String),
}

/// Assembles source text into a [`Program`] with resolved labels.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut equs: HashMap<String, i64> = HashMap::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<(Pending, usize)> = Vec::new();
    let mut init_regs = BTreeMap::new();
    let mut entry: Option<(String, usize)> = None;
    let mut code_base = 0u64;

    for (line, raw) in expand_repeats(source)? {
        let mut text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let p = Parser { line, equs: &equs };

        if let Some(directive) = text.strip_prefix('.') {
            let (name, rest) = split_mnemonic(directive);
            let args: Vec<&str> = rest.split(',').map(str::trim).collect();
            match name.to_ascii_lowercase().as_str() {
                "init" => {
                    let [reg, val] = args[..] else { return Err(p.err(".init expects `reg, value`")) };
                    let reg = Reg::parse(reg).ok_or_else(|| p.err(format!("bad register `{reg}`")))?;
                    let v = p.number(val)?;
                    init_regs.insert(reg, v as u64);
                }
                "equ" => {
                    let [name, val] = args[..] else { return Err(p.err(".equ expects `name, value`")) };
                    if !is_ident(name) {
                        return Err(p.err(format!("bad constant name `{name}`")));
                    }
                    let v = p.number(val)?;
                    equs.insert(name.to_string(), v);
                }
                "entry" => entry = Some((rest.trim().to_string(), line)),
                "base" => code_base = p.number(rest)? as u64,
                other => return Err(p.err(format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        // leading labels
        while let Some(colon) = text.find(':') {
            let candidate = text[..colon].trim();
            if !is_ident(candidate) || candidate.contains(' ') {
                break;
            }
            if labels.insert(candidate.to_string(), pending.len()).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: candidate.to_string() });
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }

        let (mnemonic, rest) = split_mnemonic(text);
        let operands: Vec<Operand> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            split_operands(rest).iter().map(|o| p.operand(o)).collect::<Result<_, _>>()?
        };
        let op = parse_instruction(&p, &mnemonic.to_ascii_lowercase(), operands)?;
        pending.push((op, line));
    }

    let resolve = |label: &str, line: usize| {
        labels.get(label).copied().ok_or_else(|| AsmError::UnresolvedLabel { line, label: label.to_string() })
    };
    let mut ops = Vec::with_capacity(pending.len());
    for (p, line) in &pending {
        let op = match p {
            Pending::Op(op) => *op,
            Pending::Branch(Some(cond), l) => MacroOp::Jcc { cond: *cond, target: resolve(l, *line)? },
            Pending::Branch(None, l) => MacroOp::Jmp { target: resolve(l, *line)? },
        };
        ops.push(Instr { op, line: *line });
    }
    let entry = match entry {
        None => 0,
        Some((text, line)) => match text.parse::<usize>() {
            Ok(n) => n,
            Err(_) => resolve(&text, line)?,
        },
    };
    Ok(Program { ops, labels, entry, init_regs, code_base })
}

/// Source lines paired with their 1-based line numbers.
type Lines<'a> = Vec<(usize, &'a str)>;

/// Expands `.rept N` / `.endr` blocks (not nested), keeping source line numbers.
fn expand_repeats(source: &str) -> Result<Lines<'_>, AsmError> {
    let mut out = Vec::new();
    // (line of the .rept, count, body)
    let mut block: Option<(usize, usize, Lines<'_>)> = None;
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let text = raw.split(';').next().unwrap_or("").trim();
        let directive = text.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
        match directive.as_str() {
            ".rept" => {
                if block.is_some() {
                    return Err(AsmError::Syntax { line, msg: "nested .rept".into() });
                }
                let count = text[5..].trim().replace('_', "");
                let n = count
                    .parse::<usize>()
                    .map_err(|_| AsmError::Syntax { line, msg: format!("bad repeat count `{count}`") })?;
                block = Some((line, n, Vec::new()));
            }
            ".endr" => {
                let Some((_, n, body)) = block.take() else {
                    return Err(AsmError::Syntax { line, msg: ".endr without .rept".into() });
                };
                for _ in 0..n {
                    out.extend_from_slice(&body);
                }
            }
            _ => match &mut block {
                Some((_, _, body)) => body.push((line, raw)),
                None => out.push((line, raw)),
            },
        }
    }
    if let Some((line, _, _)) = block {
        return Err(AsmError::Syntax { line, msg: "unterminated .rept".into() });
    }
    Ok(out)
}

fn split_mnemonic(text: &str) -> (&str, &str) {
    match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], &text[i..]),
        None => (text, ""),
    }
}

fn split_operands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out
}

fn parse_instruction(p: &Parser, mnemonic: &str, ops: Vec<Operand>) -> Result<Pending, AsmError> {
    let arity = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(p.err(format!("`{mnemonic}` takes {n} operand(s), got {}", ops.len())))
        }
    };
    let src = |o: &Operand| match o {
        Operand::Reg(r) => Ok(Src::Reg(*r)),
        Operand::Imm(v) => Ok(Src::Imm(*v)),
        _ => Err(p.err("expected register or immediate")),
    };
    let op = match mnemonic {
        "imul" => {
            arity(2)?;
            match (&ops[0], &ops[1]) {
                (Operand::Reg(dst), Operand::Imm(imm)) => MacroOp::Imul { dst: *dst, imm: *imm },
                _ => return Err(p.err("imul expects `reg, imm`")),
            }
        }
        "add" | "sub" | "mov" | "cmp" | "test" => {
            arity(2)?;
            match (mnemonic, &ops[0], &ops[1]) {
                ("mov", Operand::Reg(dst), Operand::Mem(m, sized)) => {
                    let mem = if *sized { *m } else { m.with_width(dst.view.width()) };
                    MacroOp::Load { dst: *dst, mem }
                }
                ("mov", Operand::Mem(m, sized), s) => {
                    let s = src(s)?;
                    let mem = match (sized, s) {
                        (false, Src::Reg(r)) => m.with_width(r.view.width()),
                        _ => *m,
                    };
                    MacroOp::Store { mem, src: s }
                }
                ("add", Operand::Mem(m, _), Operand::Imm(imm)) => MacroOp::AddMem { mem: *m, imm: *imm },
                ("cmp", Operand::Mem(m, _), Operand::Imm(imm)) => MacroOp::CmpMemImm { mem: *m, imm: *imm },
                ("cmp", Operand::Reg(lhs), Operand::Mem(m, sized)) => {
                    let mem = if *sized { *m } else { m.with_width(lhs.view.width()) };
                    MacroOp::CmpRegMem { lhs: *lhs, mem }
                }
                (_, Operand::Reg(dst), s) => {
                    let s = src(s)?;
                    match mnemonic {
                        "add" => MacroOp::Add { dst: *dst, src: s },
                        "sub" => MacroOp::Sub { dst: *dst, src: s },
                        "mov" => MacroOp::Mov { dst: *dst, src: s },
                        "cmp" => MacroOp::Cmp { lhs: *dst, rhs: s },
                        _ => MacroOp::Test { lhs: *dst, rhs: s },
                    }
                }
                _ => return Err(p.err(format!("unsupported operand combination for `{mnemonic}`"))),
            }
        }
        "je" | "jz" | "jne" | "jnz" | "jmp" => {
            arity(1)?;
            let Operand::Label(l) = &ops[0] else { return Err(p.err("branch expects a label")) };
            let cond = match mnemonic {
                "je" | "jz" => Some(Cond::Zero),
                "jne" | "jnz" => Some(Cond::NotZero),
                _ => None,
            };
            return Ok(Pending::Branch(cond, l.clone()));
        }
        "clflush" => {
            arity(1)?;
            match &ops[0] {
                Operand::Mem(m, _) => MacroOp::Clflush { mem: *m },
                _ => return Err(p.err("clflush expects a memory operand")),
            }
        }
        "rdtsc" | "rdtscp" | "cpuid" | "hlt" | "nop" => {
            arity(0)?;
            match mnemonic {
                "rdtsc" => MacroOp::Rdtsc,
                "rdtscp" => MacroOp::Rdtscp,
                "cpuid" => MacroOp::Cpuid,
                "hlt" => MacroOp::Hlt,
                _ => MacroOp::Nop,
            }
        }
        other => return Err(AsmError::UnknownMnemonic { line: p.line, mnemonic: other.to_string() }),
    };
    Ok(Pending::Op(op))
}

/// Pretty-prints a program in the format accepted by [`assemble`].
pub fn render(program: &Program) -> String {
    let n = program.ops.len();
    let mut names: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (name, &idx) in &program.labels {
        names.entry(idx).or_default().push(name.clone());
    }
    for instr in &program.ops {
        if let Some(t) = instr.op.branch_target() {
            names.entry(t).or_insert_with(|| vec![format!("L{t}")]);
        }
    }
    let target_name = |t: usize| names[&t][0].clone();

    let mut out = String::new();
    if program.code_base != 0 {
        let _ = writeln!(out, ".base {:#x}", program.code_base);
    }
    for (reg, v) in &program.init_regs {
        let _ = writeln!(out, ".init {reg}, {v:#x}");
    }
    if program.entry != 0 {
        let _ = writeln!(out, ".entry {}", program.entry);
    }
    for idx in 0..=n {
        if let Some(labels) = names.get(&idx) {
            for l in labels {
                let _ = writeln!(out, "{l}:");
            }
        }
        let Some(instr) = program.ops.get(idx) else { break };
        let text = match instr.op {
            MacroOp::Imul { dst, imm } => format!("imul {dst}, {}", Src::Imm(imm)),
            MacroOp::Add { dst, src } => format!("add {dst}, {src}"),
            MacroOp::Sub { dst, src } => format!("sub {dst}, {src}"),
            MacroOp::AddMem { mem, imm } => format!("add {mem}, {}", Src::Imm(imm)),
            MacroOp::Mov { dst, src } => format!("mov {dst}, {src}"),
            MacroOp::Load { dst, mem } => format!("mov {dst}, {mem}"),
            MacroOp::Store { mem, src } => format!("mov {mem}, {src}"),
            MacroOp::Cmp { lhs, rhs } => format!("cmp {lhs}, {rhs}"),
            MacroOp::CmpRegMem { lhs, mem } => format!("cmp {lhs}, {mem}"),
            MacroOp::CmpMemImm { mem, imm } => format!("cmp {mem}, {}", Src::Imm(imm)),
            MacroOp::Test { lhs, rhs } => format!("test {lhs}, {rhs}"),
            MacroOp::Jcc { cond, target } => format!("{} {}", cond.mnemonic(), target_name(target)),
            MacroOp::Jmp { target } => format!("jmp {}", target_name(target)),
            MacroOp::Clflush { mem } => format!("clflush {mem}"),
            MacroOp::Rdtsc => "rdtsc".into(),
            MacroOp::Rdtscp => "rdtscp".into(),
            MacroOp::Cpuid => "cpuid".into(),
            MacroOp::Hlt => "hlt".into(),
            MacroOp::Nop => "nop".into(),
        };
        let _ = writeln!(out, "    {text}");
    }
    out
}
