#![allow(dead_code)]

pub mod random;
pub mod reference;

use std::path::PathBuf;
use std::sync::Arc;

use specsim::attacks::fixture::fixture_map;
use specsim::isa::{assemble, DecodedProgram, Program};
use specsim::memory::MemoryMap;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn corpus(name: &str) -> Program {
    let path = corpus_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assemble(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn corpus_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".asm"))
        .collect();
    names.sort();
    names
}

pub fn map() -> Arc<MemoryMap> {
    Arc::new(fixture_map())
}

pub fn decoded(src: &str) -> DecodedProgram {
    DecodedProgram::new(&assemble(src).unwrap())
}

/// Runs `program` on the pipeline and the reference interpreter and
/// describes the first difference in committed state, ignoring values
/// derived from timestamps.
pub fn committed_difference(
    program: &Program,
    profile: &specsim::uarch::MicroArchProfile,
    map: &Arc<MemoryMap>,
) -> Option<String> {
    use specsim::pipeline::{run, CoreOptions, Terminal};

    let reference = reference::interpret(program, map, 1_000_000);
    let r = run(&DecodedProgram::new(program), profile, map.clone(), CoreOptions::default());
    let outcome_matches = match (&reference.outcome, &r.terminal) {
        (reference::Outcome::Exited, Terminal::Exited) => true,
        (reference::Outcome::SegFault { addr, fault }, Terminal::SegFault { addr: a, fault: f }) => addr == a && fault == f,
        _ => false,
    };
    if !outcome_matches {
        return Some(format!("outcome: reference {:?}, pipeline {:?}", reference.outcome, r.terminal));
    }
    for i in 0..16 {
        if !reference.tainted[i] && reference.regs[i] != r.registers[i] {
            return Some(format!("register {i}: reference {:#x}, pipeline {:#x}", reference.regs[i], r.registers[i]));
        }
    }
    let untainted = |w: &std::collections::BTreeMap<u64, u8>| -> Vec<(u64, u8)> {
        w.iter().filter(|(a, _)| !reference.tainted_bytes.contains(a)).map(|(a, b)| (*a, *b)).collect()
    };
    if untainted(&reference.writes) != untainted(&r.memory_writes) {
        return Some("committed memory writes differ".into());
    }
    None
}
