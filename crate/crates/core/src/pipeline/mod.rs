//! The out-of-order core: fetch, rename, dispatch to ports, completion,
//! branch resolution with flushes, and in-order commit.

mod core;
mod result;

use std::sync::Arc;

pub use self::core::Core;
pub use result::{write_trace, CoreOptions, EventKind, RunResult, Terminal, TraceEvent};

use crate::isa::DecodedProgram;
use crate::memory::MemoryMap;
use crate::uarch::MicroArchProfile;

/// Runs `program` on a fresh core.
pub fn run(program: &DecodedProgram, profile: &MicroArchProfile, map: Arc<MemoryMap>, options: CoreOptions) -> RunResult {
    Core::new(profile, map, options).run(program)
}
