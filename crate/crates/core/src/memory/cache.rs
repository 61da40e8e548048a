use std::collections::BTreeSet;

use rustc_hash::{FxHashMap, FxHashSet};

pub const LINE_SIZE: u64 = 64;

pub fn line_of(addr: u64) -> u64 {
    addr & !(LINE_SIZE - 1)
}

/// L1 residency: a set of resident lines plus fills that land at a future
/// cycle. Fills are applied lazily when the line is queried.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    resident: FxHashSet<u64>,
    pending: FxHashMap<u64, u64>,
}

impl CacheState {
    pub fn new() -> CacheState {
        CacheState::default()
    }

    /// Whether the line holding `addr` is resident at cycle `now`.
    pub fn is_resident(&mut self, addr: u64, now: u64) -> bool {
        let line = line_of(addr);
        if self.resident.contains(&line) {
            return true;
        }
        match self.pending.get(&line) {
            Some(&ready) if ready <= now => {
                self.pending.remove(&line);
                self.resident.insert(line);
                true
            }
            _ => false,
        }
    }

    /// Cycle at which an in-flight fill for `addr` lands, if one exists.
    pub fn pending_fill(&self, addr: u64) -> Option<u64> {
        self.pending.get(&line_of(addr)).copied()
    }

    pub fn insert(&mut self, addr: u64) {
        let line = line_of(addr);
        self.pending.remove(&line);
        self.resident.insert(line);
    }

    pub fn schedule_fill(&mut self, addr: u64, ready: u64) {
        let line = line_of(addr);
        if !self.resident.contains(&line) {
            let e = self.pending.entry(line).or_insert(ready);
            *e = (*e).min(ready);
        }
    }

    /// Removes the line holding `addr`, cancelling any in-flight fill.
    pub fn flush_line(&mut self, addr: u64) {
        let line = line_of(addr);
        self.resident.remove(&line);
        self.pending.remove(&line);
    }

    /// Resident lines, counting in-flight fills as landed.
    pub fn snapshot(&self) -> BTreeSet<u64> {
        self.resident.iter().chain(self.pending.keys()).copied().collect()
    }

    pub fn clear(&mut self) {
        self.resident.clear();
        self.pending.clear();
    }
}
