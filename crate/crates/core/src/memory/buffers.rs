/// Load buffer occupancy. An entry is held from dispatch until the load
/// commits or is flushed.
#[derive(Debug, Clone)]
pub struct LoadBuffer {
    capacity: Option<usize>,
    used: usize,
}

impl LoadBuffer {
    pub fn new(capacity: Option<usize>) -> LoadBuffer {
        LoadBuffer { capacity, used: 0 }
    }

    pub fn has_room(&self) -> bool {
        self.capacity.is_none_or(|c| self.used < c)
    }

    pub fn allocate(&mut self) {
        assert!(self.has_room(), "load buffer overflow");
        self.used += 1;
    }

    pub fn release(&mut self, n: usize) {
        self.used = self.used.checked_sub(n).expect("load buffer underflow");
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn reset(&mut self) {
        self.used = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissSlot {
    pub line: u64,
    /// Unresolvable slots (misses to unmapped memory) stay allocated until
    /// the owning load leaves the pipeline.
    pub resolvable: bool,
    pub owner: u64,
    pub ready: u64,
}

/// Outstanding L1 misses.
#[derive(Debug, Clone)]
pub struct MissBuffer {
    capacity: usize,
    slots: Vec<MissSlot>,
}

impl MissBuffer {
    pub fn new(capacity: usize) -> MissBuffer {
        MissBuffer { capacity, slots: Vec::with_capacity(capacity) }
    }

    /// Drops resolvable slots whose fill has landed by `now`.
    pub fn retire(&mut self, now: u64) {
        self.slots.retain(|s| !s.resolvable || s.ready > now);
    }

    pub fn has_room(&mut self, now: u64) -> bool {
        if self.slots.len() < self.capacity {
            return true;
        }
        self.retire(now);
        self.slots.len() < self.capacity
    }

    pub fn issue(&mut self, slot: MissSlot) {
        assert!(self.slots.len() < self.capacity, "miss buffer overflow");
        self.slots.push(slot);
    }

    /// Releases unresolvable slots owned by loads with id `>= first`.
    pub fn release_from(&mut self, first: u64) {
        self.slots.retain(|s| s.resolvable || s.owner < first);
    }

    /// Releases the unresolvable slot owned by `owner`, if any.
    pub fn release_owner(&mut self, owner: u64) {
        self.slots.retain(|s| s.resolvable || s.owner != owner);
    }

    pub fn occupancy(&self) -> usize {
        self.slots.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Earliest cycle after `now` at which a resolvable slot frees up.
    pub fn next_release(&self, now: u64) -> Option<u64> {
        self.slots.iter().filter(|s| s.resolvable && s.ready > now).map(|s| s.ready).min()
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unresolvable_slots_persist_until_released() {
        let mut mb = MissBuffer::new(2);
        mb.issue(MissSlot { line: 0, resolvable: false, owner: 5, ready: u64::MAX });
        mb.issue(MissSlot { line: 64, resolvable: true, owner: 6, ready: 100 });
        assert!(!mb.has_room(50));
        assert!(mb.has_room(100));
        mb.issue(MissSlot { line: 128, resolvable: true, owner: 7, ready: 300 });
        assert!(!mb.has_room(10_000_000) || mb.occupancy() == 1);
        mb.release_from(5);
        assert_eq!(mb.occupancy(), 0);
    }

    #[test]
    fn unbounded_load_buffer_always_has_room() {
        let mut lb = LoadBuffer::new(None);
        for _ in 0..1000 {
            lb.allocate();
        }
        assert!(lb.has_room());
        let mut lb = LoadBuffer::new(Some(1));
        lb.allocate();
        assert!(!lb.has_room());
        lb.release(1);
        assert!(lb.has_room());
    }
}
