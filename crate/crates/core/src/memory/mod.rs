//! Simulated address space, L1 residency, the load buffer and the miss
//! buffer.

mod buffers;
mod cache;
mod map;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

pub use buffers::{LoadBuffer, MissBuffer, MissSlot};
pub use cache::{line_of, CacheState, LINE_SIZE};
pub(crate) use map::splitmix64;
pub use map::{Backing, MapError, MemoryMap, PageEntry, PageSize, PAGE_2M, PAGE_4K};

use crate::isa::Width;
use crate::uarch::{FaultBehavior, MicroArchProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Privilege {
    User,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Mapped page without sufficient privilege.
    Protection,
    /// Page not mapped.
    NotMapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} fault at {addr:#x}")]
pub struct MemoryFault {
    pub addr: u64,
    pub kind: FaultKind,
}

/// A memory map shared between simulations plus this simulation's
/// committed stores.
#[derive(Debug, Clone)]
pub struct Memory {
    map: Arc<MemoryMap>,
    writes: FxHashMap<u64, u8>,
}

impl Memory {
    pub fn new(map: Arc<MemoryMap>) -> Memory {
        Memory { map, writes: FxHashMap::default() }
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn check(&self, addr: u64, privilege: Privilege) -> Result<(), MemoryFault> {
        match self.map.lookup(addr) {
            None => Err(MemoryFault { addr, kind: FaultKind::NotMapped }),
            Some((_, e)) if e.kernel && privilege == Privilege::User => {
                Err(MemoryFault { addr, kind: FaultKind::Protection })
            }
            Some(_) => Ok(()),
        }
    }

    pub fn byte(&self, addr: u64) -> u8 {
        match self.writes.get(&addr) {
            Some(b) => *b,
            None => self.map.byte(addr).unwrap_or(0),
        }
    }

    pub fn read(&self, addr: u64, width: Width) -> u64 {
        if self.writes.is_empty() {
            return self.map.read(addr, width);
        }
        (0..width.bytes() as u64).fold(0, |acc, i| acc | (self.byte(addr.wrapping_add(i)) as u64) << (8 * i))
    }

    /// Commits a user-mode store.
    pub fn write(&mut self, addr: u64, width: Width, value: u64) -> Result<(), MemoryFault> {
        self.check(addr, Privilege::User)?;
        for i in 0..width.bytes() as u64 {
            self.writes.insert(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
        Ok(())
    }

    /// Committed stores as byte address to value.
    pub fn writes(&self) -> BTreeMap<u64, u8> {
        self.writes.iter().map(|(a, b)| (*a, *b)).collect()
    }
}

/// Measurement noise: uniform extra latency on every load plus a chance
/// that a resident line is found evicted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub jitter: u32,
    pub evict_probability: f64,
}

impl NoiseConfig {
    /// The documented default: up to 16 cycles of jitter, 1% spurious evictions.
    pub const DEFAULT: NoiseConfig = NoiseConfig { jitter: 16, evict_probability: 0.01 };
}

impl fmt::Display for NoiseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "jitter={},evict={}", self.jitter, self.evict_probability)
    }
}

impl FromStr for NoiseConfig {
    type Err = String;

    /// Accepts `default` or a comma-separated list of `jitter=<cycles>` and
    /// `evict=<probability>`.
    fn from_str(s: &str) -> Result<NoiseConfig, String> {
        if s.trim() == "default" {
            return Ok(NoiseConfig::DEFAULT);
        }
        let mut cfg = NoiseConfig { jitter: 0, evict_probability: 0.0 };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            match k.trim() {
                "jitter" => cfg.jitter = v.trim().parse().map_err(|_| format!("bad jitter `{v}`"))?,
                "evict" => {
                    let p: f64 = v.trim().parse().map_err(|_| format!("bad eviction probability `{v}`"))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(format!("eviction probability {p} outside [0, 1]"));
                    }
                    cfg.evict_probability = p;
                }
                other => return Err(format!("unknown noise parameter `{other}`")),
            }
        }
        Ok(cfg)
    }
}

/// Noise source for one simulation.
#[derive(Debug, Clone)]
pub struct Noise {
    config: NoiseConfig,
    rng: ChaCha8Rng,
}

impl Noise {
    pub fn new(config: NoiseConfig, seed: u64) -> Noise {
        Noise { config, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn jitter(&mut self) -> u64 {
        if self.config.jitter == 0 {
            0
        } else {
            self.rng.gen_range(0..=self.config.jitter) as u64
        }
    }

    fn evicts(&mut self) -> bool {
        self.config.evict_probability > 0.0 && self.rng.gen_bool(self.config.evict_probability)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    Hit { value: u64, latency: u64 },
    /// A fill was started (or joined); the value is available at `ready`.
    MissIssued { value: u64, ready: u64 },
    /// Faulting load that completes with value 0; the fault is raised at commit.
    FaultZero { latency: u64, kind: FaultKind },
    /// Faulting load that never completes.
    Stall { kind: FaultKind },
    LoadBufferFull,
    MissBufferFull,
}

/// One load request issued at cycle `now` by the load with id `owner`.
#[derive(Debug, Clone, Copy)]
pub struct LoadRequest {
    pub addr: u64,
    pub width: Width,
    pub privilege: Privilege,
    pub now: u64,
    pub owner: u64,
}

/// Performs the L1 side of a load. Does not allocate the load buffer entry;
/// the caller does that for every outcome other than the two `*Full` ones.
pub fn access(
    memory: &Memory,
    cache: &mut CacheState,
    lb: &LoadBuffer,
    mb: &mut MissBuffer,
    profile: &MicroArchProfile,
    noise: Option<&mut Noise>,
    req: LoadRequest,
) -> AccessOutcome {
    if !lb.has_room() {
        return AccessOutcome::LoadBufferFull;
    }
    let l1 = profile.l1_hit_latency as u64;
    let mut noise = noise;
    let fault = match memory.check(req.addr, req.privilege) {
        Ok(()) => None,
        Err(f) => Some(f.kind),
    };
    if let Some(kind) = fault {
        let behavior = match kind {
            FaultKind::Protection => profile.gpf_behavior,
            FaultKind::NotMapped => profile.pf_behavior,
        };
        // a protection fault with ReturnZero is served by the L1 without a miss
        if kind == FaultKind::Protection && behavior == FaultBehavior::ReturnZero {
            return AccessOutcome::FaultZero { latency: l1, kind };
        }
        if !mb.has_room(req.now) {
            return AccessOutcome::MissBufferFull;
        }
        mb.issue(MissSlot { line: line_of(req.addr), resolvable: false, owner: req.owner, ready: u64::MAX });
        return match behavior {
            FaultBehavior::ReturnZero => AccessOutcome::FaultZero { latency: l1, kind },
            FaultBehavior::Stall => AccessOutcome::Stall { kind },
        };
    }

    let value = memory.read(req.addr, req.width);
    let jitter = noise.as_deref_mut().map_or(0, Noise::jitter);
    if cache.is_resident(req.addr, req.now) {
        if noise.is_some_and(Noise::evicts) {
            cache.flush_line(req.addr);
        } else {
            return AccessOutcome::Hit { value, latency: l1 + jitter };
        }
    }
    if let Some(ready) = cache.pending_fill(req.addr) {
        return AccessOutcome::MissIssued { value, ready: ready.max(req.now + l1) + jitter };
    }
    if !mb.has_room(req.now) {
        return AccessOutcome::MissBufferFull;
    }
    let ready = req.now + profile.memory_latency as u64 + jitter;
    mb.issue(MissSlot { line: line_of(req.addr), resolvable: true, owner: req.owner, ready });
    cache.schedule_fill(req.addr, ready);
    AccessOutcome::MissIssued { value, ready }
}

/// Latency of a committed user-mode read; the line becomes resident.
pub fn timed_read(
    cache: &mut CacheState,
    memory: &Memory,
    addr: u64,
    profile: &MicroArchProfile,
    now: u64,
) -> Result<u32, MemoryFault> {
    memory.check(addr, Privilege::User)?;
    let latency = if cache.is_resident(addr, now) { profile.l1_hit_latency } else { profile.memory_latency };
    cache.insert(addr);
    Ok(latency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uarch::builtin_profile;

    const KERNEL: u64 = 0xffff_ffff_8000_0000;
    const USER: u64 = 0x40_0000;

    fn memory() -> Memory {
        let mut m = MemoryMap::new();
        m.map_page(KERNEL, PageSize::Large, true, Backing::Fill(0xa5)).unwrap();
        m.map_page(USER, PageSize::Small, false, Backing::Seeded(1)).unwrap();
        Memory::new(Arc::new(m))
    }

    fn load(addr: u64, profile: &str) -> (AccessOutcome, CacheState, MissBuffer) {
        let p = builtin_profile(profile).unwrap();
        let mut cache = CacheState::new();
        let lb = LoadBuffer::new(p.load_buffer_entries);
        let mut mb = MissBuffer::new(p.parallel_miss_slots);
        let req = LoadRequest { addr, width: Width::Qword, privilege: Privilege::User, now: 0, owner: 0 };
        let out = access(&memory(), &mut cache, &lb, &mut mb, &p, None, req);
        (out, cache, mb)
    }

    #[test]
    fn kernel_read_returns_zero_without_caching() {
        let (out, cache, mb) = load(KERNEL + 8, "haswell");
        assert!(matches!(out, AccessOutcome::FaultZero { kind: FaultKind::Protection, .. }));
        assert!(cache.snapshot().is_empty());
        assert_eq!(mb.occupancy(), 0);
    }

    #[test]
    fn unmapped_read_stalls_and_holds_a_slot() {
        let (out, _, mb) = load(KERNEL + PAGE_2M, "haswell");
        assert!(matches!(out, AccessOutcome::Stall { kind: FaultKind::NotMapped }));
        assert_eq!(mb.occupancy(), 1);
    }

    #[test]
    fn nehalem_unmapped_read_returns_zero() {
        let (out, _, mb) = load(KERNEL + PAGE_2M, "nehalem");
        assert!(matches!(out, AccessOutcome::FaultZero { kind: FaultKind::NotMapped, .. }));
        assert_eq!(mb.occupancy(), 1);
    }

    #[test]
    fn user_miss_then_hit() {
        let p = builtin_profile("haswell").unwrap();
        let mem = memory();
        let mut cache = CacheState::new();
        assert_eq!(timed_read(&mut cache, &mem, USER, &p, 0), Ok(200));
        assert_eq!(timed_read(&mut cache, &mem, USER + 8, &p, 0), Ok(4));
        assert!(timed_read(&mut cache, &mem, KERNEL, &p, 0).is_err());
    }

    #[test]
    fn committed_writes_overlay_backing() {
        let mut mem = memory();
        mem.write(USER + 3, Width::Dword, 0xdead_beef).unwrap();
        assert_eq!(mem.read(USER + 3, Width::Dword), 0xdead_beef);
        assert!(mem.write(KERNEL, Width::Byte, 1).is_err());
    }

    #[test]
    fn noise_spec_parses() {
        assert_eq!("default".parse::<NoiseConfig>().unwrap(), NoiseConfig::DEFAULT);
        let n: NoiseConfig = "jitter=4, evict=0.5".parse().unwrap();
        assert_eq!(n, NoiseConfig { jitter: 4, evict_probability: 0.5 });
        assert!("evict=2".parse::<NoiseConfig>().is_err());
        assert_eq!(n.to_string().parse::<NoiseConfig>().unwrap(), n);
    }
}
