use std::collections::BTreeSet;

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};

use crate::isa::Width;

pub const PAGE_4K: u64 = 0x1000;
pub const PAGE_2M: u64 = 0x20_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageSize {
    Small,
    Large,
}

impl PageSize {
    pub fn bytes(self) -> u64 {
        match self {
            PageSize::Small => PAGE_4K,
            PageSize::Large => PAGE_2M,
        }
    }
}

/// Content generator for a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backing {
    /// Pseudo-random bytes derived from the seed and the byte address.
    Seeded(u64),
    /// Every byte has the same value.
    Fill(u8),
}

impl Backing {
    pub fn byte(self, addr: u64) -> u8 {
        match self {
            Backing::Fill(b) => b,
            Backing::Seeded(seed) => {
                let word = splitmix64(seed ^ (addr >> 3).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                (word >> ((addr & 7) * 8)) as u8
            }
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageEntry {
    pub size: PageSize,
    pub kernel: bool,
    pub backing: Backing,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error("page base {base:#x} is not aligned to {size:#x}")]
    Misaligned { base: u64, size: u64 },
    #[error("page at {0:#x} overlaps an existing mapping")]
    Overlap(u64),
}

/// Page-granular address space. Addresses without an entry are unmapped.
#[derive(Debug, Clone, Default)]
pub struct MemoryMap {
    pages: FxHashMap<u64, PageEntry>,
    large: usize,
}

impl MemoryMap {
    pub fn new() -> MemoryMap {
        MemoryMap::default()
    }

    pub fn map_page(&mut self, base: u64, size: PageSize, kernel: bool, backing: Backing) -> Result<(), MapError> {
        let bytes = size.bytes();
        if !base.is_multiple_of(bytes) {
            return Err(MapError::Misaligned { base, size: bytes });
        }
        if self.lookup(base).is_some() {
            return Err(MapError::Overlap(base));
        }
        if size == PageSize::Large && (0..512).any(|i| self.pages.contains_key(&(base + i * PAGE_4K))) {
            return Err(MapError::Overlap(base));
        }
        if size == PageSize::Large {
            self.large += 1;
        }
        self.pages.insert(base, PageEntry { size, kernel, backing });
        Ok(())
    }

    /// Maps `count` consecutive pages starting at `base`.
    pub fn map_range(&mut self, base: u64, count: u64, size: PageSize, kernel: bool, backing: Backing) -> Result<(), MapError> {
        for i in 0..count {
            self.map_page(base + i * size.bytes(), size, kernel, backing)?;
        }
        Ok(())
    }

    /// Page containing `addr`, as `(page base, entry)`.
    pub fn lookup(&self, addr: u64) -> Option<(u64, &PageEntry)> {
        let small = addr & !(PAGE_4K - 1);
        if let Some(e) = self.pages.get(&small) {
            if e.size == PageSize::Small {
                return Some((small, e));
            }
        }
        if self.large == 0 {
            return None;
        }
        let large = addr & !(PAGE_2M - 1);
        match self.pages.get(&large) {
            Some(e) if e.size == PageSize::Large => Some((large, e)),
            _ => None,
        }
    }

    pub fn is_user_mapped(&self, addr: u64) -> bool {
        matches!(self.lookup(addr), Some((_, e)) if !e.kernel)
    }

    /// Backing byte at `addr`, or `None` if unmapped.
    pub fn byte(&self, addr: u64) -> Option<u8> {
        self.lookup(addr).map(|(_, e)| e.backing.byte(addr))
    }

    /// Little-endian read of backing content; unmapped bytes read as 0.
    pub fn read(&self, addr: u64, width: Width) -> u64 {
        (0..width.bytes() as u64).fold(0, |acc, i| {
            let a = addr.wrapping_add(i);
            acc | (self.byte(a).unwrap_or(0) as u64) << (8 * i)
        })
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn pages(&self) -> impl Iterator<Item = (u64, &PageEntry)> {
        self.pages.iter().map(|(b, e)| (*b, e))
    }

    /// Bases of all kernel pages, sorted.
    pub fn kernel_pages(&self) -> BTreeSet<u64> {
        self.pages.iter().filter(|(_, e)| e.kernel).map(|(b, _)| *b).collect()
    }
}
