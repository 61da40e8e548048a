//! Simulated Linux and Windows kernel address space layouts with KASLR.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::fixture::add_user_pages;
use crate::memory::{Backing, MemoryMap, PageSize, PAGE_2M, PAGE_4K};

pub const LINUX_IMAGE_START: u64 = 0xffff_ffff_8000_0000;
pub const LINUX_IMAGE_END: u64 = 0xffff_ffff_c000_0000;
pub const LINUX_MODULES_START: u64 = 0xffff_ffff_c000_0000;
/// Pages scanned after [`LINUX_MODULES_START`]; covers the largest module
/// offset plus a generous module area.
pub const LINUX_MODULE_WINDOW_PAGES: u64 = 3072;
pub const LINUX_MAX_MODULE_OFFSET: u64 = 1024;
pub const LINUX_DEFAULT_IMAGE_PAGES: u64 = 11;
pub const LINUX_DEFAULT_MODULE_PAGES: u64 = 1316;

pub const WINDOWS_START: u64 = 0xffff_f800_0000_0000;
pub const WINDOWS_END: u64 = 0xffff_f880_0000_0000;
pub const WINDOWS_SLOTS: u64 = (WINDOWS_END - WINDOWS_START) / PAGE_2M;
pub const WINDOWS_DEFAULT_IMAGE_SLOTS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Os {
    Linux,
    Windows,
}

impl std::str::FromStr for Os {
    type Err = String;

    fn from_str(s: &str) -> Result<Os, String> {
        match s.to_ascii_lowercase().as_str() {
            "linux" => Ok(Os::Linux),
            "windows" => Ok(Os::Windows),
            other => Err(format!("unknown OS `{other}` (expected linux or windows)")),
        }
    }
}

/// An address range scanned at a fixed stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRange {
    pub start: u64,
    pub end: u64,
    pub stride: u64,
}

impl SearchRange {
    pub fn len(&self) -> u64 {
        (self.end - self.start) / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn addresses(&self) -> impl Iterator<Item = u64> {
        let s = *self;
        (0..s.len()).map(move |i| s.start + i * s.stride)
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.start..self.end).contains(&addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoyConfig {
    /// Number of decoy allocations; each covers 1 to 4 consecutive slots.
    pub runs: usize,
}

impl Default for DecoyConfig {
    fn default() -> DecoyConfig {
        DecoyConfig { runs: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("{what} of {pages} pages does not fit in the randomization range")]
    TooLarge { what: &'static str, pages: u64 },
    #[error("malformed layout document: {0}")]
    Parse(String),
    #[error("layout page {0:#x} lies outside its range or overlaps another page")]
    Inconsistent(u64),
}

/// A randomized kernel layout and enough information to rebuild its
/// memory map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KaslrLayout {
    pub os: Os,
    pub seed: u64,
    pub image_base: u64,
    /// 2MiB kernel image pages.
    pub image_pages: Vec<u64>,
    /// 4KiB module pages (Linux only).
    pub module_pages: Vec<u64>,
    /// Other 2MiB kernel allocations (Windows decoys).
    pub decoy_pages: Vec<u64>,
    pub search: SearchRange,
    pub module_search: Option<SearchRange>,
    pub entropy_bits: u32,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Places a kernel image of `image_pages` 2MiB pages and `module_pages`
/// 4KiB module pages.
pub fn randomize_linux(seed: u64, image_pages: u64, module_pages: u64) -> Result<(KaslrLayout, MemoryMap), LayoutError> {
    let slots = (LINUX_IMAGE_END - LINUX_IMAGE_START) / PAGE_2M;
    if image_pages == 0 || image_pages > slots {
        return Err(LayoutError::TooLarge { what: "kernel image", pages: image_pages });
    }
    if LINUX_MAX_MODULE_OFFSET + module_pages > LINUX_MODULE_WINDOW_PAGES {
        return Err(LayoutError::TooLarge { what: "module area", pages: module_pages });
    }
    let mut r = rng(seed);
    let slot = r.gen_range(0..=slots - image_pages);
    let image_base = LINUX_IMAGE_START + slot * PAGE_2M;
    let offset = r.gen_range(1..=LINUX_MAX_MODULE_OFFSET);
    let module_base = LINUX_MODULES_START + offset * PAGE_4K;
    let layout = KaslrLayout {
        os: Os::Linux,
        seed,
        image_base,
        image_pages: (0..image_pages).map(|i| image_base + i * PAGE_2M).collect(),
        module_pages: (0..module_pages).map(|i| module_base + i * PAGE_4K).collect(),
        decoy_pages: Vec::new(),
        search: SearchRange { start: LINUX_IMAGE_START, end: LINUX_IMAGE_END, stride: PAGE_2M },
        module_search: Some(SearchRange {
            start: LINUX_MODULES_START,
            end: LINUX_MODULES_START + LINUX_MODULE_WINDOW_PAGES * PAGE_4K,
            stride: PAGE_4K,
        }),
        entropy_bits: 9,
    };
    let map = layout.memory_map()?;
    Ok((layout, map))
}

/// Places a kernel image of `image_slots` consecutive 2MiB slots, plus
/// optional decoy allocations that never touch the image or each other.
pub fn randomize_windows(
    seed: u64,
    image_slots: u64,
    decoys: Option<DecoyConfig>,
) -> Result<(KaslrLayout, MemoryMap), LayoutError> {
    if image_slots == 0 || image_slots > WINDOWS_SLOTS {
        return Err(LayoutError::TooLarge { what: "kernel image", pages: image_slots });
    }
    let mut r = rng(seed);
    let slot = r.gen_range(0..=WINDOWS_SLOTS - image_slots);
    let image_base = WINDOWS_START + slot * PAGE_2M;
    // occupied slots, including a one-slot gap on each side of every run
    let mut taken: BTreeSet<u64> = (slot.saturating_sub(1)..=slot + image_slots).collect();
    let mut decoy_pages = Vec::new();
    if let Some(cfg) = decoys {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < cfg.runs && attempts < cfg.runs * 100 {
            attempts += 1;
            let len = r.gen_range(1..=4u64);
            let start = r.gen_range(0..=WINDOWS_SLOTS - len);
            if (start.saturating_sub(1)..=start + len).any(|s| taken.contains(&s)) {
                continue;
            }
            taken.extend(start.saturating_sub(1)..=start + len);
            decoy_pages.extend((start..start + len).map(|s| WINDOWS_START + s * PAGE_2M));
            placed += 1;
        }
        decoy_pages.sort_unstable();
    }
    let layout = KaslrLayout {
        os: Os::Windows,
        seed,
        image_base,
        image_pages: (0..image_slots).map(|i| image_base + i * PAGE_2M).collect(),
        module_pages: Vec::new(),
        decoy_pages,
        search: SearchRange { start: WINDOWS_START, end: WINDOWS_END, stride: PAGE_2M },
        module_search: None,
        entropy_bits: 18,
    };
    let map = layout.memory_map()?;
    Ok((layout, map))
}

/// Every mapped kernel page base of the layout.
pub fn ground_truth(layout: &KaslrLayout) -> BTreeSet<u64> {
    layout.image_pages.iter().chain(&layout.module_pages).chain(&layout.decoy_pages).copied().collect()
}

impl KaslrLayout {
    /// Builds the memory map: kernel pages with seeded content plus the
    /// user pages attack programs rely on.
    pub fn memory_map(&self) -> Result<MemoryMap, LayoutError> {
        let mut map = MemoryMap::new();
        add_user_pages(&mut map);
        let backing = Backing::Seeded(self.seed ^ 0x6b65_726e_656c);
        let in_range = |p: u64| self.search.contains(p) || self.module_search.is_some_and(|m| m.contains(p));
        for &p in self.image_pages.iter().chain(&self.decoy_pages) {
            if !in_range(p) {
                return Err(LayoutError::Inconsistent(p));
            }
            map.map_page(p, PageSize::Large, true, backing).map_err(|_| LayoutError::Inconsistent(p))?;
        }
        for &p in &self.module_pages {
            if !in_range(p) {
                return Err(LayoutError::Inconsistent(p));
            }
            map.map_page(p, PageSize::Small, true, backing).map_err(|_| LayoutError::Inconsistent(p))?;
        }
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    /// Parses and validates an exported layout.
    pub fn from_json(text: &str) -> Result<KaslrLayout, LayoutError> {
        let layout: KaslrLayout = serde_json::from_str(text).map_err(|e| LayoutError::Parse(e.to_string()))?;
        layout.memory_map()?;
        Ok(layout)
    }

    /// Slot index of the image base inside the search range.
    pub fn image_slot(&self) -> u64 {
        (self.image_base - self.search.start) / self.search.stride
    }
}
