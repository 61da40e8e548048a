//! A small fixed address space used by the corpus listings, calibration
//! and tests.

use crate::memory::{Backing, MemoryMap, PageSize, PAGE_4K};

/// Seeded user data pages.
pub const USER_DATA: u64 = 0x0040_0000;
pub const USER_DATA_PAGES: u64 = 16;
/// User page whose lines serve as feedback addresses.
pub const FEEDBACK: u64 = 0x0060_0000;
pub const FEEDBACK_PAGES: u64 = 4;
/// User page that batch probes write their measurements to.
pub const RESULTS: u64 = 0x0070_0000;
pub const RESULTS_PAGES: u64 = 16;
/// A mapped 2MiB kernel page whose bytes are all 0xa5.
pub const KERNEL_MAPPED: u64 = 0xffff_ffff_8100_0000;
pub const KERNEL_FILL: u8 = 0xa5;
/// A kernel address with nothing mapped.
pub const KERNEL_UNMAPPED: u64 = 0xffff_ffff_8000_0000;
pub const USER_SEED: u64 = 0x5eed;

/// Adds the user pages every attack program relies on.
pub fn add_user_pages(map: &mut MemoryMap) {
    map.map_range(USER_DATA, USER_DATA_PAGES, PageSize::Small, false, Backing::Seeded(USER_SEED))
        .expect("user data pages are free");
    map.map_range(FEEDBACK, FEEDBACK_PAGES, PageSize::Small, false, Backing::Fill(0))
        .expect("feedback pages are free");
    map.map_range(RESULTS, RESULTS_PAGES, PageSize::Small, false, Backing::Fill(0))
        .expect("results pages are free");
}

/// User pages plus one mapped kernel page at [`KERNEL_MAPPED`].
pub fn fixture_map() -> MemoryMap {
    let mut map = MemoryMap::new();
    add_user_pages(&mut map);
    map.map_page(KERNEL_MAPPED, PageSize::Large, true, Backing::Fill(KERNEL_FILL))
        .expect("kernel page is free");
    map
}

/// Address of the `i`-th feedback line.
pub fn feedback_line(i: usize) -> u64 {
    FEEDBACK + 64 * i as u64
}

pub fn user_data_end() -> u64 {
    USER_DATA + USER_DATA_PAGES * PAGE_4K
}
