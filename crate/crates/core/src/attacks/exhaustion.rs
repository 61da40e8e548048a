//! Recovering load-buffer and miss-slot sizes from the exhaustion probe's
//! behavior alone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixture::{fixture_map, FEEDBACK, KERNEL_MAPPED, KERNEL_UNMAPPED};
use super::harness::{Harness, CHAIN_SEED};
use super::measure::{calibrate, Calibration};
use super::probe::exhaustion_harness;
use super::{AttackError, SimOptions, DEFAULT_IMUL_COUNT};
use crate::isa::{DecodedProgram, Reg};
use crate::memory::MemoryMap;
use crate::pipeline::{Core, Terminal};
use crate::uarch::MicroArchProfile;

/// Largest load count tried before giving up on finding a stall.
const SEARCH_LIMIT: usize = 512;

/// Buffer sizes inferred from when the feedback load stops completing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferParams {
    pub profile: String,
    /// Fewest loads of an unmapped page that keep the feedback load from
    /// completing.
    pub unmapped_stall: Option<usize>,
    /// Fewest loads of a mapped kernel page that do the same.
    pub mapped_stall: Option<usize>,
    /// Parallel miss slots, when the two thresholds differ.
    pub parallel_miss_slots: Option<usize>,
    /// Load buffer entries, when the two thresholds differ.
    pub load_buffer_entries: Option<usize>,
    /// Set when mapped and unmapped loads stall at the same count.
    pub universal_stall: Option<usize>,
}

struct Search {
    profile: MicroArchProfile,
    map: Arc<MemoryMap>,
    sim: SimOptions,
    calibration: Calibration,
}

impl Search {
    fn stalls(&self, addr: u64, loads: usize) -> Result<bool, AttackError> {
        let h = Harness::new(&self.profile, DEFAULT_IMUL_COUNT, true);
        let prog = DecodedProgram::new(&exhaustion_harness(&h, loads)?).with_init(vec![
            (Reg::R9, CHAIN_SEED),
            (Reg::R10, addr),
            (Reg::R11, FEEDBACK),
        ]);
        let mut core = Core::new(&self.profile, self.map.clone(), self.sim.core_options(loads as u64));
        let r = core.run(&prog);
        match r.terminal {
            Terminal::Exited => Ok(!self.calibration.is_cached(r.registers[14])),
            t => Err(AttackError::Terminated(t)),
        }
    }

    /// Binary search for the first stalling count, assuming more loads never
    /// un-stall the feedback load.
    fn first_stall(&self, addr: u64) -> Result<Option<usize>, AttackError> {
        if !self.stalls(addr, SEARCH_LIMIT)? {
            return Ok(None);
        }
        let (mut lo, mut hi) = (0, SEARCH_LIMIT);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.stalls(addr, mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(Some(hi))
    }
}

/// Fewest loads of `addr` after which a following feedback load no longer
/// completes inside the speculation window.
pub fn min_stalling_loads(
    profile: &MicroArchProfile,
    map: Arc<MemoryMap>,
    addr: u64,
    sim: &SimOptions,
) -> Result<Option<usize>, AttackError> {
    let search = Search { profile: profile.clone(), map, sim: *sim, calibration: calibrate(profile, sim)? };
    search.first_stall(addr)
}

/// Runs the stall search on a mapped and an unmapped kernel page.
pub fn recover_buffer_params(profile: &MicroArchProfile, sim: &SimOptions) -> Result<BufferParams, AttackError> {
    let search = Search {
        profile: profile.clone(),
        map: Arc::new(fixture_map()),
        sim: *sim,
        calibration: calibrate(profile, sim)?,
    };
    let unmapped = search.first_stall(KERNEL_UNMAPPED)?;
    let mapped = search.first_stall(KERNEL_MAPPED)?;
    let same = unmapped.is_some() && unmapped == mapped;
    Ok(BufferParams {
        profile: profile.name.clone(),
        unmapped_stall: unmapped,
        mapped_stall: mapped,
        parallel_miss_slots: if same { None } else { unmapped },
        load_buffer_entries: if same { None } else { mapped },
        universal_stall: if same { unmapped } else { None },
    })
}
