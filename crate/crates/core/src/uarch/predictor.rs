use rustc_hash::FxHashMap;

use super::ForwardPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Direction of a branch at `from` jumping to `to` (same address space).
    pub fn of(from: usize, to: usize) -> Direction {
        if to > from {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }
}

/// Static prediction for unseen branches plus an untagged, unbounded table
/// of 2-bit saturating counters.
#[derive(Debug, Clone)]
pub struct PredictorState {
    static_forward: ForwardPrediction,
    table: FxHashMap<u64, u8>,
}

impl PredictorState {
    pub fn new(static_forward: ForwardPrediction) -> PredictorState {
        PredictorState { static_forward, table: FxHashMap::default() }
    }

    pub fn static_prediction(&self, direction: Direction) -> bool {
        match direction {
            Direction::Backward => true,
            Direction::Forward => self.static_forward == ForwardPrediction::Taken,
        }
    }

    pub fn predict(&self, address: u64, direction: Direction) -> bool {
        match self.table.get(&address) {
            Some(&c) => c >= 2,
            None => self.static_prediction(direction),
        }
    }

    pub fn train(&mut self, address: u64, direction: Direction, taken: bool) {
        let initial = if self.static_prediction(direction) { 2 } else { 1 };
        let c = self.table.entry(address).or_insert(initial);
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    pub fn counter(&self, address: u64) -> Option<u8> {
        self.table.get(&address).copied()
    }

    /// Forces a counter value, e.g. to model a predictor trained beforehand.
    pub fn set_counter(&mut self, address: u64, value: u8) {
        assert!(value <= 3, "2-bit counter value {value} out of range");
        self.table.insert(address, value);
    }

    pub fn seen(&self) -> usize {
        self.table.len()
    }
}
