//! Adaptive alteration threshold.
//!
//! Crossings before the threshold are altered rarely, so once shallow
//! crashes stop appearing the fuzzer moves its attention deeper into the
//! API usage.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub threshold: u64,
    pub runs_since_new_crash: u32,
    /// Increment applied at the last raise.
    pub step: u64,
    /// Crossing counts of runs since the last raise.
    window: Vec<u64>,
    pub max_crossing_seen: u64,
    pub saturated: bool,
}

impl ThresholdState {
    pub fn new(initial: u64) -> Self {
        ThresholdState {
            threshold: initial,
            runs_since_new_crash: 0,
            step: 1,
            window: Vec::new(),
            max_crossing_seen: 0,
            saturated: false,
        }
    }

    /// Records the outcome of one run. `crossings` is the number of
    /// crossings the run performed; `fixed_step` overrides the adaptive
    /// step.
    pub fn update(&mut self, new_unique_crashes: usize, crossings: u64, patience: u32, fixed_step: Option<u64>) {
        self.window.push(crossings);
        if crossings > 0 {
            self.max_crossing_seen = self.max_crossing_seen.max(crossings - 1);
        }
        if new_unique_crashes > 0 {
            self.runs_since_new_crash = 0;
            return;
        }
        self.runs_since_new_crash += 1;
        if self.runs_since_new_crash >= patience {
            let mean = self.window.iter().sum::<u64>() / self.window.len() as u64;
            self.step = fixed_step.unwrap_or(mean).max(1);
            self.threshold += self.step;
            self.runs_since_new_crash = 0;
            self.window.clear();
            if self.threshold > 2 * self.max_crossing_seen {
                self.saturated = true;
            }
        }
    }
}

impl Default for ThresholdState {
    fn default() -> Self {
        ThresholdState::new(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raises_after_patience_runs() {
        let mut t = ThresholdState::new(0);
        for _ in 0..19 {
            t.update(0, 10, 20, None);
        }
        assert_eq!(t.threshold, 0);
        t.update(0, 10, 20, None);
        assert_eq!(t.threshold, 10);
        assert_eq!(t.runs_since_new_crash, 0);
    }

    #[test]
    fn new_crash_resets_counter() {
        let mut t = ThresholdState::new(3);
        t.update(0, 10, 20, None);
        t.update(1, 10, 20, None);
        assert_eq!(t.runs_since_new_crash, 0);
        assert_eq!(t.threshold, 3);
    }

    #[test]
    fn saturation_beyond_twice_max_crossing() {
        let mut t = ThresholdState::new(0);
        let mut raises = 0;
        while !t.saturated {
            t.update(0, 5, 1, None);
            raises += 1;
            assert!(raises < 10);
        }
        assert!(t.threshold > 2 * 4);
    }

    #[test]
    fn step_is_at_least_one() {
        let mut t = ThresholdState::new(0);
        t.update(0, 0, 1, None);
        assert_eq!(t.threshold, 1);
    }
}
