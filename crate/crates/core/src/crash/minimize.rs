//! Replay-driven reproduction, minimization and arbitrariness probing.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::iface::{read_le, write_le};
use crate::mutation::{AlterationRecord, Strategy};

/// Result of replaying an alteration log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub key: String,
    pub faulty_address: Option<u64>,
}

/// Re-runs the target with the original run seed, applying exactly the
/// given alterations at their recorded crossings.
pub trait ReplayOracle {
    fn replay(&mut self, log: &[AlterationRecord]) -> Option<ReplayOutcome>;
}

impl<F: FnMut(&[AlterationRecord]) -> Option<ReplayOutcome>> ReplayOracle for F {
    fn replay(&mut self, log: &[AlterationRecord]) -> Option<ReplayOutcome> {
        self(log)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimizedSet {
    pub sufficient: Vec<AlterationRecord>,
    pub necessary: Vec<AlterationRecord>,
    pub superfluous: Vec<AlterationRecord>,
}

impl MinimizedSet {
    /// Sufficient and necessary alterations in log order.
    pub fn essential(&self) -> Vec<AlterationRecord> {
        let mut v: Vec<AlterationRecord> = self.sufficient.iter().chain(&self.necessary).cloned().collect();
        v.sort_by_key(|r| (r.crossing_index, r.locus, r.offset));
        v
    }

    pub fn len(&self) -> usize {
        self.sufficient.len() + self.necessary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("crash stopped reproducing during minimization")]
pub struct ReplayDivergence;

pub fn reproduce<O: ReplayOracle + ?Sized>(log: &[AlterationRecord], key: &str, oracle: &mut O) -> bool {
    crashes(oracle, log, key)
}

fn crashes<O: ReplayOracle + ?Sized>(oracle: &mut O, log: &[AlterationRecord], key: &str) -> bool {
    oracle.replay(log).is_some_and(|o| o.key == key)
}

/// Walks the log from the last alteration to the first. An alteration that
/// crashes on its own is sufficient; one whose removal from the current
/// working set stops the crash is necessary; anything else is superfluous
/// and dropped from the working set.
pub fn minimize<O: ReplayOracle + ?Sized>(
    log: &[AlterationRecord],
    key: &str,
    oracle: &mut O,
) -> Result<MinimizedSet, ReplayDivergence> {
    let mut keep = alloc::vec![true; log.len()];
    let mut sufficient = Vec::new();
    let mut necessary = Vec::new();
    let mut superfluous = Vec::new();
    for i in (0..log.len()).rev() {
        if crashes(oracle, &log[i..=i], key) {
            sufficient.push(i);
            continue;
        }
        keep[i] = false;
        let without: Vec<AlterationRecord> = log
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| r.clone())
            .collect();
        if crashes(oracle, &without, key) {
            superfluous.push(i);
        } else {
            keep[i] = true;
            necessary.push(i);
        }
    }
    // A record judged necessary against a working set that still held
    // later-dropped alterations may no longer be needed.
    let mut j = 0;
    while j < necessary.len() {
        let i = necessary[j];
        keep[i] = false;
        let without: Vec<AlterationRecord> = log
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| r.clone())
            .collect();
        if crashes(oracle, &without, key) {
            necessary.remove(j);
            superfluous.push(i);
        } else {
            keep[i] = true;
            j += 1;
        }
    }
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| log[i].clone()).collect::<Vec<_>>()
    };
    let set = MinimizedSet {
        sufficient: pick(&sufficient),
        necessary: pick(&necessary),
        superfluous: pick(&superfluous),
    };
    let essential: Vec<AlterationRecord> = log
        .iter()
        .enumerate()
        .filter(|(i, _)| sufficient.contains(i) || necessary.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    if essential.is_empty() || !crashes(oracle, &essential, key) {
        return Err(ReplayDivergence);
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arbitrariness {
    /// The faulty address follows the altered value.
    Arbitrary,
    /// The faulty address does not move.
    Fixed,
    Inconclusive,
}

pub const PROBE_DELTAS: [u64; 3] = [8, 64, 4096];

/// Element sizes by which an index may be scaled on its way to an address.
const SCALES: [u64; 5] = [1, 2, 4, 8, 16];

/// Re-plays the essential alterations with each altered value shifted by
/// ±δ and watches how the faulty address moves. The crash is arbitrary
/// when the address follows the value, possibly scaled as an index.
///
/// Movement is measured against a replay of the unshifted essential set;
/// `faulty_address` is only used when that replay reports no address.
pub fn probe_arbitrariness<O: ReplayOracle + ?Sized>(
    min: &MinimizedSet,
    key: &str,
    faulty_address: u64,
    oracle: &mut O,
) -> Arbitrariness {
    let essential = min.essential();
    let faulty_address = match oracle.replay(&essential) {
        Some(o) if o.key == key => o.faulty_address.unwrap_or(faulty_address),
        _ => faulty_address,
    };
    let mut all_fixed = true;
    let mut probed = false;
    for (i, rec) in essential.iter().enumerate() {
        // A skipped call's altered value is its synthetic return.
        let value = match &rec.strategy {
            Strategy::SkipCall { synthetic_return } => synthetic_return,
            _ => &rec.new_bytes,
        };
        if value.is_empty() {
            continue;
        }
        let width = value.len().min(8);
        let base = read_le(value);
        for delta in PROBE_DELTAS {
            for sign in [1i64, -1] {
                let shift = if sign > 0 { delta } else { delta.wrapping_neg() };
                let mut probe = essential.clone();
                let shifted = write_le(base.wrapping_add(shift), width);
                match &mut probe[i].strategy {
                    Strategy::SkipCall { synthetic_return } => *synthetic_return = shifted,
                    _ => probe[i].new_bytes = shifted,
                }
                probed = true;
                match oracle.replay(&probe) {
                    Some(o) if o.key == key => {
                        let addr = o.faulty_address.unwrap_or(faulty_address);
                        let moved = addr.wrapping_sub(faulty_address);
                        if SCALES.iter().any(|s| moved == shift.wrapping_mul(*s)) {
                            return Arbitrariness::Arbitrary;
                        }
                        if addr != faulty_address {
                            all_fixed = false;
                        }
                    }
                    _ => all_fixed = false,
                }
            }
        }
    }
    if probed && all_fixed {
        Arbitrariness::Fixed
    } else {
        Arbitrariness::Inconclusive
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iface::ValueRole;
    use crate::wire::{CrossingKind, Locus};
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn rec(i: u64, value: u64) -> AlterationRecord {
        AlterationRecord {
            crossing_index: i,
            kind: CrossingKind::CallExit,
            symbol: "f".into(),
            locus: Some(Locus::ReturnValue),
            offset: 0,
            strategy: Strategy::IntRandom,
            old_bytes: vec![0; 8],
            new_bytes: value.to_le_bytes().to_vec(),
            target_type_name: "long".into(),
            role: ValueRole::Other,
        }
    }

    /// Crashes iff every crossing in `needed` carries an alteration.
    fn oracle(needed: &'static [u64]) -> impl FnMut(&[AlterationRecord]) -> Option<ReplayOutcome> {
        move |log: &[AlterationRecord]| {
            let present: BTreeSet<u64> = log.iter().map(|r| r.crossing_index).collect();
            needed.iter().all(|n| present.contains(n)).then(|| ReplayOutcome {
                key: "k".into(),
                faulty_address: None,
            })
        }
    }

    #[test]
    fn single_cause_is_sufficient() {
        let log = vec![rec(0, 1), rec(1, 1), rec(2, 1)];
        let m = minimize(&log, "k", &mut oracle(&[2])).unwrap();
        assert_eq!(m.sufficient, vec![rec(2, 1)]);
        assert!(m.necessary.is_empty());
        assert_eq!(m.superfluous.len(), 2);
    }

    #[test]
    fn two_step_cause_is_necessary() {
        let log = vec![rec(0, 1), rec(1, 1), rec(2, 1), rec(3, 1)];
        let m = minimize(&log, "k", &mut oracle(&[1, 3])).unwrap();
        assert!(m.sufficient.is_empty());
        assert_eq!(m.necessary, vec![rec(1, 1), rec(3, 1)]);
        assert_eq!(m.superfluous, vec![rec(0, 1), rec(2, 1)]);
    }

    #[test]
    fn repair_of_a_dropped_alteration_is_not_kept() {
        // Crossing 2 blocks the crash at 5 unless crossing 3 undoes it.
        let log = vec![rec(2, 1), rec(3, 1), rec(5, 1)];
        let mut o = |log: &[AlterationRecord]| {
            let has = |i| log.iter().any(|r| r.crossing_index == i);
            (has(5) && (!has(2) || has(3))).then(|| ReplayOutcome {
                key: "k".into(),
                faulty_address: None,
            })
        };
        let m = minimize(&log, "k", &mut o).unwrap();
        assert_eq!(m.sufficient, vec![rec(5, 1)]);
        assert!(m.necessary.is_empty());
        assert_eq!(m.superfluous.len(), 2);
    }

    #[test]
    fn partition_covers_log() {
        let log = vec![rec(0, 1), rec(1, 1), rec(2, 1)];
        let m = minimize(&log, "k", &mut oracle(&[0, 2])).unwrap();
        assert_eq!(m.sufficient.len() + m.necessary.len() + m.superfluous.len(), log.len());
    }

    #[test]
    fn non_reproducing_log_diverges() {
        let log = vec![rec(0, 1)];
        let mut never = |_: &[AlterationRecord]| None;
        assert_eq!(minimize(&log, "k", &mut never), Err(ReplayDivergence));
    }

    #[test]
    fn address_tracking_value_is_arbitrary() {
        let m = MinimizedSet {
            sufficient: vec![rec(0, 0xdead_0000)],
            ..MinimizedSet::default()
        };
        let mut o = |log: &[AlterationRecord]| {
            Some(ReplayOutcome {
                key: "k".into(),
                faulty_address: Some(read_le(&log[0].new_bytes)),
            })
        };
        assert_eq!(
            probe_arbitrariness(&m, "k", 0xdead_0000, &mut o),
            Arbitrariness::Arbitrary
        );
    }

    #[test]
    fn masked_value_is_arbitrary_only_at_page_delta() {
        let m = MinimizedSet {
            sufficient: vec![rec(0, 0xdead_0010)],
            ..MinimizedSet::default()
        };
        let mut o = |log: &[AlterationRecord]| {
            let v = read_le(&log[0].new_bytes);
            Some(ReplayOutcome {
                key: "k".into(),
                faulty_address: Some(v & !0xfff),
            })
        };
        assert_eq!(
            probe_arbitrariness(&m, "k", 0xdead_0000, &mut o),
            Arbitrariness::Arbitrary
        );
    }

    #[test]
    fn constant_address_is_fixed() {
        let m = MinimizedSet {
            sufficient: vec![rec(0, 5)],
            ..MinimizedSet::default()
        };
        let mut o = |_: &[AlterationRecord]| {
            Some(ReplayOutcome {
                key: "k".into(),
                faulty_address: Some(0xdead_0000),
            })
        };
        assert_eq!(probe_arbitrariness(&m, "k", 0xdead_0000, &mut o), Arbitrariness::Fixed);
    }

    #[test]
    fn skipped_call_is_probed_through_its_synthetic_return() {
        let mut skip = rec(0, 0);
        skip.kind = CrossingKind::CallEntry;
        skip.locus = None;
        skip.new_bytes.clear();
        skip.strategy = Strategy::SkipCall {
            synthetic_return: 0x7000_0000u64.to_le_bytes().to_vec(),
        };
        let m = MinimizedSet {
            sufficient: vec![skip],
            ..MinimizedSet::default()
        };
        let mut o = |log: &[AlterationRecord]| match &log[0].strategy {
            Strategy::SkipCall { synthetic_return } => Some(ReplayOutcome {
                key: "k".into(),
                faulty_address: Some(read_le(synthetic_return) + 16),
            }),
            _ => None,
        };
        assert_eq!(
            probe_arbitrariness(&m, "k", 0x7000_0010, &mut o),
            Arbitrariness::Arbitrary
        );
    }

    #[test]
    fn scaled_index_is_arbitrary() {
        let m = MinimizedSet {
            sufficient: vec![rec(0, 1000)],
            ..MinimizedSet::default()
        };
        let mut o = |log: &[AlterationRecord]| {
            Some(ReplayOutcome {
                key: "k".into(),
                faulty_address: Some(0x60_0000 + 8 * read_le(&log[0].new_bytes)),
            })
        };
        assert_eq!(
            probe_arbitrariness(&m, "k", 0x60_0000 + 8000, &mut o),
            Arbitrariness::Arbitrary
        );
    }
}
