//! Deciding whether, where and how to alter data at a crossing.

pub mod corpus;
pub mod strategy;
pub mod threshold;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crossing::{Shape, Slot};
use crate::iface::{Direction, InterfaceSpec};
use crate::wire::{Command, Crossing, CrossingKind, Directive, Locus};

pub use corpus::{Corpus, Provenance};
pub use strategy::{AlterationRecord, Limit, Strategy, StrategyId};
pub use threshold::ThresholdState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    pub p_hot: f64,
    pub p_cold: f64,
    /// Upper bound on elements altered at one crossing.
    pub max_loci: usize,
    pub skip_call_probability: f64,
    pub reuse_probability: f64,
    pub mutation_probability: f64,
    pub corpus_cap: usize,
    pub patience: u32,
    /// Replaces the adaptive threshold step when set.
    pub step: Option<u64>,
    pub initial_threshold: u64,
    /// Probability of skipping an alteration pattern already known to
    /// produce only false positives.
    pub avoid_non_viable: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            p_hot: 1.0,
            p_cold: 0.1,
            max_loci: 4,
            skip_call_probability: 0.1,
            reuse_probability: 0.3,
            mutation_probability: 0.25,
            corpus_cap: corpus::DEFAULT_POOL_CAP,
            patience: 20,
            step: None,
            initial_threshold: 0,
            avoid_non_viable: 0.9,
        }
    }
}

/// Loci whose data the malicious side controls at this crossing.
pub fn alterable_loci(crossing: &Crossing, direction: Direction) -> Vec<Locus> {
    let mut out: Vec<Locus> = crossing
        .values
        .iter()
        .map(|(l, _)| *l)
        .filter(|l| locus_alterable(*l, crossing.kind, direction))
        .collect();
    out.extend(crossing.snapshots.iter().map(|s| Locus::SharedByte {
        region: s.region,
        offset: 0,
    }));
    out
}

pub fn locus_alterable(locus: Locus, kind: CrossingKind, direction: Direction) -> bool {
    matches!(
        (direction, kind, locus),
        (_, _, Locus::SharedByte { .. })
            | (Direction::Sandbox, CrossingKind::CallExit, Locus::ReturnValue)
            | (Direction::Sandbox, CrossingKind::CallbackEntry, Locus::CallbackArg(_))
            | (Direction::Safebox, CrossingKind::CallEntry, Locus::Arg(_))
            | (Direction::Safebox, CrossingKind::CallbackExit, Locus::CallbackReturn)
    )
}

pub fn decide_alter<R: Rng + ?Sized>(
    crossing_index: u64,
    state: &ThresholdState,
    config: &MutationConfig,
    rng: &mut R,
) -> bool {
    let p = if crossing_index >= state.threshold {
        config.p_hot
    } else {
        config.p_cold
    };
    rng.gen_bool(p.clamp(0.0, 1.0))
}

/// Alteration pattern remembered as producing only false positives.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pattern {
    pub symbol: String,
    pub locus: Option<Locus>,
    pub strategy: StrategyId,
}

impl Pattern {
    pub fn of(record: &AlterationRecord) -> Self {
        Pattern {
            symbol: record.symbol.clone(),
            locus: record.locus,
            strategy: record.strategy_id(),
        }
    }
}

/// Per-run alteration engine. The corpus and non-viable set are handed
/// from run to run by the campaign.
#[derive(Debug, Clone)]
pub struct Engine {
    pub config: MutationConfig,
    pub direction: Direction,
    pub corpus: Corpus,
    pub non_viable: BTreeSet<Pattern>,
    probes: Vec<u64>,
}

impl Engine {
    pub fn new(spec: &InterfaceSpec, config: MutationConfig) -> Self {
        Engine {
            corpus: Corpus::new(config.corpus_cap),
            config,
            direction: spec.direction,
            non_viable: BTreeSet::new(),
            probes: spec.probe_addresses(),
        }
    }

    /// Stores every pointer and integer element seen at a crossing.
    pub fn observe(&mut self, slots: &[Slot]) {
        for slot in slots {
            for e in &slot.elements {
                if matches!(e.shape, Shape::Pointer | Shape::Integer { .. }) {
                    let v = &slot.bytes[e.offset..e.offset + e.len];
                    self.corpus.insert(&e.type_name, v, Provenance::Observed);
                }
            }
        }
    }

    /// Proposes alterations for one crossing. `return_width` is the byte
    /// width of the return value, used for skipped calls.
    pub fn propose<R: Rng + ?Sized>(
        &mut self,
        crossing: &Crossing,
        slots: &[Slot],
        return_width: usize,
        is_api_call: bool,
        rng: &mut R,
    ) -> Vec<AlterationRecord> {
        let base = |locus, strategy, offset, old, new, type_name: &str, role| AlterationRecord {
            crossing_index: crossing.crossing_index,
            kind: crossing.kind,
            symbol: crossing.symbol.clone(),
            locus,
            offset,
            strategy,
            old_bytes: old,
            new_bytes: new,
            target_type_name: type_name.into(),
            role,
        };
        if is_api_call && crossing.kind == CrossingKind::CallEntry && rng.gen_bool(self.config.skip_call_probability) {
            let ret = strategy::synthetic_return(return_width, rng);
            let rec = base(
                None,
                Strategy::SkipCall { synthetic_return: ret },
                0,
                Vec::new(),
                Vec::new(),
                "",
                crate::iface::ValueRole::Other,
            );
            if !self.avoid(&rec, rng) {
                return alloc::vec![rec];
            }
        }

        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for (si, slot) in slots.iter().enumerate() {
            if !locus_alterable(slot.locus, crossing.kind, self.direction) {
                continue;
            }
            for ei in 0..slot.elements.len() {
                candidates.push((si, ei));
            }
        }
        if candidates.is_empty() {
            return Vec::new();
        }
        let mut k = 1;
        while k < self.config.max_loci && rng.gen_bool(0.5) {
            k += 1;
        }
        candidates.shuffle(rng);
        candidates.truncate(k);
        candidates.sort_unstable();

        let mut out = Vec::new();
        for (si, ei) in candidates {
            let slot = &slots[si];
            let e = &slot.elements[ei];
            let (strategy, rel, old, new) =
                strategy::mutate_element(e, &slot.bytes, &self.probes, &mut self.corpus, &self.config, rng);
            let rec = base(
                Some(slot.locus),
                strategy,
                (e.offset + rel) as u32,
                old,
                new,
                &e.type_name,
                e.role,
            );
            if self.avoid(&rec, rng) {
                continue;
            }
            if rec.strategy_id().is_pointer() {
                self.corpus.insert(&e.type_name, &rec.new_bytes, Provenance::Injected);
            }
            out.push(rec);
        }
        out
    }

    fn avoid<R: Rng + ?Sized>(&self, rec: &AlterationRecord, rng: &mut R) -> bool {
        self.non_viable.contains(&Pattern::of(rec)) && rng.gen_bool(self.config.avoid_non_viable)
    }
}

/// Builds the command that applies `records` to `crossing`. Records are
/// applied over the live values so only the recorded bytes change.
pub fn command_for(crossing: &Crossing, records: &[&AlterationRecord]) -> Command {
    if let Some(skip) = records.iter().find_map(|r| match &r.strategy {
        Strategy::SkipCall { synthetic_return } => Some(synthetic_return.clone()),
        _ => None,
    }) {
        return Command::SkipCall(skip);
    }
    let mut values: BTreeMap<Locus, Vec<u8>> = BTreeMap::new();
    let mut shared = Vec::new();
    for r in records {
        match r.locus {
            Some(Locus::SharedByte { region, .. }) => shared.push(Directive {
                locus: Locus::SharedByte {
                    region,
                    offset: r.offset,
                },
                bytes: r.new_bytes.clone(),
            }),
            Some(l) => {
                let Some(live) = crossing.value(l) else { continue };
                let v = values.entry(l).or_insert_with(|| live.to_vec());
                let at = r.offset as usize;
                if at + r.new_bytes.len() <= v.len() {
                    v[at..at + r.new_bytes.len()].copy_from_slice(&r.new_bytes);
                }
            }
            None => {}
        }
    }
    let mut directives: Vec<Directive> = values
        .into_iter()
        .map(|(locus, bytes)| Directive { locus, bytes })
        .collect();
    directives.extend(shared);
    if directives.is_empty() {
        Command::Proceed
    } else {
        Command::Alter(directives)
    }
}

/// Whether a logged record applies to this crossing during replay.
pub fn record_matches(record: &AlterationRecord, crossing: &Crossing) -> bool {
    if record.crossing_index != crossing.crossing_index
        || record.kind != crossing.kind
        || record.symbol != crossing.symbol
    {
        return false;
    }
    match record.locus {
        None => crossing.kind == CrossingKind::CallEntry,
        Some(Locus::SharedByte { region, .. }) => crossing
            .snapshot(region)
            .is_some_and(|s| record.offset as usize + record.new_bytes.len() <= s.bytes.len()),
        Some(l) => crossing
            .value(l)
            .is_some_and(|v| record.offset as usize + record.new_bytes.len() <= v.len()),
    }
}
