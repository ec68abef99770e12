//! Crash triage: deduplication, false-positive detection, reproduction,
//! minimization, arbitrariness probing and classification.

pub mod classify;
pub mod dedup;
pub mod minimize;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::iface::{ComponentRole, InterfaceSpec};
use crate::mutation::AlterationRecord;
use crate::wire::{AccessKind, CrashPayload, Frame};

pub use classify::{classify_civ, classify_civ_with_replay, executed_variant, return_value_class, CivClass};
pub use dedup::{dedup_key, CrashDatabase, DedupOutcome};
pub use minimize::{
    minimize, probe_arbitrariness, reproduce, Arbitrariness, MinimizedSet, ReplayDivergence, ReplayOracle,
    ReplayOutcome, PROBE_DELTAS,
};

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributedFrame {
    pub symbol: String,
    pub offset: u32,
    pub label: String,
    pub component: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    /// The first attributed frame belongs to a trusted component.
    Valid { victim: String },
    /// The malicious component crashed on its own corrupted data.
    FalsePositive,
    /// No frame belongs to any known component.
    Unattributable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no stack frame belongs to a known component")]
pub struct UnattributableStack;

pub fn attribute(frames: &[Frame], spec: &InterfaceSpec) -> Vec<AttributedFrame> {
    frames
        .iter()
        .map(|f| AttributedFrame {
            symbol: f.symbol.clone(),
            offset: f.offset,
            label: f.label.clone(),
            component: spec.component_for_label(&f.label).map(|c| c.name.clone()),
        })
        .collect()
}

/// Walks the stack from the innermost frame to the first frame belonging
/// to a component; the crash is a false positive when that component is
/// the malicious one.
pub fn is_false_positive(frames: &[AttributedFrame], spec: &InterfaceSpec) -> Result<bool, UnattributableStack> {
    let first = frames
        .iter()
        .find_map(|f| f.component.as_deref())
        .ok_or(UnattributableStack)?;
    Ok(spec.component(first).map(|c| c.role) == Some(ComponentRole::Malicious))
}

pub fn verdict(frames: &[AttributedFrame], spec: &InterfaceSpec) -> Verdict {
    match is_false_positive(frames, spec) {
        Err(UnattributableStack) => Verdict::Unattributable,
        Ok(true) => Verdict::FalsePositive,
        Ok(false) => Verdict::Valid {
            victim: frames.iter().find_map(|f| f.component.clone()).unwrap_or_default(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub key: String,
    pub access: AccessKind,
    pub faulty_address: Option<u64>,
    pub crossing_index: u64,
    pub frames: Vec<AttributedFrame>,
    pub verdict: Verdict,
    pub run: u64,
    pub run_seed: u64,
    pub alteration_log: Vec<AlterationRecord>,
    pub reproduced: bool,
    pub minimized: Option<MinimizedSet>,
    /// Set when minimization was attempted but the crash stopped
    /// reproducing part way through.
    pub replay_divergence: bool,
    pub arbitrary: Option<Arbitrariness>,
    pub civ_classes: BTreeSet<CivClass>,
    /// Runs that produced this key, the first one included.
    pub occurrences: u64,
}

impl CrashRecord {
    pub fn new(
        payload: &CrashPayload,
        spec: &InterfaceSpec,
        run: u64,
        run_seed: u64,
        log: Vec<AlterationRecord>,
    ) -> Self {
        let frames = attribute(&payload.frames, spec);
        let verdict = verdict(&frames, spec);
        CrashRecord {
            key: dedup_key(&payload.frames, payload.access),
            access: payload.access,
            faulty_address: payload.faulty_address,
            crossing_index: payload.crossing_index,
            frames,
            verdict,
            run,
            run_seed,
            alteration_log: log,
            reproduced: false,
            minimized: None,
            replay_divergence: false,
            arbitrary: None,
            civ_classes: BTreeSet::new(),
            occurrences: 1,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.verdict, Verdict::Valid { .. })
    }

    pub fn victim(&self) -> Option<&str> {
        match &self.verdict {
            Verdict::Valid { victim } => Some(victim),
            _ => None,
        }
    }
}
