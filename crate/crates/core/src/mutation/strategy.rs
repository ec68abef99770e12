//! Alteration strategies and the records they produce.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crossing::{Element, Shape};
use crate::iface::{read_le, write_le, ValueRole};
use crate::wire::{CrossingKind, Locus};

use super::corpus::Corpus;
use super::MutationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    PtrInvalid,
    PtrZeroPage,
    PtrReplaySameType,
    PtrReplaceDiffType,
    PtrOffsetShift,
    IntIncDec,
    IntLimit,
    IntRandom,
    ByteEditAtOffset,
    SkipCall,
    LockScramble,
}

impl StrategyId {
    pub fn is_pointer(self) -> bool {
        matches!(
            self,
            StrategyId::PtrInvalid
                | StrategyId::PtrZeroPage
                | StrategyId::PtrReplaySameType
                | StrategyId::PtrReplaceDiffType
                | StrategyId::PtrOffsetShift
        )
    }

    pub fn is_integer(self) -> bool {
        matches!(
            self,
            StrategyId::IntIncDec | StrategyId::IntLimit | StrategyId::IntRandom
        )
    }

    /// Whether this strategy may be applied to an element of `shape`.
    pub fn legal_for(self, shape: Shape) -> bool {
        match shape {
            Shape::Pointer => self.is_pointer(),
            Shape::Integer { .. } => self.is_integer(),
            Shape::Bytes => self == StrategyId::ByteEditAtOffset,
            Shape::Lock => self == StrategyId::LockScramble,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limit {
    Zero,
    MaxSigned,
    MinSigned,
    MaxUnsigned,
}

impl Limit {
    pub fn value(self, width: usize) -> u64 {
        let bits = (width.min(8) * 8) as u32;
        let max_unsigned = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        match self {
            Limit::Zero => 0,
            Limit::MaxSigned => max_unsigned >> 1,
            Limit::MinSigned => (max_unsigned >> 1) + 1,
            Limit::MaxUnsigned => max_unsigned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteEdit {
    Inc,
    Dec,
    Replace(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Strategy {
    PtrInvalid { address: u64 },
    PtrZeroPage { address: u64 },
    PtrReplaySameType,
    PtrReplaceDiffType { source_type: String },
    PtrOffsetShift { delta: i64 },
    IntIncDec { delta: i64 },
    IntLimit { limit: Limit },
    IntRandom,
    ByteEditAtOffset { offset: u32, edit: ByteEdit },
    SkipCall { synthetic_return: Vec<u8> },
    LockScramble,
}

impl Strategy {
    pub fn id(&self) -> StrategyId {
        match self {
            Strategy::PtrInvalid { .. } => StrategyId::PtrInvalid,
            Strategy::PtrZeroPage { .. } => StrategyId::PtrZeroPage,
            Strategy::PtrReplaySameType => StrategyId::PtrReplaySameType,
            Strategy::PtrReplaceDiffType { .. } => StrategyId::PtrReplaceDiffType,
            Strategy::PtrOffsetShift { .. } => StrategyId::PtrOffsetShift,
            Strategy::IntIncDec { .. } => StrategyId::IntIncDec,
            Strategy::IntLimit { .. } => StrategyId::IntLimit,
            Strategy::IntRandom => StrategyId::IntRandom,
            Strategy::ByteEditAtOffset { .. } => StrategyId::ByteEditAtOffset,
            Strategy::SkipCall { .. } => StrategyId::SkipCall,
            Strategy::LockScramble => StrategyId::LockScramble,
        }
    }
}

/// One alteration performed at one crossing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlterationRecord {
    pub crossing_index: u64,
    pub kind: CrossingKind,
    pub symbol: String,
    /// Altered value; `None` for a skipped call. Shared-memory alterations
    /// name the region with offset 0.
    pub locus: Option<Locus>,
    /// Byte offset within the value where `new_bytes` is written.
    pub offset: u32,
    pub strategy: Strategy,
    pub old_bytes: Vec<u8>,
    pub new_bytes: Vec<u8>,
    pub target_type_name: String,
    pub role: ValueRole,
}

impl AlterationRecord {
    pub fn strategy_id(&self) -> StrategyId {
        self.strategy.id()
    }
}

/// Picks a strategy legal for `element` and computes its new bytes.
/// Returns the strategy, the byte offset relative to the element start,
/// and the old and new bytes at that offset.
pub fn mutate_element<R: Rng + ?Sized>(
    element: &Element,
    value: &[u8],
    probes: &[u64],
    corpus: &mut Corpus,
    config: &MutationConfig,
    rng: &mut R,
) -> (Strategy, usize, Vec<u8>, Vec<u8>) {
    let old = value[element.offset..element.offset + element.len].to_vec();
    let width = element.len;
    match element.shape {
        Shape::Pointer => {
            let (strategy, new) = mutate_pointer(element, &old, probes, corpus, config, rng);
            (strategy, 0, old, new)
        }
        Shape::Integer { .. } => {
            let (strategy, new) = mutate_integer(&old, rng);
            (strategy, 0, old, new)
        }
        Shape::Lock => {
            let cur = read_le(&old);
            let mask = if width >= 8 {
                u64::MAX
            } else {
                (1u64 << (8 * width)) - 1
            };
            let mut v = 0;
            while v == 0 || v == cur {
                v = rng.gen::<u64>() & mask;
            }
            (Strategy::LockScramble, 0, old, write_le(v, width))
        }
        Shape::Bytes => {
            let at = rng.gen_range(0..width);
            let edit = match rng.gen_range(0..3) {
                0 => ByteEdit::Inc,
                1 => ByteEdit::Dec,
                _ => ByteEdit::Replace(INTERESTING_BYTES[rng.gen_range(0..INTERESTING_BYTES.len())]),
            };
            let b = old[at];
            let nb = match edit {
                ByteEdit::Inc => b.wrapping_add(1),
                ByteEdit::Dec => b.wrapping_sub(1),
                ByteEdit::Replace(x) => x,
            };
            let strategy = Strategy::ByteEditAtOffset {
                offset: (element.offset + at) as u32,
                edit,
            };
            (strategy, at, alloc::vec![b], alloc::vec![nb])
        }
    }
}

pub const INTERESTING_BYTES: [u8; 5] = [0x00, 0x01, 0x7f, 0x80, 0xff];

fn mutate_pointer<R: Rng + ?Sized>(
    element: &Element,
    old: &[u8],
    probes: &[u64],
    corpus: &mut Corpus,
    config: &MutationConfig,
    rng: &mut R,
) -> (Strategy, Vec<u8>) {
    let width = old.len();
    let invalid = |rng: &mut R| {
        let address = probes[rng.gen_range(0..probes.len())];
        (Strategy::PtrInvalid { address }, write_le(address, width))
    };
    if rng.gen_bool(config.reuse_probability) {
        if rng.gen_bool(0.5) {
            if let Some(v) = corpus.sample(&element.type_name, config.mutation_probability, rng) {
                if v.len() == width {
                    return (Strategy::PtrReplaySameType, v);
                }
            }
        } else if let Some((source_type, v)) = corpus.sample_other(&element.type_name, width, rng) {
            return (Strategy::PtrReplaceDiffType { source_type }, v);
        }
        return invalid(rng);
    }
    match rng.gen_range(0..3) {
        0 => invalid(rng),
        1 => {
            let address = if rng.gen_bool(0.75) {
                0
            } else {
                8 * rng.gen_range(1..512u64)
            };
            (Strategy::PtrZeroPage { address }, write_le(address, width))
        }
        _ => {
            let magnitude = 1i64 << rng.gen_range(3..=20u32);
            let delta = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            let v = read_le(old).wrapping_add(delta as u64);
            (Strategy::PtrOffsetShift { delta }, write_le(v, width))
        }
    }
}

fn mutate_integer<R: Rng + ?Sized>(old: &[u8], rng: &mut R) -> (Strategy, Vec<u8>) {
    let width = old.len();
    let bits = (width.min(8) * 8) as u32;
    let cur = read_le(old);
    match rng.gen_range(0..3) {
        0 => {
            let magnitude = if rng.gen_bool(0.5) {
                1i64
            } else {
                1i64 << rng.gen_range(1..bits.min(31))
            };
            let delta = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            (
                Strategy::IntIncDec { delta },
                write_le(cur.wrapping_add(delta as u64), width),
            )
        }
        1 => {
            let limit = [Limit::Zero, Limit::MaxSigned, Limit::MinSigned, Limit::MaxUnsigned][rng.gen_range(0..4)];
            (Strategy::IntLimit { limit }, write_le(limit.value(width), width))
        }
        _ => {
            let v: Vec<u8> = (0..width).map(|_| rng.gen()).collect();
            (Strategy::IntRandom, v)
        }
    }
}

/// Synthetic return value for a skipped call: an integer limit or a
/// random value of the return width.
pub fn synthetic_return<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Vec<u8> {
    if width == 0 {
        return Vec::new();
    }
    if rng.gen_bool(0.5) {
        let limit = [Limit::Zero, Limit::MaxSigned, Limit::MinSigned, Limit::MaxUnsigned][rng.gen_range(0..4)];
        write_le(limit.value(width), width)
    } else {
        (0..width).map(|_| rng.gen()).collect()
    }
}
