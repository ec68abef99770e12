use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::iface::{InterfaceSpec, TypeKind};
use crate::mutation::{AlterationRecord, Strategy, StrategyId};
use crate::wire::{CrossingKind, Locus};

use super::minimize::ReplayOracle;
use super::MinimizedSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CivClass {
    /// Dereference of a corrupted pointer.
    DC1,
    /// Use of corrupted indexing information.
    DC2,
    /// Use of a corrupted object.
    DC3,
    /// Broken API ordering expectation.
    TV1,
    /// Corrupted synchronization primitive.
    TV2,
}

pub fn class_of(record: &AlterationRecord) -> CivClass {
    match record.strategy_id() {
        id if id.is_pointer() => CivClass::DC1,
        id if id.is_integer() => {
            if record.role.is_indexing() {
                CivClass::DC2
            } else {
                CivClass::DC3
            }
        }
        StrategyId::SkipCall => CivClass::TV1,
        StrategyId::LockScramble => CivClass::TV2,
        _ => CivClass::DC3,
    }
}

/// Classes of the alterations that matter for the crash.
pub fn classify_civ(min: &MinimizedSet) -> BTreeSet<CivClass> {
    min.sufficient.iter().chain(&min.necessary).map(class_of).collect()
}

/// The skipped call of `rec` executed normally, with its return value
/// forced to the synthetic one. `None` for other strategies and for calls
/// without a return value.
pub fn executed_variant(rec: &AlterationRecord) -> Option<AlterationRecord> {
    let Strategy::SkipCall { synthetic_return } = &rec.strategy else {
        return None;
    };
    if synthetic_return.is_empty() {
        return None;
    }
    Some(AlterationRecord {
        crossing_index: rec.crossing_index + 1,
        kind: CrossingKind::CallExit,
        symbol: rec.symbol.clone(),
        locus: Some(Locus::ReturnValue),
        offset: 0,
        strategy: Strategy::IntRandom,
        old_bytes: Vec::new(),
        new_bytes: synthetic_return.clone(),
        target_type_name: rec.target_type_name.clone(),
        role: rec.role,
    })
}

/// Class of a corrupted return value of `symbol`.
pub fn return_value_class(spec: &InterfaceSpec, symbol: &str) -> CivClass {
    let Some(f) = spec.function(symbol) else {
        return CivClass::DC3;
    };
    match f.return_type.as_ref().map(|t| t.kind) {
        Some(TypeKind::AddressValue | TypeKind::CallableRef | TypeKind::TextString | TypeKind::RawBuffer) => {
            CivClass::DC1
        }
        Some(TypeKind::Integer) if f.return_role().is_indexing() => CivClass::DC2,
        _ => CivClass::DC3,
    }
}

/// Like [`classify_civ`], but a skipped call only counts as TV1 when the
/// missing execution matters. If the crash also reproduces with the call
/// executed and only its return value forced, the return value is the
/// cause and the record takes that value's class.
pub fn classify_civ_with_replay<O: ReplayOracle + ?Sized>(
    min: &MinimizedSet,
    key: &str,
    spec: &InterfaceSpec,
    oracle: &mut O,
) -> BTreeSet<CivClass> {
    let essential = min.essential();
    let mut out = BTreeSet::new();
    for (i, rec) in essential.iter().enumerate() {
        let class = match executed_variant(rec) {
            Some(variant) => {
                let mut probe = essential.clone();
                probe[i] = variant;
                if oracle.replay(&probe).is_some_and(|o| o.key == key) {
                    return_value_class(spec, &rec.symbol)
                } else {
                    CivClass::TV1
                }
            }
            None => class_of(rec),
        };
        out.insert(class);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iface::ValueRole;
    use crate::mutation::{Limit, Strategy};
    use crate::wire::{CrossingKind, Locus};
    use alloc::vec;
    use alloc::vec::Vec;

    fn rec(strategy: Strategy, role: ValueRole) -> AlterationRecord {
        AlterationRecord {
            crossing_index: 0,
            kind: CrossingKind::CallEntry,
            symbol: "f".into(),
            locus: Some(Locus::Arg(0)),
            offset: 0,
            strategy,
            old_bytes: Vec::new(),
            new_bytes: Vec::new(),
            target_type_name: "t".into(),
            role,
        }
    }

    #[test]
    fn zero_page_pointer_is_dc1() {
        let min = MinimizedSet {
            sufficient: vec![rec(Strategy::PtrZeroPage { address: 0 }, ValueRole::Other)],
            ..MinimizedSet::default()
        };
        assert_eq!(classify_civ(&min), BTreeSet::from([CivClass::DC1]));
    }

    #[test]
    fn length_limit_plus_object_edit_is_two_classes() {
        let min = MinimizedSet {
            necessary: vec![
                rec(
                    Strategy::IntLimit {
                        limit: Limit::MaxSigned,
                    },
                    ValueRole::Size,
                ),
                rec(
                    Strategy::ByteEditAtOffset {
                        offset: 3,
                        edit: crate::mutation::strategy::ByteEdit::Inc,
                    },
                    ValueRole::Other,
                ),
            ],
            ..MinimizedSet::default()
        };
        assert_eq!(classify_civ(&min), BTreeSet::from([CivClass::DC2, CivClass::DC3]));
    }

    #[test]
    fn skip_call_is_tv1() {
        let min = MinimizedSet {
            sufficient: vec![rec(
                Strategy::SkipCall {
                    synthetic_return: vec![],
                },
                ValueRole::Other,
            )],
            ..MinimizedSet::default()
        };
        assert_eq!(classify_civ(&min), BTreeSet::from([CivClass::TV1]));
    }

    #[test]
    fn integer_without_indexing_role_is_dc3() {
        assert_eq!(class_of(&rec(Strategy::IntRandom, ValueRole::Other)), CivClass::DC3);
        assert_eq!(
            class_of(&rec(Strategy::IntIncDec { delta: 1 }, ValueRole::Index)),
            CivClass::DC2
        );
        assert_eq!(class_of(&rec(Strategy::LockScramble, ValueRole::Other)), CivClass::TV2);
    }
}
