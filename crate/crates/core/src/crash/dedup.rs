use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::{AccessKind, Frame};

/// Bytes of the SHA-256 digest kept in a dedup key.
const KEY_BYTES: usize = 16;

/// Hash over the whole normalized stack (symbol and offset of every frame,
/// innermost first) and the access kind.
pub fn dedup_key(frames: &[Frame], access: AccessKind) -> String {
    let mut h = Sha256::new();
    for f in frames {
        h.update(f.symbol.as_bytes());
        h.update([0u8]);
        h.update(f.offset.to_le_bytes());
    }
    h.update([0xffu8, access as u8]);
    let digest = h.finalize();
    let mut out = String::with_capacity(KEY_BYTES * 2);
    for b in &digest[..KEY_BYTES] {
        out.push(HEX[(b >> 4) as usize] as char);
        out.push(HEX[(b & 0xf) as usize] as char);
    }
    out
}

const HEX: &[u8; 16] = b"0123456789abcdef";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DedupOutcome {
    New,
    Duplicate(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashDatabase {
    occurrences: BTreeMap<String, u64>,
}

impl CrashDatabase {
    pub fn dedup(&mut self, key: &str) -> DedupOutcome {
        match self.occurrences.get_mut(key) {
            Some(n) => {
                *n += 1;
                DedupOutcome::Duplicate(key.into())
            }
            None => {
                self.occurrences.insert(key.into(), 1);
                DedupOutcome::New
            }
        }
    }

    pub fn occurrences(&self, key: &str) -> u64 {
        self.occurrences.get(key).copied().unwrap_or(0)
    }

    pub fn unique(&self) -> usize {
        self.occurrences.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.occurrences.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn frames() -> alloc::vec::Vec<Frame> {
        vec![
            Frame {
                symbol: "copy".into(),
                offset: 3,
                label: "app".into(),
            },
            Frame {
                symbol: "main".into(),
                offset: 9,
                label: "app".into(),
            },
        ]
    }

    #[test]
    fn identical_stack_is_duplicate() {
        let mut db = CrashDatabase::default();
        let k = dedup_key(&frames(), AccessKind::Read);
        assert_eq!(db.dedup(&k), DedupOutcome::New);
        assert_eq!(db.dedup(&k), DedupOutcome::Duplicate(k.clone()));
        assert_eq!(db.occurrences(&k), 2);
    }

    #[test]
    fn access_kind_separates_keys() {
        assert_ne!(
            dedup_key(&frames(), AccessKind::Read),
            dedup_key(&frames(), AccessKind::Write)
        );
    }

    #[test]
    fn labels_do_not_affect_key() {
        let mut other = frames();
        other[0].label = "elsewhere".into();
        assert_eq!(
            dedup_key(&frames(), AccessKind::Read),
            dedup_key(&other, AccessKind::Read)
        );
    }

    #[test]
    fn outer_frames_matter() {
        let mut other = frames();
        other[1].offset = 10;
        assert_ne!(
            dedup_key(&frames(), AccessKind::Read),
            dedup_key(&other, AccessKind::Read)
        );
    }
}
