//! Pools of previously seen values, keyed by type name.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_POOL_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub bytes: Vec<u8>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub cap: usize,
    pools: BTreeMap<String, VecDeque<CorpusEntry>>,
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus::new(DEFAULT_POOL_CAP)
    }
}

impl Corpus {
    pub fn new(cap: usize) -> Self {
        Corpus {
            cap: cap.max(1),
            pools: BTreeMap::new(),
        }
    }

    /// Adds a value to its pool, evicting the oldest entry when full.
    /// Values already present are not duplicated.
    pub fn insert(&mut self, type_name: &str, bytes: &[u8], provenance: Provenance) {
        let pool = self.pools.entry(type_name.into()).or_default();
        if pool.iter().any(|e| e.bytes == bytes) {
            return;
        }
        if pool.len() >= self.cap {
            pool.pop_front();
        }
        pool.push_back(CorpusEntry {
            bytes: bytes.to_vec(),
            provenance,
        });
    }

    pub fn pool(&self, type_name: &str) -> Option<&VecDeque<CorpusEntry>> {
        self.pools.get(type_name)
    }

    pub fn len(&self) -> usize {
        self.pools.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A stored value of `type_name`, with one byte edited with probability
    /// `mutation_probability`. `None` when the pool is empty.
    pub fn sample<R: Rng + ?Sized>(&self, type_name: &str, mutation_probability: f64, rng: &mut R) -> Option<Vec<u8>> {
        let pool = self.pools.get(type_name).filter(|p| !p.is_empty())?;
        let mut v = pool[rng.gen_range(0..pool.len())].bytes.clone();
        if !v.is_empty() && rng.gen_bool(mutation_probability) {
            let at = rng.gen_range(0..v.len());
            v[at] ^= 1 << rng.gen_range(0..8);
        }
        Some(v)
    }

    /// A stored value of some other type with the same width.
    pub fn sample_other<R: Rng + ?Sized>(
        &self,
        type_name: &str,
        width: usize,
        rng: &mut R,
    ) -> Option<(String, Vec<u8>)> {
        let candidates: Vec<(&String, &CorpusEntry)> = self
            .pools
            .iter()
            .filter(|(name, _)| name.as_str() != type_name)
            .flat_map(|(name, pool)| pool.iter().map(move |e| (name, e)))
            .filter(|(_, e)| e.bytes.len() == width)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let (name, e) = candidates[rng.gen_range(0..candidates.len())];
        Some((name.clone(), e.bytes.clone()))
    }

    /// Merges another corpus into this one, in the other's pool order.
    pub fn merge(&mut self, other: &Corpus) {
        for (name, pool) in &other.pools {
            for e in pool {
                self.insert(name, &e.bytes, e.provenance);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_replay_without_mutation() {
        let mut c = Corpus::default();
        c.insert("p", &[1, 2, 3, 4], Provenance::Observed);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(c.sample("p", 0.0, &mut rng), Some(alloc::vec![1, 2, 3, 4]));
        }
    }

    #[test]
    fn empty_pool_is_absent() {
        let c = Corpus::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(c.sample("p", 0.0, &mut rng), None);
        assert_eq!(c.sample_other("p", 8, &mut rng), None);
    }

    #[test]
    fn fifo_eviction_at_cap() {
        let mut c = Corpus::new(256);
        for i in 0u32..257 {
            c.insert("p", &i.to_le_bytes(), Provenance::Injected);
        }
        let pool = c.pool("p").unwrap();
        assert_eq!(pool.len(), 256);
        assert_eq!(pool.front().unwrap().bytes, 1u32.to_le_bytes().to_vec());
        assert_eq!(pool.back().unwrap().bytes, 256u32.to_le_bytes().to_vec());
    }

    #[test]
    fn other_type_draws_never_match_own_pool() {
        let mut c = Corpus::default();
        c.insert("a", &[1; 8], Provenance::Observed);
        c.insert("b", &[2; 8], Provenance::Observed);
        c.insert("c", &[3; 4], Provenance::Observed);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (name, v) = c.sample_other("a", 8, &mut rng).unwrap();
            assert_eq!(name, "b");
            assert_eq!(v, alloc::vec![2; 8]);
        }
    }
}
