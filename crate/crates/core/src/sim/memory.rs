//! Byte-addressed memory with per-region permissions and an allocator
//! that detects misuse.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::wire::AccessKind;

pub const ZERO_PAGE_END: u64 = 0x1000;
// The strides below are chosen so that shifting a pointer by a power of
// two (up to 2^20) never moves it into a different function, global or
// allocation.
pub const TEXT_BASE: u64 = 0x40_0000;
pub const FUNCTION_STRIDE: u64 = 19;
pub const DATA_BASE: u64 = 0x60_0000;
pub const DATA_STRIDE: u64 = 0x1100;
/// Largest global a scenario may declare.
pub const MAX_GLOBAL_SIZE: u64 = 0x100;
pub const HEAP_BASE: u64 = 0x1000_0000;
pub const HEAP_STRIDE: u64 = 0x13000;
/// Unmapped gap kept after every allocation.
pub const HEAP_RED_ZONE: u64 = 0x1000;
pub const DEFAULT_HEAP_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perm {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perm {
    pub const RW: Perm = Perm {
        read: true,
        write: true,
        exec: false,
    };
    pub const R: Perm = Perm {
        read: true,
        write: false,
        exec: false,
    };
    pub const X: Perm = Perm {
        read: false,
        write: false,
        exec: true,
    };

    fn allows(self, access: AccessKind) -> bool {
        match access {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Exec => self.exec,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionTag {
    Heap,
    Data,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub perm: Perm,
    pub tag: RegionTag,
    pub bytes: Vec<u8>,
}

/// A detected memory error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub access: AccessKind,
    pub address: Option<u64>,
}

impl Fault {
    fn at(access: AccessKind, address: u64) -> Fault {
        let access = if address < ZERO_PAGE_END && access.is_memory_access() {
            AccessKind::NullDeref
        } else {
            access
        };
        Fault {
            access,
            address: Some(address),
        }
    }

    pub fn alloc_misuse(address: Option<u64>) -> Fault {
        Fault {
            access: AccessKind::AllocMisuse,
            address,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    regions: BTreeMap<u64, Region>,
    live: BTreeMap<u64, u64>,
    next_alloc: u64,
    heap_base: u64,
    pub heap_cap: u64,
}

impl Memory {
    pub fn new(heap_cap: u64) -> Self {
        Memory {
            regions: BTreeMap::new(),
            live: BTreeMap::new(),
            next_alloc: 0,
            heap_base: HEAP_BASE,
            heap_cap,
        }
    }

    /// Maps a region. Panics if it overlaps an existing one or the zero page.
    pub fn map(&mut self, base: u64, bytes: Vec<u8>, perm: Perm, tag: RegionTag) {
        let end = base + bytes.len() as u64;
        assert!(base >= ZERO_PAGE_END, "zero page stays unmapped");
        assert!(self.region_at(base).is_none(), "overlapping region at {base:#x}");
        if let Some((&next, _)) = self.regions.range(base..).next() {
            assert!(end <= next, "overlapping region at {base:#x}");
        }
        self.regions.insert(base, Region { perm, tag, bytes });
    }

    pub fn region_at(&self, addr: u64) -> Option<(u64, &Region)> {
        let (&base, r) = self.regions.range(..=addr).next_back()?;
        (addr - base < r.bytes.len() as u64).then_some((base, r))
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, &Region)> {
        self.regions.iter().map(|(b, r)| (*b, r))
    }

    /// Number of bytes from `addr` to the end of its region.
    pub fn span(&self, addr: u64) -> u64 {
        self.region_at(addr)
            .map(|(base, r)| base + r.bytes.len() as u64 - addr)
            .unwrap_or(0)
    }

    fn check(&self, addr: u64, len: u64, access: AccessKind) -> Result<(), Fault> {
        let mut at = addr;
        let end = addr.checked_add(len).ok_or(Fault::at(access, addr))?;
        while at < end {
            match self.region_at(at) {
                Some((base, r)) if r.perm.allows(access) => at = base + r.bytes.len() as u64,
                _ => return Err(Fault::at(access, at)),
            }
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        self.check(addr, len, AccessKind::Read)?;
        Ok(self.peek(addr, len).expect("checked range is mapped"))
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), Fault> {
        self.check(addr, data.len() as u64, AccessKind::Write)?;
        self.poke(addr, data);
        Ok(())
    }

    pub fn exec(&self, addr: u64) -> Result<(), Fault> {
        self.check(addr, 1, AccessKind::Exec)
    }

    /// Reads mapped bytes regardless of permissions.
    pub fn peek(&self, addr: u64, len: u64) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len as usize);
        let mut at = addr;
        let end = addr.checked_add(len)?;
        while at < end {
            let (base, r) = self.region_at(at)?;
            let from = (at - base) as usize;
            let to = ((end - base) as usize).min(r.bytes.len());
            out.extend_from_slice(&r.bytes[from..to]);
            at = base + to as u64;
        }
        Some(out)
    }

    /// Writes mapped bytes regardless of permissions; bytes falling outside
    /// mapped memory are dropped. Returns whether every byte landed.
    pub fn poke(&mut self, addr: u64, data: &[u8]) -> bool {
        let mut all = true;
        for (i, b) in data.iter().enumerate() {
            let at = addr.wrapping_add(i as u64);
            let Some((&base, _)) = self.regions.range(..=at).next_back() else {
                all = false;
                continue;
            };
            let r = self.regions.get_mut(&base).expect("present");
            match r.bytes.get_mut((at - base) as usize) {
                Some(slot) => *slot = *b,
                None => all = false,
            }
        }
        all
    }

    pub fn alloc(&mut self, size: u64) -> Result<u64, Fault> {
        if size > self.heap_cap {
            return Err(Fault::alloc_misuse(None));
        }
        let addr = self.heap_base + self.next_alloc * HEAP_STRIDE;
        self.next_alloc += (size + HEAP_RED_ZONE).div_ceil(HEAP_STRIDE);
        if size > 0 {
            self.map(addr, vec![0; size as usize], Perm::RW, RegionTag::Heap);
        }
        self.live.insert(addr, size);
        Ok(addr)
    }

    pub fn free(&mut self, addr: u64) -> Result<(), Fault> {
        if addr == 0 {
            return Ok(());
        }
        match self.live.remove(&addr) {
            Some(size) => {
                if size > 0 {
                    self.regions.remove(&addr);
                }
                Ok(())
            }
            None => Err(Fault::alloc_misuse(Some(addr))),
        }
    }

    pub fn live_allocations(&self) -> usize {
        self.live.len()
    }

    /// Length of the NUL-terminated string at `addr`, scanning at most
    /// `max` readable bytes.
    pub fn c_strlen(&self, addr: u64, max: u64) -> Option<u64> {
        let avail = self.span(addr).min(max);
        let (_, r) = self.region_at(addr)?;
        if !r.perm.read {
            return None;
        }
        let bytes = self.peek(addr, avail)?;
        Some(bytes.iter().position(|b| *b == 0).map(|p| p as u64).unwrap_or(avail))
    }
}
