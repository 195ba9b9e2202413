//! Static two-choice cuckoo table mapping band codes to `(start, length)`
//! spans. Lookups inspect at most one slot in each of the two arrays.

use std::collections::HashSet;

use crate::codec::{put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::wta::EMPTY_CODE;

/// Eviction chain length before giving up on an insertion.
pub const MAX_DISPLACEMENTS: usize = 32;
/// Rebuilds with fresh hash parameters after the initial attempt.
pub const MAX_REBUILDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: u32,
    pub length: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    key: u32,
    start: u32,
    length: u32,
}

const EMPTY_SLOT: Slot = Slot {
    key: EMPTY_CODE,
    start: 0,
    length: 0,
};

/// Multiply-add-shift: `(a * x + b) mod 2^64 >> (64 - log2_cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SlotHash {
    mult: u64,
    add: u64,
}

impl SlotHash {
    fn draw(rng: &mut SeededRng) -> Self {
        Self {
            mult: rng.odd_u64(),
            add: rng.next_u64(),
        }
    }

    #[inline]
    fn slot(&self, key: u32, log2_cap: u32) -> usize {
        (self.mult.wrapping_mul(u64::from(key)).wrapping_add(self.add) >> (64 - log2_cap)) as usize
    }
}

#[derive(Debug, Clone)]
pub struct CuckooTable {
    log2_cap: u32,
    hashes: [SlotHash; 2],
    slots: [Vec<Slot>; 2],
    len: usize,
    attempts: usize,
}

// `attempts` is build metadata and is not serialized.
impl PartialEq for CuckooTable {
    fn eq(&self, other: &Self) -> bool {
        self.log2_cap == other.log2_cap
            && self.hashes == other.hashes
            && self.slots == other.slots
            && self.len == other.len
    }
}

impl Eq for CuckooTable {}

impl CuckooTable {
    /// Builds a table holding every `(key, span)` entry.
    ///
    /// Each array has `max(2, next_pow2(n))` slots, so the combined load is
    /// at most 0.5. Hash parameters for attempt `r` are the `r`-th pair drawn
    /// from `SeededRng::new(seed)`.
    pub fn build(entries: &[(u32, Span)], seed: u64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(key, _) in entries {
            if key >= EMPTY_CODE {
                return Err(Error::InvalidInput(format!("key {key} is reserved")));
            }
            if !seen.insert(key) {
                return Err(Error::InvalidInput(format!("duplicate key {key}")));
            }
        }
        let cap = entries.len().next_power_of_two().max(2);
        let log2_cap = cap.trailing_zeros();
        let mut rng = SeededRng::new(seed);
        for attempt in 0..=MAX_REBUILDS {
            let hashes = [SlotHash::draw(&mut rng), SlotHash::draw(&mut rng)];
            let mut table = Self {
                log2_cap,
                hashes,
                slots: [vec![EMPTY_SLOT; cap], vec![EMPTY_SLOT; cap]],
                len: 0,
                attempts: attempt + 1,
            };
            if entries
                .iter()
                .all(|&(key, span)| table.insert(key, span))
            {
                return Ok(table);
            }
        }
        Err(Error::CuckooBuild {
            attempts: MAX_REBUILDS + 1,
            keys: entries.len(),
        })
    }

    fn insert(&mut self, key: u32, span: Span) -> bool {
        let item = Slot {
            key,
            start: span.start,
            length: span.length,
        };
        for t in 0..2 {
            let pos = self.hashes[t].slot(key, self.log2_cap);
            if self.slots[t][pos].key == EMPTY_CODE {
                self.slots[t][pos] = item;
                self.len += 1;
                return true;
            }
        }
        // Try the eviction chain starting in either array; a chain that
        // runs past the displacement cap is rolled back before the next.
        let mut trail = Vec::with_capacity(MAX_DISPLACEMENTS);
        for first in 0..2 {
            if self.evict_chain(item, first, &mut trail) {
                self.len += 1;
                return true;
            }
        }
        false
    }

    fn evict_chain(&mut self, item: Slot, first: usize, trail: &mut Vec<(usize, usize)>) -> bool {
        trail.clear();
        let mut cur = item;
        let mut t = first;
        for _ in 0..MAX_DISPLACEMENTS {
            let pos = self.hashes[t].slot(cur.key, self.log2_cap);
            std::mem::swap(&mut cur, &mut self.slots[t][pos]);
            if cur.key == EMPTY_CODE {
                return true;
            }
            trail.push((t, pos));
            // evicted key moves to its slot in the other array
            t ^= 1;
        }
        for &(t, pos) in trail.iter().rev() {
            std::mem::swap(&mut cur, &mut self.slots[t][pos]);
        }
        debug_assert_eq!(cur, item);
        false
    }

    #[inline]
    pub fn lookup(&self, key: u32) -> Option<Span> {
        self.lookup_counted(key).0
    }

    /// Lookup that also reports how many slots were inspected (1 or 2).
    #[inline]
    pub fn lookup_counted(&self, key: u32) -> (Option<Span>, u32) {
        let mut probes = 0;
        for t in 0..2 {
            probes += 1;
            let s = self.slots[t][self.hashes[t].slot(key, self.log2_cap)];
            if s.key == key && key != EMPTY_CODE {
                return (
                    Some(Span {
                        start: s.start,
                        length: s.length,
                    }),
                    probes,
                );
            }
        }
        (None, probes)
    }

    /// Number of stored keys.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slots per array.
    pub fn capacity(&self) -> usize {
        1 << self.log2_cap
    }

    pub fn load_factor(&self) -> f64 {
        self.len as f64 / (2 * self.capacity()) as f64
    }

    /// Build attempts consumed, 1 meaning no rebuild.
    pub fn attempts(&self) -> usize {
        self.attempts
    }

    /// Stored `(key, span)` pairs in slot order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, Span)> + '_ {
        self.slots.iter().flatten().filter(|s| s.key != EMPTY_CODE).map(|s| {
            (
                s.key,
                Span {
                    start: s.start,
                    length: s.length,
                },
            )
        })
    }

    /// Slot index of `key` in array `t`, exposed for adversarial tests.
    pub fn slot_of(&self, t: usize, key: u32) -> usize {
        self.hashes[t].slot(key, self.log2_cap)
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        put_u32(out, self.log2_cap);
        put_u32(out, self.len as u32);
        for h in &self.hashes {
            put_u64(out, h.mult);
            put_u64(out, h.add);
        }
        for arr in &self.slots {
            for s in arr {
                put_u32(out, s.key);
                put_u32(out, s.start);
                put_u32(out, s.length);
            }
        }
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let log2_cap = r.u32()?;
        if !(1..=31).contains(&log2_cap) {
            return Err(Error::Format(format!("bad cuckoo capacity 2^{log2_cap}")));
        }
        let len = r.u32()? as usize;
        let mut hashes = [SlotHash { mult: 0, add: 0 }; 2];
        for h in hashes.iter_mut() {
            h.mult = r.u64()?;
            h.add = r.u64()?;
        }
        let cap = 1usize << log2_cap;
        let mut read_arr = || -> Result<Vec<Slot>> {
            let raw = r.u32_vec(cap * 3)?;
            Ok(raw
                .chunks_exact(3)
                .map(|c| Slot {
                    key: c[0],
                    start: c[1],
                    length: c[2],
                })
                .collect())
        };
        let slots = [read_arr()?, read_arr()?];
        let stored = slots.iter().flatten().filter(|s| s.key != EMPTY_CODE).count();
        if stored != len {
            return Err(Error::Format(format!(
                "cuckoo header declares {len} keys, slots hold {stored}"
            )));
        }
        Ok(Self {
            log2_cap,
            hashes,
            slots,
            len,
            attempts: 0,
        })
    }
}
