//! AFL-style coverage bitmaps.
//!
//! A [`RawHitMap`] holds saturating 8-bit hit counters produced by a single
//! execution. [`bucketize`] folds each counter into one of eight hit-count
//! classes, giving a [`CoverageBitmap`] whose bytes are bucket bitmasks. A
//! fuzzer's progress is the union of the bitmaps of every input it kept.

use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// AFL's default `MAP_SIZE`.
pub const DEFAULT_MAP_SIZE: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum BitmapError {
    #[error("bitmap size mismatch: expected {expected} entries, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("map size {0} is not a non-zero power of two")]
    InvalidMapSize(usize),
    #[error("intersection of an empty bitmap list")]
    EmptyIntersection,
    #[error("bitmap file {path}: expected {expected} bytes, found {found}")]
    BadFileLength {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn check_map_size(map_size: usize) -> Result<(), BitmapError> {
    if map_size == 0 || !map_size.is_power_of_two() {
        return Err(BitmapError::InvalidMapSize(map_size));
    }
    Ok(())
}

/// Hit-count class for a raw counter: 1, 2, 3, 4-7, 8-15, 16-31, 32-127 and
/// 128+ map to bits 0 through 7. An unvisited entry stays zero.
pub const fn bucket_of(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1 << 0,
        2 => 1 << 1,
        3 => 1 << 2,
        4..=7 => 1 << 3,
        8..=15 => 1 << 4,
        16..=31 => 1 << 5,
        32..=127 => 1 << 6,
        128..=255 => 1 << 7,
    }
}

const BUCKET_LUT: [u8; 256] = {
    let mut lut = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        lut[i] = bucket_of(i as u8);
        i += 1;
    }
    lut
};

/// Per-entry hit counters from one execution.
#[derive(Clone, PartialEq, Eq)]
pub struct RawHitMap {
    counts: Vec<u8>,
}

impl RawHitMap {
    pub fn new(map_size: usize) -> Self {
        Self {
            counts: vec![0; map_size],
        }
    }

    pub fn from_counts(counts: Vec<u8>) -> Self {
        Self { counts }
    }

    /// Records one more hit on `index`, saturating at 255.
    pub fn hit(&mut self, index: usize) {
        self.add(index, 1);
    }

    pub fn add(&mut self, index: usize, hits: u8) {
        let slot = &mut self.counts[index];
        *slot = slot.saturating_add(hits);
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.counts
    }
}

impl fmt::Debug for RawHitMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hit = self.counts.iter().filter(|&&c| c != 0).count();
        write!(f, "RawHitMap({} entries, {} hit)", self.counts.len(), hit)
    }
}

/// How bucket-bit removal is applied when subtracting common coverage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtractMode {
    /// Clear only the bucket bits present in the common map.
    #[default]
    Bits,
    /// Clear the whole entry whenever the common map has any bit there.
    Entries,
}

/// What `COUNT` measures on a bitmap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Entries with at least one bucket bit set (AFL density semantics).
    #[default]
    Entries,
    /// Total number of bucket bits set.
    Bits,
}

/// Bucketed coverage: each byte is a union of hit-count class bits.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CoverageBitmap {
    entries: Box<[u8]>,
}

impl CoverageBitmap {
    pub fn empty(map_size: usize) -> Self {
        Self {
            entries: vec![0; map_size].into_boxed_slice(),
        }
    }

    pub fn from_entries(entries: Vec<u8>) -> Self {
        Self {
            entries: entries.into_boxed_slice(),
        }
    }

    pub fn map_size(&self) -> usize {
        self.entries.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> u8 {
        self.entries[index]
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|&b| b == 0)
    }

    fn check_same(&self, other: &Self) -> Result<(), BitmapError> {
        if self.entries.len() != other.entries.len() {
            return Err(BitmapError::SizeMismatch {
                expected: self.entries.len(),
                found: other.entries.len(),
            });
        }
        Ok(())
    }

    /// ORs `new` into this accumulator.
    pub fn union_into(&mut self, new: &CoverageBitmap) -> Result<(), BitmapError> {
        self.check_same(new)?;
        for (acc, &b) in self.entries.iter_mut().zip(new.entries.iter()) {
            *acc |= b;
        }
        Ok(())
    }

    /// Folds a raw hit map directly into the accumulator. Equivalent to
    /// `union_into(&bucketize(raw)?)` without the intermediate allocation.
    pub fn union_raw(&mut self, raw: &RawHitMap) -> Result<(), BitmapError> {
        if raw.len() != self.entries.len() {
            return Err(BitmapError::SizeMismatch {
                expected: self.entries.len(),
                found: raw.len(),
            });
        }
        for (acc, &c) in self.entries.iter_mut().zip(raw.as_slice()) {
            *acc |= BUCKET_LUT[c as usize];
        }
        Ok(())
    }

    /// ORs bucket bits into one entry.
    pub fn or_entry(&mut self, index: usize, bits: u8) -> Result<(), BitmapError> {
        let len = self.entries.len();
        let e = self
            .entries
            .get_mut(index)
            .ok_or(BitmapError::SizeMismatch {
                expected: len,
                found: index + 1,
            })?;
        *e |= bits;
        Ok(())
    }

    pub fn union(&self, other: &CoverageBitmap) -> Result<CoverageBitmap, BitmapError> {
        let mut out = self.clone();
        out.union_into(other)?;
        Ok(out)
    }

    pub fn subtract(
        &self,
        common: &CoverageBitmap,
        mode: SubtractMode,
    ) -> Result<CoverageBitmap, BitmapError> {
        self.check_same(common)?;
        let entries = self
            .entries
            .iter()
            .zip(common.entries.iter())
            .map(|(&b, &c)| match mode {
                SubtractMode::Bits => b & !c,
                SubtractMode::Entries if c != 0 => 0,
                SubtractMode::Entries => b,
            })
            .collect();
        Ok(CoverageBitmap { entries })
    }

    /// Number of entries with any bucket bit set.
    pub fn count(&self) -> u64 {
        self.entries.iter().filter(|&&b| b != 0).count() as u64
    }

    pub fn count_bits(&self) -> u64 {
        self.entries.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    pub fn count_with(&self, mode: CountMode) -> u64 {
        match mode {
            CountMode::Entries => self.count(),
            CountMode::Bits => self.count_bits(),
        }
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.entries.len() as f64
    }

    pub fn from_bytes(bytes: &[u8], map_size: usize) -> Result<Self, BitmapError> {
        if bytes.len() != map_size {
            return Err(BitmapError::BadFileLength {
                path: String::from("<memory>"),
                expected: map_size,
                found: bytes.len(),
            });
        }
        Ok(Self::from_entries(bytes.to_vec()))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), BitmapError> {
        std::fs::write(path, &self.entries)?;
        Ok(())
    }

    pub fn read_from(path: &Path, map_size: usize) -> Result<Self, BitmapError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() != map_size {
            return Err(BitmapError::BadFileLength {
                path: path.display().to_string(),
                expected: map_size,
                found: bytes.len(),
            });
        }
        Ok(Self::from_entries(bytes))
    }
}

impl fmt::Debug for CoverageBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CoverageBitmap({} entries, {} covered)",
            self.entries.len(),
            self.count()
        )
    }
}

pub fn bucketize(raw: &RawHitMap, map_size: usize) -> Result<CoverageBitmap, BitmapError> {
    if raw.len() != map_size {
        return Err(BitmapError::SizeMismatch {
            expected: map_size,
            found: raw.len(),
        });
    }
    Ok(CoverageBitmap {
        entries: raw
            .as_slice()
            .iter()
            .map(|&c| BUCKET_LUT[c as usize])
            .collect(),
    })
}

/// Entry-wise AND over every bitmap in the list.
pub fn intersect_all<'a, I>(bitmaps: I) -> Result<CoverageBitmap, BitmapError>
where
    I: IntoIterator<Item = &'a CoverageBitmap>,
{
    let mut iter = bitmaps.into_iter();
    let mut acc = iter.next().ok_or(BitmapError::EmptyIntersection)?.clone();
    for b in iter {
        acc.check_same(b)?;
        for (a, &x) in acc.entries.iter_mut().zip(b.entries.iter()) {
            *a &= x;
        }
    }
    Ok(acc)
}
