use crate::bitmap::{intersect_all, BitmapError, CountMode, CoverageBitmap, SubtractMode};

use super::DiffSource;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocationOptions {
    pub count: CountMode,
    pub subtract: SubtractMode,
}

/// Per-fuzzer CPU fractions, positionally aligned with the input bitmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceAllocation {
    pub fractions: Vec<f64>,
    /// Coverage left after removing what every fuzzer has.
    pub unique: Vec<u64>,
    /// Argmax set of `unique`; empty unless the allocation was winner-takes-all.
    pub winners: Vec<usize>,
}

/// Counts of each bitmap after subtracting the intersection of all of them.
pub fn unique_counts(
    bitmaps: &[&CoverageBitmap],
    opts: AllocationOptions,
) -> Result<Vec<u64>, BitmapError> {
    let common = intersect_all(bitmaps.iter().copied())?;
    bitmaps
        .iter()
        .map(|b| Ok(b.subtract(&common, opts.subtract)?.count_with(opts.count)))
        .collect()
}

/// Spread between the best and the worst fuzzer.
pub fn diff_peak(
    bitmaps: &[&CoverageBitmap],
    source: DiffSource,
    opts: AllocationOptions,
) -> Result<u64, BitmapError> {
    let counts = match source {
        DiffSource::Raw => bitmaps.iter().map(|b| b.count_with(opts.count)).collect(),
        DiffSource::Unique => unique_counts(bitmaps, opts)?,
    };
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok(max - min)
}

/// Winner-takes-all (split evenly on ties) after an early exit, otherwise
/// proportional to unique coverage. With no unique coverage at all the
/// proportional split degrades to an even one.
pub fn resource_allocator(
    bitmaps: &[&CoverageBitmap],
    exit_early: bool,
    opts: AllocationOptions,
) -> Result<ResourceAllocation, BitmapError> {
    Ok(allocate_counts(unique_counts(bitmaps, opts)?, exit_early))
}

/// The allocation rule on already computed unique counts.
pub fn allocate_counts(unique: Vec<u64>, exit_early: bool) -> ResourceAllocation {
    let n = unique.len();
    let mut fractions = vec![0.0; n];
    let mut winners = Vec::new();
    if exit_early {
        let mut best: Option<u64> = None;
        for (i, &u) in unique.iter().enumerate() {
            match best {
                Some(b) if u < b => {}
                Some(b) if u == b => winners.push(i),
                _ => {
                    best = Some(u);
                    winners.clear();
                    winners.push(i);
                }
            }
        }
        let share = 1.0 / winners.len() as f64;
        for &w in &winners {
            fractions[w] = share;
        }
    } else {
        let total: u64 = unique.iter().sum();
        for (f, &u) in fractions.iter_mut().zip(&unique) {
            *f = if total == 0 {
                1.0 / n as f64
            } else {
                u as f64 / total as f64
            };
        }
    }
    ResourceAllocation {
        fractions,
        unique,
        winners,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bm(entries: &[u8]) -> CoverageBitmap {
        CoverageBitmap::from_entries(entries.to_vec())
    }

    fn set(map_size: usize, covered: std::ops::Range<usize>) -> CoverageBitmap {
        let mut v = vec![0u8; map_size];
        for i in covered {
            v[i] = 1;
        }
        CoverageBitmap::from_entries(v)
    }

    #[test]
    fn proportional_example() {
        // 10 shared entries, then 30 / 10 / 10 unique ones.
        let a = set(128, 0..40);
        let mut b = set(128, 0..10);
        let mut c = set(128, 0..10);
        b.union_into(&set(128, 40..50)).unwrap();
        c.union_into(&set(128, 50..60)).unwrap();
        let r = resource_allocator(&[&a, &b, &c], false, AllocationOptions::default()).unwrap();
        assert_eq!(r.unique, vec![30, 10, 10]);
        assert_eq!(r.fractions, vec![0.6, 0.2, 0.2]);
        assert!(r.winners.is_empty());
    }

    #[test]
    fn early_exit_sole_and_tied_winners() {
        let a = set(64, 0..20);
        let b = set(64, 0..5);
        let r = resource_allocator(&[&a, &b], true, AllocationOptions::default()).unwrap();
        assert_eq!(r.fractions, vec![1.0, 0.0]);
        assert_eq!(r.winners, vec![0]);

        let c = set(64, 30..45);
        let d = set(64, 45..60);
        let r = resource_allocator(&[&b, &c, &d], true, AllocationOptions::default()).unwrap();
        assert_eq!(r.fractions, vec![0.0, 0.5, 0.5]);
        assert_eq!(r.winners, vec![1, 2]);
    }

    #[test]
    fn nothing_unique_splits_evenly() {
        let a = set(64, 0..10);
        let r = resource_allocator(
            &[&a, &a.clone(), &a.clone()],
            false,
            AllocationOptions::default(),
        )
        .unwrap();
        assert_eq!(r.fractions, vec![1.0 / 3.0; 3]);
        let r = resource_allocator(&[&a], false, AllocationOptions::default()).unwrap();
        assert_eq!(r.fractions, vec![1.0]);
    }

    #[test]
    fn diff_sources_differ_only_by_common_part() {
        let a = bm(&[1, 1, 1, 0]);
        let b = bm(&[1, 0, 0, 0]);
        let opts = AllocationOptions::default();
        assert_eq!(diff_peak(&[&a, &b], DiffSource::Raw, opts).unwrap(), 2);
        assert_eq!(diff_peak(&[&a, &b], DiffSource::Unique, opts).unwrap(), 2);
        let c = bm(&[0, 0, 0, 1]);
        // Nothing common to all three: both sources agree again.
        assert_eq!(
            diff_peak(&[&a, &b, &c], DiffSource::Unique, opts).unwrap(),
            2
        );
    }

    #[test]
    fn subtract_mode_changes_unique_counts() {
        // Same edge, different hit-count buckets.
        let a = bm(&[0b11, 0]);
        let b = bm(&[0b01, 0]);
        let bits = AllocationOptions {
            subtract: SubtractMode::Bits,
            ..Default::default()
        };
        let entries = AllocationOptions {
            subtract: SubtractMode::Entries,
            ..Default::default()
        };
        assert_eq!(unique_counts(&[&a, &b], bits).unwrap(), vec![1, 0]);
        assert_eq!(unique_counts(&[&a, &b], entries).unwrap(), vec![0, 0]);
    }

    fn bitmaps(n: usize) -> impl Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4, 0x80, 3]), 32),
            1..=n,
        )
    }

    proptest! {
        #[test]
        fn simplex_and_argmax(raw in bitmaps(6), early in any::<bool>()) {
            let bms: Vec<CoverageBitmap> = raw.into_iter().map(CoverageBitmap::from_entries).collect();
            let refs: Vec<&CoverageBitmap> = bms.iter().collect();
            let r = resource_allocator(&refs, early, AllocationOptions::default()).unwrap();
            let sum: f64 = r.fractions.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(r.fractions.iter().all(|&f| (0.0..=1.0).contains(&f)));
            if early {
                let max = *r.unique.iter().max().unwrap();
                let expect: Vec<usize> = (0..r.unique.len()).filter(|&i| r.unique[i] == max).collect();
                prop_assert_eq!(&r.winners, &expect);
            }
        }

        #[test]
        fn scale_invariance(
            counts in prop::collection::vec(0u64..10_000, 1..=6),
            k in 1u64..1000,
            early in any::<bool>(),
        ) {
            let base = allocate_counts(counts.clone(), early);
            let scaled = allocate_counts(counts.iter().map(|c| c * k).collect(), early);
            prop_assert_eq!(&base.winners, &scaled.winners);
            for (a, b) in base.fractions.iter().zip(&scaled.fractions) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
