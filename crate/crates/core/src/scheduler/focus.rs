/// One single-core focus run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusSlot {
    pub index: usize,
    pub seconds: f64,
}

/// Slots shorter than this are folded into the largest one.
const MIN_SLOT: f64 = 1.0;

/// Single-core focus plan: the round's pooled time `t_focus * n` is split by
/// fraction and run best first. Zero fractions get no slot.
pub fn plan_single_core(fractions: &[f64], t_focus: f64) -> Vec<FocusSlot> {
    let total = t_focus * fractions.len() as f64;
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Stable, so equal fractions keep their configured order.
    order.sort_by(|&a, &b| fractions[b].total_cmp(&fractions[a]));
    let mut slots: Vec<FocusSlot> = Vec::new();
    let mut folded = 0.0;
    for i in order {
        let seconds = total * fractions[i];
        if !(seconds > 0.0) {
            continue;
        }
        if seconds < MIN_SLOT {
            folded += seconds;
            continue;
        }
        slots.push(FocusSlot { index: i, seconds });
    }
    match slots.first_mut() {
        Some(first) => first.seconds += folded,
        None if folded > 0.0 => {
            // Every slot was tiny: give the pooled time to the best fuzzer.
            let best = (0..fractions.len())
                .max_by(|&a, &b| fractions[a].total_cmp(&fractions[b]).then(b.cmp(&a)))
                .expect("nonempty");
            slots.push(FocusSlot {
                index: best,
                seconds: folded,
            });
        }
        None => {}
    }
    slots
}

/// One fuzzer's share of a multi-core focus phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreShare {
    pub index: usize,
    pub cores: f64,
    pub instances: usize,
}

/// Instances to run for a fraction `ra` of `cores`: the ceiling of
/// `cores * ra`. Float noise just above an integer is not rounded up.
pub fn instances_for(cores: u32, ra: f64) -> usize {
    let x = f64::from(cores) * ra;
    if x <= 0.0 {
        0
    } else {
        (x - 1e-9).ceil().max(1.0) as usize
    }
}

pub fn plan_multi_core(fractions: &[f64], cores: u32) -> Vec<CoreShare> {
    fractions
        .iter()
        .enumerate()
        .filter(|(_, &ra)| ra > 0.0)
        .map(|(index, &ra)| CoreShare {
            index,
            cores: f64::from(cores) * ra,
            instances: instances_for(cores, ra),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_sorted_descending() {
        let slots = plan_single_core(&[0.2, 0.5, 0.3], 300.0);
        let got: Vec<(usize, f64)> = slots.iter().map(|s| (s.index, s.seconds)).collect();
        assert_eq!(got, vec![(1, 450.0), (2, 270.0), (0, 180.0)]);
    }

    #[test]
    fn sole_winner_takes_pooled_time() {
        let mut ra = vec![0.0; 11];
        ra[3] = 1.0;
        assert_eq!(
            plan_single_core(&ra, 570.0),
            vec![FocusSlot {
                index: 3,
                seconds: 570.0 * 11.0
            }]
        );
    }

    #[test]
    fn tiny_slots_fold_into_largest() {
        let slots = plan_single_core(&[0.999, 0.001], 300.0);
        assert_eq!(slots.len(), 1);
        assert_eq!(slots[0].index, 0);
        assert!((slots[0].seconds - 600.0).abs() < 1e-9);
    }

    #[test]
    fn instance_ceiling() {
        assert_eq!(instances_for(4, 0.0), 0);
        assert_eq!(instances_for(4, 0.5), 2);
        assert_eq!(instances_for(3, 0.5), 2);
        assert_eq!(instances_for(1, 0.1), 1);
        // 0.7 * 10 is 7.000000000000001 in binary floating point.
        assert_eq!(instances_for(10, 0.7), 7);
        let shares = plan_multi_core(&[0.5, 0.0, 0.5], 3);
        assert_eq!(shares.len(), 2);
        assert_eq!(shares[1].index, 2);
        assert_eq!(shares[1].cores, 1.5);
        assert_eq!(shares[1].instances, 2);
    }
}
