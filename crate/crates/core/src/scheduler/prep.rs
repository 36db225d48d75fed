use std::collections::{BTreeMap, BTreeSet};

/// Result of one preparation phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrepOutcome {
    pub exit_early: bool,
    /// Preparation time handed over to the focus phase.
    pub t_remain: f64,
    /// Spread measured after the last sweep.
    pub diff_peak: u64,
    pub sweeps: u32,
    /// Set when the campaign budget ran out before the phase finished.
    pub out_of_budget: bool,
    pub per_fuzzer_unique: BTreeMap<String, u64>,
    pub winners: BTreeSet<String>,
}

impl PrepOutcome {
    pub fn t_prep_actual(&self, t_prep: f64) -> f64 {
        t_prep - self.t_remain
    }
}

/// Leftover time below this is not worth another sweep.
const MIN_SWEEP: f64 = 1.0;

/// The sweep loop of the preparation phase.
///
/// `sweep(t_run)` gives every fuzzer one slice of `t_run` seconds and returns
/// the resulting peak difference, or `None` if the campaign budget ran out.
/// Fuzzer bookkeeping (`per_fuzzer_unique`, `winners`) is left to the caller.
pub fn prep_phase<E>(
    t_prep: f64,
    slice: f64,
    theta_cur: f64,
    mut sweep: impl FnMut(f64) -> Result<Option<u64>, E>,
) -> Result<PrepOutcome, E> {
    let mut out = PrepOutcome {
        t_remain: t_prep,
        ..PrepOutcome::default()
    };
    while out.t_remain >= MIN_SWEEP {
        let t_run = out.t_remain.min(slice);
        out.t_remain -= t_run;
        if out.t_remain < MIN_SWEEP {
            out.t_remain = 0.0;
        }
        out.sweeps += 1;
        match sweep(t_run)? {
            Some(diff) => {
                out.diff_peak = diff;
                if diff as f64 > theta_cur {
                    out.exit_early = true;
                    return Ok(out);
                }
            }
            None => {
                out.out_of_budget = true;
                out.t_remain = 0.0;
                return Ok(out);
            }
        }
    }
    out.t_remain = 0.0;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn scripted(diffs: &[u64]) -> impl FnMut(f64) -> Result<Option<u64>, Infallible> + '_ {
        let mut i = 0;
        move |_| {
            let d = diffs[i.min(diffs.len() - 1)];
            i += 1;
            Ok(Some(d))
        }
    }

    #[test]
    fn early_exit_after_first_sweep() {
        let out = prep_phase(300.0, 30.0, 100.0, scripted(&[857])).unwrap();
        assert!(out.exit_early);
        assert_eq!(out.t_remain, 270.0);
        assert_eq!(out.t_prep_actual(300.0), 30.0);
        assert_eq!(out.sweeps, 1);
    }

    #[test]
    fn no_exit_runs_whole_budget() {
        let out = prep_phase(300.0, 30.0, 300.0, scripted(&[116])).unwrap();
        assert!(!out.exit_early);
        assert_eq!(out.t_remain, 0.0);
        assert_eq!(out.sweeps, 10);
        assert_eq!(out.diff_peak, 116);
    }

    #[test]
    fn equal_to_threshold_does_not_exit() {
        let out = prep_phase(60.0, 30.0, 50.0, scripted(&[50])).unwrap();
        assert!(!out.exit_early);
    }

    #[test]
    fn exit_on_last_sweep_leaves_nothing() {
        let mut d = vec![0; 9];
        d.push(92);
        let out = prep_phase(300.0, 30.0, 75.0, scripted(&d)).unwrap();
        assert!(out.exit_early);
        assert_eq!(out.t_remain, 0.0);
    }

    #[test]
    fn residue_and_short_last_slice() {
        let mut runs = Vec::new();
        let out = prep_phase(70.5, 30.0, 1e9, |t| {
            runs.push(t);
            Ok::<_, Infallible>(Some(0))
        })
        .unwrap();
        assert_eq!(runs, vec![30.0, 30.0, 10.5]);
        assert_eq!(out.t_remain, 0.0);

        runs.clear();
        prep_phase(60.4, 30.0, 1e9, |t| {
            runs.push(t);
            Ok::<_, Infallible>(Some(0))
        })
        .unwrap();
        // 0.4 s left after two slices counts as exhausted.
        assert_eq!(runs, vec![30.0, 30.0]);
    }

    #[test]
    fn budget_exhaustion_stops_sweeping() {
        let mut n = 0;
        let out = prep_phase(300.0, 30.0, 100.0, |_| {
            n += 1;
            Ok::<_, Infallible>(if n < 3 { Some(1) } else { None })
        })
        .unwrap();
        assert!(out.out_of_budget && !out.exit_early);
        assert_eq!(out.sweeps, 3);
    }
}
