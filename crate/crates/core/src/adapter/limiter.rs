use std::path::PathBuf;
use std::time::Duration;

use super::{AdapterError, ClockWindow, FuzzerHandle, FuzzerState};

/// One fuzzer's share of a run slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub cores: f64,
}

/// Lets a set of fuzzers execute for one slot while holding each to its
/// core quota. Every fuzzer outside `active` stays paused.
///
/// Implementations charge each active handle `cores * wall` CPU seconds and
/// leave it paused afterwards. A fuzzer that dies during the slot is marked
/// failed and forfeits the rest of its time.
pub trait ResourceLimiter: Send {
    fn run(
        &mut self,
        handles: &mut [FuzzerHandle],
        active: &[Assignment],
        wall: f64,
        window: ClockWindow,
    ) -> Result<(), AdapterError>;
}

fn resume(h: &mut FuzzerHandle) {
    if h.is_failed() {
        return;
    }
    let r = match h.state() {
        FuzzerState::Paused => h.fuzzer_mut().resume(),
        FuzzerState::Stopped => h.fuzzer_mut().start(),
        FuzzerState::Running => Ok(()),
    };
    if let Err(e) = r {
        h.mark_failed(e.to_string());
    }
}

fn pause(h: &mut FuzzerHandle) {
    if h.state() == FuzzerState::Running {
        if let Err(e) = h.fuzzer_mut().pause() {
            h.mark_failed(e.to_string());
        }
    }
}

fn settle(handles: &mut [FuzzerHandle], active: &[Assignment], wall: f64) {
    for a in active {
        let h = &mut handles[a.index];
        if h.is_failed() {
            continue;
        }
        h.charge(a.cores * wall);
        if !h.fuzzer_mut().is_alive() {
            h.mark_failed("died mid-slot; remaining slot time forfeited");
            let _ = h.fuzzer_mut().stop();
            continue;
        }
        pause(h);
    }
}

/// Simulated fuzzers: no real time passes, each fuzzer is advanced by its
/// CPU share of the slot.
#[derive(Debug, Default, Clone, Copy)]
pub struct VirtualTime;

impl ResourceLimiter for VirtualTime {
    fn run(
        &mut self,
        handles: &mut [FuzzerHandle],
        active: &[Assignment],
        wall: f64,
        window: ClockWindow,
    ) -> Result<(), AdapterError> {
        for a in active {
            let h = &mut handles[a.index];
            resume(h);
            if h.is_failed() {
                continue;
            }
            if let Err(e) = h.fuzzer_mut().advance(a.cores * wall, window) {
                h.mark_failed(e.to_string());
            }
        }
        settle(handles, active, wall);
        Ok(())
    }
}

/// Portable quota enforcement by job control: a fuzzer allowed less than one
/// core per instance is duty-cycled with pause/resume inside each period.
#[derive(Debug, Clone, Copy)]
pub struct TimeSlicing {
    pub period: Duration,
}

impl Default for TimeSlicing {
    fn default() -> Self {
        Self {
            period: Duration::from_secs(1),
        }
    }
}

impl TimeSlicing {
    /// Fraction of each period the fuzzer may run.
    pub fn duty(cores: f64, instances: usize) -> f64 {
        (cores / instances.max(1) as f64).clamp(0.0, 1.0)
    }
}

fn sleep_secs(secs: f64) {
    if secs > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(secs));
    }
}

impl ResourceLimiter for TimeSlicing {
    fn run(
        &mut self,
        handles: &mut [FuzzerHandle],
        active: &[Assignment],
        wall: f64,
        _window: ClockWindow,
    ) -> Result<(), AdapterError> {
        let mut duties: Vec<(usize, f64)> = active
            .iter()
            .map(|a| {
                let n = handles[a.index].fuzzer().instances();
                (a.index, Self::duty(a.cores, n))
            })
            .collect();
        duties.sort_by(|a, b| a.1.total_cmp(&b.1));

        for a in active {
            resume(&mut handles[a.index]);
        }
        if duties.iter().all(|&(_, d)| d >= 1.0 - 1e-9) {
            sleep_secs(wall);
        } else {
            let period = self.period.as_secs_f64().max(1e-3);
            let cycles = (wall / period).ceil().max(1.0);
            let len = wall / cycles;
            for cycle in 0..cycles as usize {
                if cycle > 0 {
                    for &(i, _) in &duties {
                        resume(&mut handles[i]);
                    }
                }
                let mut elapsed = 0.0;
                for &(i, d) in &duties {
                    if d >= 1.0 - 1e-9 {
                        break;
                    }
                    sleep_secs((d - elapsed) * len);
                    elapsed = d;
                    pause(&mut handles[i]);
                }
                sleep_secs((1.0 - elapsed) * len);
            }
        }
        settle(handles, active, wall);
        Ok(())
    }
}

/// Quota enforcement through a cgroup v2 hierarchy: one child group per
/// fuzzer under `root`, with `cpu.max` set to `cores * period`.
#[derive(Debug, Clone)]
pub struct CgroupLimiter {
    pub root: PathBuf,
    pub period_us: u64,
}

impl CgroupLimiter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            period_us: 100_000,
        }
    }

    pub fn cpu_max(&self, cores: f64) -> String {
        let quota = (cores * self.period_us as f64).round().max(1000.0) as u64;
        format!("{quota} {}", self.period_us)
    }

    fn write(&self, path: PathBuf, value: &str) -> Result<(), AdapterError> {
        std::fs::write(&path, value).map_err(|source| AdapterError::Cgroup {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn apply(&self, handle: &FuzzerHandle, cores: f64) -> Result<(), AdapterError> {
        let dir = self.root.join(handle.name());
        std::fs::create_dir_all(&dir).map_err(|source| AdapterError::Cgroup {
            path: dir.display().to_string(),
            source,
        })?;
        self.write(dir.join("cpu.max"), &self.cpu_max(cores))?;
        for pid in handle.fuzzer().pids() {
            self.write(dir.join("cgroup.procs"), &pid.to_string())?;
        }
        Ok(())
    }
}

impl ResourceLimiter for CgroupLimiter {
    fn run(
        &mut self,
        handles: &mut [FuzzerHandle],
        active: &[Assignment],
        wall: f64,
        _window: ClockWindow,
    ) -> Result<(), AdapterError> {
        for a in active {
            resume(&mut handles[a.index]);
            if !handles[a.index].is_failed() {
                self.apply(&handles[a.index], a.cores)?;
            }
        }
        sleep_secs(wall);
        settle(handles, active, wall);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duty_cycle_fraction() {
        assert_eq!(TimeSlicing::duty(0.5, 1), 0.5);
        assert_eq!(TimeSlicing::duty(1.5, 2), 0.75);
        assert_eq!(TimeSlicing::duty(4.0, 1), 1.0);
    }

    #[test]
    fn cgroup_quota_format() {
        let l = CgroupLimiter::new("/sys/fs/cgroup/x");
        assert_eq!(l.cpu_max(2.4), "240000 100000");
        assert_eq!(l.cpu_max(1.0), "100000 100000");
    }
}
