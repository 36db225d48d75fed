//! Two-phase scheduling.
//!
//! Each round synchronizes seeds, runs a preparation phase that measures
//! every fuzzer's coverage trend in short slices (exiting early once the
//! spread between best and worst exceeds a threshold), turns the measured
//! trends into a CPU allocation, adapts the threshold with an AIMD rule and
//! finally spends the focus phase on the chosen fuzzers.

mod allocator;
mod campaign;
mod focus;
mod prep;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitmap::{CountMode, SubtractMode};

pub use allocator::{
    allocate_counts, diff_peak, resource_allocator, unique_counts, AllocationOptions,
    ResourceAllocation,
};
pub use campaign::{
    corpus_root, trend_snapshot, Campaign, CampaignObserver, CampaignResult, CoverageSample, Trend,
    UNION,
};
pub use focus::{instances_for, plan_multi_core, plan_single_core, CoreShare, FocusSlot};
pub use prep::{prep_phase, PrepOutcome};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Trend-driven two-phase scheduling.
    #[default]
    #[serde(rename = "autofz", alias = "adaptive")]
    Adaptive,
    /// Equal focus time for every fuzzer, no preparation phase.
    #[serde(rename = "roundrobin", alias = "round-robin")]
    RoundRobin,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Adaptive => "autofz",
            Policy::RoundRobin => "roundrobin",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "autofz" | "adaptive" => Ok(Policy::Adaptive),
            "roundrobin" | "round-robin" => Ok(Policy::RoundRobin),
            other => Err(format!(
                "unknown policy `{other}` (expected autofz or roundrobin)"
            )),
        }
    }
}

/// Which counts the preparation phase compares to find the peak difference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffSource {
    /// Raw accumulated bitmap counts.
    #[default]
    Raw,
    /// Counts after removing coverage common to all fuzzers.
    Unique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Preparation budget per round, seconds.
    pub t_prep: f64,
    /// Focus budget per round, seconds.
    pub t_focus: f64,
    pub theta_init: f64,
    pub cores: u32,
    /// Preparation slice length, seconds.
    pub slice: f64,
    /// Campaign budget in CPU seconds.
    pub total_budget: f64,
    pub policy: Policy,
    pub diff_source: DiffSource,
    pub count: CountMode,
    pub subtract: SubtractMode,
    pub seed_sync: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_prep: 300.0,
            t_focus: 300.0,
            theta_init: 100.0,
            cores: 1,
            slice: 30.0,
            total_budget: 24.0 * 3600.0,
            policy: Policy::Adaptive,
            diff_source: DiffSource::Raw,
            count: CountMode::Entries,
            subtract: SubtractMode::Bits,
            seed_sync: true,
        }
    }
}

impl ScheduleConfig {
    /// Checks the invariants; on failure names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = [
            ("t_prep", self.t_prep),
            ("t_focus", self.t_focus),
            ("theta_init", self.theta_init),
            ("slice", self.slice),
            ("total_budget", self.total_budget),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((key, format!("{key} must be a positive number, got {v}")));
            }
        }
        if self.cores == 0 {
            return Err(("cores", "cores must be at least 1".into()));
        }
        if self.slice > self.t_prep {
            return Err((
                "slice",
                format!(
                    "slice ({}) must not exceed t_prep ({})",
                    self.slice, self.t_prep
                ),
            ));
        }
        Ok(())
    }

    pub fn allocation_options(&self) -> AllocationOptions {
        AllocationOptions {
            count: self.count,
            subtract: self.subtract,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub theta_cur: f64,
    /// Number of the round about to run, starting at 1.
    pub round: u32,
    pub elapsed_cpu: f64,
    pub rng_seed: u64,
}

impl SchedulerState {
    pub fn new(config: &ScheduleConfig, rng_seed: u64) -> Self {
        Self {
            theta_cur: config.theta_init,
            round: 1,
            elapsed_cpu: 0.0,
            rng_seed,
        }
    }

    pub fn aimd_update(&mut self, exit_early: bool, theta_init: f64) {
        self.theta_cur = aimd_update(self.theta_cur, exit_early, theta_init);
    }
}

/// Additive increase by `theta_init` after an early exit, halving otherwise.
pub fn aimd_update(theta_cur: f64, exit_early: bool, theta_init: f64) -> f64 {
    if exit_early {
        theta_cur + theta_init
    } else {
        theta_cur * 0.5
    }
}

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Early-exit winners joined by `,`, or `None`.
    pub winner: String,
    pub diff_peak: u64,
    /// Threshold in force during this round's preparation phase.
    pub theta: f64,
    pub t_prep_actual: f64,
    pub t_focus_assigned: f64,
    pub allocation: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
    /// CPU seconds each fuzzer actually received in the focus phase.
    #[serde(default)]
    pub focus_cpu: BTreeMap<String, f64>,
}

impl RoundRecord {
    pub const NO_WINNER: &'static str = "None";

    pub fn early_exit(&self) -> bool {
        self.winner != Self::NO_WINNER
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aimd_examples() {
        assert_eq!(aimd_update(100.0, true, 100.0), 200.0);
        assert_eq!(aimd_update(300.0, false, 100.0), 150.0);
        assert_eq!(aimd_update(75.0, true, 100.0), 175.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ScheduleConfig::default();
        assert_eq!(
            (c.t_prep, c.t_focus, c.theta_init, c.slice),
            (300.0, 300.0, 100.0, 30.0)
        );
        c.validate().unwrap();
        let bad = ScheduleConfig {
            slice: 400.0,
            ..c.clone()
        };
        assert_eq!(bad.validate().unwrap_err().0, "slice");
        let bad = ScheduleConfig {
            cores: 0,
            ..c.clone()
        };
        assert_eq!(bad.validate().unwrap_err().0, "cores");
        let bad = ScheduleConfig { t_focus: -1.0, ..c };
        assert_eq!(bad.validate().unwrap_err().0, "t_focus");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("autofz".parse::<Policy>().unwrap(), Policy::Adaptive);
        assert_eq!("RoundRobin".parse::<Policy>().unwrap(), Policy::RoundRobin);
        assert!("bandit".parse::<Policy>().is_err());
        assert_eq!(Policy::RoundRobin.to_string(), "roundrobin");
    }
}
