use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::FuzzerLayout;
use crate::adapter::{
    AdapterError, Assignment, ClockWindow, ExecutionOracle, FuzzerHandle, FuzzerSpec, FuzzerState,
    ResourceLimiter, VirtualTime,
};
use crate::bitmap::CoverageBitmap;
use crate::sim::{Scenario, SimActor, SimFuzzer, SimOracle};
use crate::store::SharedStore;
use crate::sync::{SeedSyncer, SyncMember, SyncReport};
use crate::Error;

use super::{
    diff_peak, plan_multi_core, plan_single_core, prep_phase, resource_allocator,
    AllocationOptions, Policy, PrepOutcome, RoundRecord, ScheduleConfig, SchedulerState,
};

/// Name used for the ensemble-wide row of the coverage series.
pub const UNION: &str = "union";

/// Clock slack when comparing against the budget.
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Trend {
    pub count: u64,
    pub density: f64,
}

/// Current count and density of every fuzzer's accumulated bitmap.
pub fn trend_snapshot(handles: &[FuzzerHandle]) -> BTreeMap<String, Trend> {
    handles
        .iter()
        .map(|h| {
            let m = h.lock_monitor();
            let b = m.bitmap();
            (
                h.name().to_string(),
                Trend {
                    count: b.count(),
                    density: b.density(),
                },
            )
        })
        .collect()
}

/// One row of the coverage time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSample {
    pub cpu_seconds: f64,
    pub fuzzer: String,
    pub count: u64,
    pub density: f64,
}

/// Receives telemetry while a campaign runs.
pub trait CampaignObserver {
    fn on_round(&mut self, _record: &RoundRecord, _campaign: &Campaign) -> Result<(), Error> {
        Ok(())
    }
    fn on_sample(&mut self, _sample: &CoverageSample) -> Result<(), Error> {
        Ok(())
    }
    fn on_sync(&mut self, _round: u32, _report: &SyncReport) {}
}

/// Observer that discards everything.
impl CampaignObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub rounds: Vec<RoundRecord>,
    pub samples: Vec<CoverageSample>,
    pub final_counts: BTreeMap<String, u64>,
    pub union_count: u64,
    pub final_density: f64,
    pub elapsed_cpu: f64,
    /// Focus CPU seconds per fuzzer summed over all rounds.
    pub focus_cpu: BTreeMap<String, f64>,
    /// Set when every fuzzer failed before the budget was spent.
    pub aborted: bool,
}

impl CampaignResult {
    pub fn focus_share(&self, fuzzer: &str) -> f64 {
        let total: f64 = self.focus_cpu.values().sum();
        if total > 0.0 {
            self.focus_cpu.get(fuzzer).copied().unwrap_or(0.0) / total
        } else {
            0.0
        }
    }
}

pub struct Campaign {
    config: ScheduleConfig,
    handles: Vec<FuzzerHandle>,
    store: SharedStore,
    oracle: Arc<ExecutionOracle>,
    limiter: Box<dyn ResourceLimiter>,
    syncer: SeedSyncer,
    state: SchedulerState,
    samples: Vec<CoverageSample>,
    rounds: Vec<RoundRecord>,
    warned_scaling: bool,
}

impl Campaign {
    pub fn new(
        config: ScheduleConfig,
        handles: Vec<FuzzerHandle>,
        store: SharedStore,
        oracle: Arc<ExecutionOracle>,
        limiter: Box<dyn ResourceLimiter>,
        rng_seed: u64,
    ) -> Result<Self, Error> {
        config.validate().map_err(|(_, msg)| Error::Invalid(msg))?;
        if handles.is_empty() {
            return Err(Error::Invalid(
                "a campaign needs at least one fuzzer".into(),
            ));
        }
        let mut names: Vec<&str> = handles.iter().map(|h| h.name()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("duplicate fuzzer name `{}`", w[0])));
        }
        if names.contains(&UNION) {
            return Err(Error::Invalid(format!(
                "`{UNION}` is reserved and cannot name a fuzzer"
            )));
        }
        let state = SchedulerState::new(&config, rng_seed);
        Ok(Self {
            config,
            handles,
            store,
            oracle,
            limiter,
            syncer: SeedSyncer::new(),
            state,
            samples: Vec::new(),
            rounds: Vec::new(),
            warned_scaling: false,
        })
    }

    /// A campaign over a simulated scenario on virtual time, with corpora
    /// under `root` in `store`.
    pub fn simulated(
        scenario: &Scenario,
        config: ScheduleConfig,
        rng_seed: u64,
        store: SharedStore,
        root: &Path,
        map_size: usize,
    ) -> Result<Self, Error> {
        crate::bitmap::check_map_size(map_size)?;
        scenario.validate()?;
        if scenario.branches as usize > map_size {
            return Err(Error::Invalid(format!(
                "scenario {} has {} branches but the map holds {map_size}",
                scenario.name, scenario.branches
            )));
        }
        let universe = Arc::new(scenario.universe()?);
        let oracle = Arc::new(ExecutionOracle::Simulated(SimOracle::new(
            universe.clone(),
            map_size,
        )));
        let handles = scenario
            .fuzzers
            .iter()
            .map(|profile| {
                let layout = FuzzerLayout::new(root, &FuzzerSpec::named(&profile.name));
                let actor = SimActor::new(universe.clone(), profile.clone(), rng_seed);
                let fuzzer = SimFuzzer::new(actor, layout, store.clone());
                FuzzerHandle::new(Box::new(fuzzer), map_size)
            })
            .collect();
        Self::new(
            config,
            handles,
            store,
            oracle,
            Box::new(VirtualTime),
            rng_seed,
        )
    }

    pub fn with_syncer(mut self, syncer: SeedSyncer) -> Self {
        self.syncer = syncer;
        self
    }

    /// Continues from a saved state instead of round 1.
    pub fn with_state(mut self, state: SchedulerState) -> Self {
        self.state = state;
        self
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn handles(&self) -> &[FuzzerHandle] {
        &self.handles
    }

    pub fn handles_mut(&mut self) -> &mut [FuzzerHandle] {
        &mut self.handles
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn syncer(&self) -> &SeedSyncer {
        &self.syncer
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn union_bitmap(&self) -> CoverageBitmap {
        let mut u = CoverageBitmap::empty(self.oracle.map_size());
        for h in &self.handles {
            u.union_into(h.lock_monitor().bitmap())
                .expect("all monitors share the oracle map size");
        }
        u
    }

    pub fn trend_snapshot(&self) -> BTreeMap<String, Trend> {
        trend_snapshot(&self.handles)
    }

    fn budget_left(&self) -> f64 {
        self.config.total_budget - self.state.elapsed_cpu
    }

    /// Clips a slot of `wall` seconds on `cores` cores to the budget. The
    /// flag is set when the slot was cut short.
    fn clip(&self, wall: f64, cores: f64) -> (f64, bool) {
        let left = self.budget_left();
        if left <= EPS {
            return (0.0, true);
        }
        let max_wall = left / cores;
        if wall > max_wall + EPS {
            (max_wall, true)
        } else {
            (wall, false)
        }
    }

    fn live(&self) -> Vec<usize> {
        (0..self.handles.len())
            .filter(|&i| !self.handles[i].is_failed())
            .collect()
    }

    fn run_slot(&mut self, active: &[Assignment], wall: f64) -> Result<(), Error> {
        let cores: f64 = active.iter().map(|a| a.cores).sum();
        let start = self.state.elapsed_cpu;
        let window = ClockWindow {
            start,
            end: start + cores * wall,
        };
        self.limiter.run(&mut self.handles, active, wall, window)?;
        self.state.elapsed_cpu = window.end;
        Ok(())
    }

    fn harvest(&mut self, observer: &mut dyn CampaignObserver) -> Result<(), Error> {
        for h in &self.handles {
            h.harvest(self.store.as_ref(), &self.oracle)
                .map_err(|source| Error::Io {
                    context: format!("scanning corpus of {}", h.name()),
                    source,
                })?;
        }
        let cpu_seconds = self.state.elapsed_cpu;
        let mut union = CoverageBitmap::empty(self.oracle.map_size());
        for h in &self.handles {
            let m = h.lock_monitor();
            let b = m.bitmap();
            union.union_into(b)?;
            let s = CoverageSample {
                cpu_seconds,
                fuzzer: h.name().to_string(),
                count: b.count(),
                density: b.density(),
            };
            drop(m);
            observer.on_sample(&s)?;
            self.samples.push(s);
        }
        let s = CoverageSample {
            cpu_seconds,
            fuzzer: UNION.to_string(),
            count: union.count(),
            density: union.density(),
        };
        observer.on_sample(&s)?;
        self.samples.push(s);
        Ok(())
    }

    fn sync(
        &mut self,
        after: Option<&str>,
        observer: &mut dyn CampaignObserver,
    ) -> Result<(), Error> {
        if !self.config.seed_sync {
            return Ok(());
        }
        let live = self.live();
        let members: Vec<SyncMember<'_>> = live
            .iter()
            .map(|&i| SyncMember {
                name: self.handles[i].name(),
                layout: self.handles[i].layout(),
            })
            .collect();
        let round = self.state.round;
        let report = match after {
            None => self.syncer.sync_all(self.store.as_ref(), &members, round)?,
            Some(name) => {
                self.syncer
                    .sync_after_focus_run(self.store.as_ref(), &members, name, round)?
            }
        };
        observer.on_sync(round, &report);
        Ok(())
    }

    /// Starts a stopped fuzzer and leaves it paused with `instances`
    /// instances. Failures mark the fuzzer failed.
    fn ready(&mut self, i: usize, instances: usize) {
        let h = &mut self.handles[i];
        if h.is_failed() {
            return;
        }
        let mut step = || -> Result<(), AdapterError> {
            if h.state() == FuzzerState::Stopped {
                h.fuzzer_mut().start()?;
            }
            if h.fuzzer().instances() != instances {
                h.fuzzer_mut().scale_to(instances)?;
            }
            if h.state() == FuzzerState::Running {
                h.fuzzer_mut().pause()?;
            }
            Ok(())
        };
        match step() {
            Ok(()) => {}
            Err(AdapterError::UnsupportedScaling { .. }) => {
                if !self.warned_scaling {
                    log::warn!(
                        "{} cannot scale to {instances} instances; keeping its current count",
                        self.handles[i].name()
                    );
                    self.warned_scaling = true;
                }
                let h = &mut self.handles[i];
                if h.state() == FuzzerState::Running {
                    if let Err(e) = h.fuzzer_mut().pause() {
                        h.mark_failed(e.to_string());
                    }
                }
            }
            Err(e) => {
                let h = &mut self.handles[i];
                h.mark_failed(e.to_string());
                let _ = h.fuzzer_mut().stop();
            }
        }
    }

    /// One preparation sweep: every live fuzzer gets `t_run` seconds.
    fn sweep(
        &mut self,
        t_run: f64,
        observer: &mut dyn CampaignObserver,
    ) -> Result<Option<u64>, Error> {
        let live = self.live();
        if live.is_empty() {
            return Ok(None);
        }
        let cores = f64::from(self.config.cores);
        let mut short = false;
        if self.config.cores == 1 {
            for &i in &live {
                if self.handles[i].is_failed() {
                    continue;
                }
                let (wall, cut) = self.clip(t_run, 1.0);
                if wall > 0.0 {
                    self.run_slot(
                        &[Assignment {
                            index: i,
                            cores: 1.0,
                        }],
                        wall,
                    )?;
                }
                if cut {
                    short = true;
                    break;
                }
            }
        } else {
            let per = cores / live.len() as f64;
            let active: Vec<Assignment> = live
                .iter()
                .map(|&index| Assignment { index, cores: per })
                .collect();
            let (wall, cut) = self.clip(t_run, cores);
            if wall > 0.0 {
                self.run_slot(&active, wall)?;
            }
            short = cut;
        }
        self.harvest(observer)?;
        if short {
            return Ok(None);
        }
        let live = self.live();
        if live.is_empty() {
            return Ok(None);
        }
        let bitmaps: Vec<CoverageBitmap> = live.iter().map(|&i| self.handles[i].bitmap()).collect();
        let refs: Vec<&CoverageBitmap> = bitmaps.iter().collect();
        Ok(Some(diff_peak(
            &refs,
            self.config.diff_source,
            self.options(),
        )?))
    }

    fn options(&self) -> AllocationOptions {
        self.config.allocation_options()
    }

    /// Runs the focus phase over `live` with per-fuzzer `fractions`; returns
    /// focus CPU seconds per handle index.
    fn focus(
        &mut self,
        live: &[usize],
        fractions: &[f64],
        t_eff: f64,
        observer: &mut dyn CampaignObserver,
    ) -> Result<BTreeMap<usize, f64>, Error> {
        let before: Vec<f64> = self.handles.iter().map(|h| h.cpu_time()).collect();
        if self.config.cores == 1 {
            for slot in plan_single_core(fractions, t_eff) {
                let i = live[slot.index];
                if self.handles[i].is_failed() {
                    continue;
                }
                let (wall, cut) = self.clip(slot.seconds, 1.0);
                if wall > 0.0 {
                    self.run_slot(
                        &[Assignment {
                            index: i,
                            cores: 1.0,
                        }],
                        wall,
                    )?;
                    self.harvest(observer)?;
                    let name = self.handles[i].name().to_string();
                    self.sync(Some(&name), observer)?;
                }
                if cut {
                    break;
                }
            }
        } else {
            let shares = plan_multi_core(fractions, self.config.cores);
            for (k, &i) in live.iter().enumerate() {
                if fractions[k] <= 0.0 {
                    if let Err(e) = self.handles[i].fuzzer_mut().stop() {
                        self.handles[i].mark_failed(e.to_string());
                    }
                }
            }
            let mut active = Vec::with_capacity(shares.len());
            for s in &shares {
                let i = live[s.index];
                self.ready(i, s.instances);
                active.push(Assignment {
                    index: i,
                    cores: s.cores,
                });
            }
            let total: f64 = active.iter().map(|a| a.cores).sum();
            let (wall, _) = self.clip(t_eff, total);
            if wall > 0.0 {
                self.run_slot(&active, wall)?;
                self.harvest(observer)?;
                self.sync(None, observer)?;
            }
        }
        Ok(live
            .iter()
            .map(|&i| (i, self.handles[i].cpu_time() - before[i]))
            .collect())
    }

    fn run_round(&mut self, observer: &mut dyn CampaignObserver) -> Result<RoundRecord, Error> {
        let round = self.state.round;
        let theta = self.state.theta_cur;
        self.sync(None, observer)?;
        for i in self.live() {
            self.ready(i, 1);
        }

        let (live, fractions, prep, t_eff) = match self.config.policy {
            Policy::Adaptive => {
                let (t_prep, slice) = (self.config.t_prep, self.config.slice);
                let mut prep =
                    prep_phase(t_prep, slice, theta, |t_run| self.sweep(t_run, observer))?;
                let live = self.live();
                let bitmaps: Vec<CoverageBitmap> =
                    live.iter().map(|&i| self.handles[i].bitmap()).collect();
                let refs: Vec<&CoverageBitmap> = bitmaps.iter().collect();
                let fractions = if refs.is_empty() {
                    Vec::new()
                } else {
                    let alloc = resource_allocator(&refs, prep.exit_early, self.options())?;
                    for (k, &i) in live.iter().enumerate() {
                        let name = self.handles[i].name().to_string();
                        prep.per_fuzzer_unique.insert(name.clone(), alloc.unique[k]);
                        if alloc.winners.contains(&k) {
                            prep.winners.insert(name);
                        }
                    }
                    alloc.fractions
                };
                self.state
                    .aimd_update(prep.exit_early, self.config.theta_init);
                self.sync(None, observer)?;
                let t_eff = self.config.t_focus + prep.t_remain;
                (live, fractions, prep, t_eff)
            }
            Policy::RoundRobin => {
                let live = self.live();
                let n = live.len().max(1) as f64;
                let fractions = vec![1.0 / n; live.len()];
                let t_eff = self.config.t_prep + self.config.t_focus;
                (live, fractions, PrepOutcome::default(), t_eff)
            }
        };

        let spent = if live.is_empty() {
            BTreeMap::new()
        } else {
            self.focus(&live, &fractions, t_eff, observer)?
        };

        let t_prep_actual = match self.config.policy {
            Policy::Adaptive => prep.t_prep_actual(self.config.t_prep),
            Policy::RoundRobin => 0.0,
        };
        let winner = if prep.exit_early {
            prep.winners.iter().cloned().collect::<Vec<_>>().join(",")
        } else {
            RoundRecord::NO_WINNER.to_string()
        };
        let mut allocation = BTreeMap::new();
        let mut focus_cpu = BTreeMap::new();
        for (i, h) in self.handles.iter().enumerate() {
            let name = h.name().to_string();
            let k = live.iter().position(|&j| j == i);
            allocation.insert(name.clone(), k.map_or(0.0, |k| fractions[k]));
            focus_cpu.insert(name, spent.get(&i).copied().unwrap_or(0.0));
        }
        Ok(RoundRecord {
            round,
            winner,
            diff_peak: prep.diff_peak,
            theta,
            t_prep_actual,
            t_focus_assigned: t_eff,
            allocation,
            counts: self
                .trend_snapshot()
                .into_iter()
                .map(|(k, t)| (k, t.count))
                .collect(),
            focus_cpu,
        })
    }

    fn stop_all(&mut self) {
        for h in &mut self.handles {
            if let Err(e) = h.fuzzer_mut().stop() {
                log::warn!("stopping {}: {e}", h.name());
            }
        }
    }

    /// Runs rounds until the CPU budget is spent or every fuzzer failed.
    pub fn run(&mut self, observer: &mut dyn CampaignObserver) -> Result<CampaignResult, Error> {
        let outcome = self.run_rounds(observer);
        self.stop_all();
        let aborted = outcome?;
        let union = self.union_bitmap();
        let mut focus_cpu: BTreeMap<String, f64> = self
            .handles
            .iter()
            .map(|h| (h.name().to_string(), 0.0))
            .collect();
        for r in &self.rounds {
            for (k, v) in &r.focus_cpu {
                *focus_cpu.entry(k.clone()).or_default() += v;
            }
        }
        Ok(CampaignResult {
            rounds: self.rounds.clone(),
            samples: self.samples.clone(),
            final_counts: self
                .trend_snapshot()
                .into_iter()
                .map(|(k, t)| (k, t.count))
                .collect(),
            union_count: union.count(),
            final_density: union.density(),
            elapsed_cpu: self.state.elapsed_cpu,
            focus_cpu,
            aborted,
        })
    }

    fn run_rounds(&mut self, observer: &mut dyn CampaignObserver) -> Result<bool, Error> {
        for i in self.live() {
            self.ready(i, 1);
        }
        loop {
            if self.budget_left() <= EPS {
                return Ok(false);
            }
            if self.live().is_empty() {
                log::error!("every fuzzer failed; aborting campaign");
                return Ok(true);
            }
            let record = self.run_round(observer)?;
            log::info!(
                "round {} winner={} diff_peak={} theta={} cpu={:.0}/{:.0}",
                record.round,
                record.winner,
                record.diff_peak,
                record.theta,
                self.state.elapsed_cpu,
                self.config.total_budget
            );
            self.state.round += 1;
            observer.on_round(&record, self)?;
            self.rounds.push(record);
        }
    }
}

/// Root directory of the simulated corpora for a campaign stored at `out`.
pub fn corpus_root(out: &Path) -> PathBuf {
    out.join("fuzzers")
}
