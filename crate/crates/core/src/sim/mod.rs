//! Deterministic synthetic fuzzing.
//!
//! A [`BranchUniverse`] stands in for the target program: branches, an
//! optional dependency DAG (a branch is reachable only once all its parents
//! are covered) and a per-branch ease factor. A [`SimProfile`] gives one
//! fuzzer's discovery rate for every branch. Discovery of each reachable
//! branch is a Poisson process in the fuzzer's own CPU time, so a whole
//! day-long campaign runs in seconds on a virtual clock.
//!
//! Simulated fuzzers write real corpus files through a
//! [`CorpusStore`](crate::store::CorpusStore), so monitoring and seed sync
//! run exactly as they do for external fuzzers.

mod scenario;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::OracleError;
use crate::adapter::{AdapterError, ClockWindow, Fuzzer, FuzzerLayout, FuzzerState};
use crate::bitmap::{bucket_of, CoverageBitmap, RawHitMap};
use crate::store::SharedStore;

pub use scenario::{ChainSpec, Scenario, ScenarioError};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("edge {parent} -> {child}: parent must have a smaller id than child")]
    NotTopological { parent: u32, child: u32 },
    #[error("branch {branch} outside universe of {n_branches}")]
    OutOfRange { branch: u32, n_branches: u32 },
    #[error("negative or non-finite rate {0}")]
    BadRate(f64),
    #[error("phase windows overlap or are empty: [{0}, {1})")]
    BadPhase(f64, f64),
}

/// The simulated target: branches, dependency edges and per-branch ease.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchUniverse {
    parents: Vec<Vec<u32>>,
    children: Vec<Vec<u32>>,
    ease: Vec<f64>,
}

impl BranchUniverse {
    pub fn independent(n_branches: u32) -> Self {
        Self {
            parents: vec![Vec::new(); n_branches as usize],
            children: vec![Vec::new(); n_branches as usize],
            ease: vec![1.0; n_branches as usize],
        }
    }

    /// Edges must point from a lower to a higher branch id, which keeps the
    /// graph acyclic by construction.
    pub fn with_edges(n_branches: u32, edges: &[[u32; 2]]) -> Result<Self, SimError> {
        let mut u = Self::independent(n_branches);
        for &[p, c] in edges {
            u.add_edge(p, c)?;
        }
        Ok(u)
    }

    pub fn add_edge(&mut self, parent: u32, child: u32) -> Result<(), SimError> {
        let n = self.n_branches();
        for b in [parent, child] {
            if b >= n {
                return Err(SimError::OutOfRange {
                    branch: b,
                    n_branches: n,
                });
            }
        }
        if parent >= child {
            return Err(SimError::NotTopological { parent, child });
        }
        if !self.parents[child as usize].contains(&parent) {
            self.parents[child as usize].push(parent);
            self.children[parent as usize].push(child);
        }
        Ok(())
    }

    pub fn set_ease(&mut self, branch: u32, ease: f64) -> Result<(), SimError> {
        if !(ease.is_finite() && ease >= 0.0) {
            return Err(SimError::BadRate(ease));
        }
        self.ease[branch as usize] = ease;
        Ok(())
    }

    pub fn n_branches(&self) -> u32 {
        self.parents.len() as u32
    }

    pub fn parents(&self, b: u32) -> &[u32] {
        &self.parents[b as usize]
    }

    pub fn children(&self, b: u32) -> &[u32] {
        &self.children[b as usize]
    }

    pub fn ease(&self, b: u32) -> f64 {
        self.ease[b as usize]
    }

    /// Hit map for executing an input that covers `seed`'s branches.
    /// Branch `b` maps to bitmap entry `b`.
    pub fn execute(&self, seed: &SimSeed, map_size: usize) -> Result<RawHitMap, SimError> {
        let mut raw = RawHitMap::new(map_size);
        for &b in seed.branches() {
            if b >= self.n_branches() || b as usize >= map_size {
                return Err(SimError::OutOfRange {
                    branch: b,
                    n_branches: self.n_branches().min(map_size as u32),
                });
            }
            raw.hit(b as usize);
        }
        Ok(raw)
    }
}

const SEED_MAGIC: &[u8; 8] = b"SIMSEED1";

/// A simulated input. Its bytes are a canonical encoding of the branch set
/// it covers, so equal sets always hash equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimSeed {
    branches: Vec<u32>,
}

impl SimSeed {
    pub fn new(branches: impl IntoIterator<Item = u32>) -> Self {
        let mut branches: Vec<u32> = branches.into_iter().collect();
        branches.sort_unstable();
        branches.dedup();
        Self { branches }
    }

    pub fn branches(&self) -> &[u32] {
        &self.branches
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.branches.len());
        out.extend_from_slice(SEED_MAGIC);
        out.extend_from_slice(&(self.branches.len() as u32).to_le_bytes());
        for b in &self.branches {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    /// Accepts only the canonical form produced by [`encode`](Self::encode).
    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let rest = bytes.strip_prefix(SEED_MAGIC)?;
        let (len, rest) = rest.split_first_chunk::<4>()?;
        let len = u32::from_le_bytes(*len) as usize;
        if rest.len() != len.checked_mul(4)? {
            return None;
        }
        let branches: Vec<u32> = rest
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if branches.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        Some(Self { branches })
    }
}

/// Execution oracle for simulated seeds.
#[derive(Debug, Clone)]
pub struct SimOracle {
    universe: Arc<BranchUniverse>,
    map_size: usize,
}

impl SimOracle {
    pub fn new(universe: Arc<BranchUniverse>, map_size: usize) -> Self {
        Self { universe, map_size }
    }

    pub fn map_size(&self) -> usize {
        self.map_size
    }

    pub fn execute(&self, input: &[u8]) -> Result<RawHitMap, OracleError> {
        let seed = SimSeed::decode(input).ok_or(OracleError::NotASeed)?;
        self.universe
            .execute(&seed, self.map_size)
            .map_err(|_| OracleError::NotASeed)
    }

    /// Same coverage as `execute` followed by a bucketed union, without
    /// materialising the raw map.
    pub fn fold_into(&self, input: &[u8], bitmap: &mut CoverageBitmap) -> Result<(), OracleError> {
        let seed = SimSeed::decode(input).ok_or(OracleError::NotASeed)?;
        let limit = self.universe.n_branches().min(self.map_size as u32);
        if bitmap.map_size() != self.map_size || seed.branches().iter().any(|&b| b >= limit) {
            return Err(OracleError::NotASeed);
        }
        for &b in seed.branches() {
            bitmap
                .or_entry(b as usize, bucket_of(1))
                .map_err(|_| OracleError::NotASeed)?;
        }
        Ok(())
    }
}

/// Discovery rate override for an inclusive range of branch ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateRange {
    pub first: u32,
    pub last: u32,
    pub rate: f64,
}

/// Rate multiplier applied while the campaign clock is in `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub from: f64,
    pub to: f64,
    pub multiplier: f64,
}

/// A simulated fuzzer's behaviour: expected discoveries per CPU-second for
/// each reachable branch, optionally modulated over campaign time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimProfile {
    pub name: String,
    /// Rate for branches not covered by any entry of `rates`.
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub rates: Vec<RateRange>,
    #[serde(default)]
    pub phases: Vec<Phase>,
    /// Random stream id; profiles sharing a stream draw identical
    /// discovery thresholds.
    #[serde(default)]
    pub stream: u64,
}

impl SimProfile {
    pub fn uniform(name: &str, rate: f64, stream: u64) -> Self {
        Self {
            name: name.to_string(),
            rate,
            rates: Vec::new(),
            phases: Vec::new(),
            stream,
        }
    }

    /// Base rate for branch `b`; later ranges override earlier ones.
    pub fn rate_of(&self, b: u32) -> f64 {
        self.rates
            .iter()
            .rev()
            .find(|r| (r.first..=r.last).contains(&b))
            .map_or(self.rate, |r| r.rate)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for r in std::iter::once(self.rate).chain(self.rates.iter().map(|r| r.rate)) {
            if !(r.is_finite() && r >= 0.0) {
                return Err(SimError::BadRate(r));
            }
        }
        let mut phases: Vec<&Phase> = self.phases.iter().collect();
        phases.sort_by(|a, b| a.from.total_cmp(&b.from));
        let mut end = f64::NEG_INFINITY;
        for p in phases {
            if !(p.from < p.to) || p.from < end {
                return Err(SimError::BadPhase(p.from, p.to));
            }
            if !(p.multiplier.is_finite() && p.multiplier >= 0.0) {
                return Err(SimError::BadRate(p.multiplier));
            }
            end = p.to;
        }
        Ok(())
    }

    /// Integral of the rate multiplier over `[start, end)`.
    fn multiplier_integral(&self, start: f64, end: f64) -> f64 {
        let mut covered = 0.0;
        let mut total = 0.0;
        for p in &self.phases {
            let overlap = (end.min(p.to) - start.max(p.from)).max(0.0);
            covered += overlap;
            total += overlap * p.multiplier;
        }
        total + (end - start - covered)
    }

    fn multiplier_at(&self, t: f64) -> f64 {
        self.phases
            .iter()
            .find(|p| p.from <= t && t < p.to)
            .map_or(1.0, |p| p.multiplier)
    }

    /// Rate-weighted duration of running `cpu_seconds` spread over `window`.
    pub fn effective_time(&self, cpu_seconds: f64, window: ClockWindow) -> f64 {
        if self.phases.is_empty() {
            return cpu_seconds;
        }
        let len = window.end - window.start;
        if len <= 0.0 {
            return cpu_seconds * self.multiplier_at(window.start);
        }
        cpu_seconds * self.multiplier_integral(window.start, window.end) / len
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FireTime(f64);

impl Eq for FireTime {}

impl PartialOrd for FireTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FireTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Discovery state of one simulated fuzzer.
///
/// Each branch carries a fixed Exp(1) threshold drawn from the fuzzer's
/// random stream. Once the branch becomes reachable at intrinsic time `t0`
/// it fires at `t0 + threshold / rate`, which is exactly a Poisson
/// first-arrival, and is independent of how the run is cut into slots.
#[derive(Debug, Clone)]
pub struct SimActor {
    profile: SimProfile,
    universe: Arc<BranchUniverse>,
    rng: ChaCha8Rng,
    rates: Vec<f64>,
    covered: Vec<bool>,
    found: Vec<bool>,
    missing_parents: Vec<u32>,
    pending: BinaryHeap<Reverse<(FireTime, u32)>>,
    clock: f64,
}

impl SimActor {
    pub fn new(universe: Arc<BranchUniverse>, profile: SimProfile, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(profile.stream);
        let n = universe.n_branches();
        let rates = (0..n)
            .map(|b| profile.rate_of(b) * universe.ease(b))
            .collect();
        let missing_parents = (0..n).map(|b| universe.parents(b).len() as u32).collect();
        let mut actor = Self {
            profile,
            universe,
            rng,
            rates,
            covered: vec![false; n as usize],
            found: vec![false; n as usize],
            missing_parents,
            pending: BinaryHeap::new(),
            clock: 0.0,
        };
        for b in 0..n {
            if actor.missing_parents[b as usize] == 0 {
                actor.enable(b, 0.0);
            }
        }
        actor
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    pub fn universe(&self) -> &Arc<BranchUniverse> {
        &self.universe
    }

    fn threshold(&mut self, b: u32) -> f64 {
        self.rng.set_word_pos(u128::from(b) * 2);
        let bits = self.rng.next_u64() >> 11;
        let u = (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        -u.ln()
    }

    fn enable(&mut self, b: u32, at: f64) {
        let rate = self.rates[b as usize];
        if rate > 0.0 {
            let fire = at + self.threshold(b) / rate;
            self.pending.push(Reverse((FireTime(fire), b)));
        }
    }

    fn cover(&mut self, b: u32, at: f64) -> bool {
        if std::mem::replace(&mut self.covered[b as usize], true) {
            return false;
        }
        let universe = self.universe.clone();
        for &c in universe.children(b) {
            let m = &mut self.missing_parents[c as usize];
            *m -= 1;
            if *m == 0 && !self.covered[c as usize] {
                self.enable(c, at);
            }
        }
        true
    }

    fn seed_for(&self, b: u32) -> SimSeed {
        SimSeed::new(self.universe.parents(b).iter().copied().chain([b]))
    }

    /// Runs the fuzzer for `cpu_seconds` within campaign-clock `window` and
    /// returns one seed per newly discovered branch, in discovery order.
    pub fn step(&mut self, cpu_seconds: f64, window: ClockWindow) -> Vec<SimSeed> {
        let end = self.clock + self.profile.effective_time(cpu_seconds, window);
        let mut seeds = Vec::new();
        while let Some(&Reverse((FireTime(t), b))) = self.pending.peek() {
            if t > end {
                break;
            }
            self.pending.pop();
            if self.cover(b, t) {
                self.found[b as usize] = true;
                seeds.push(self.seed_for(b));
            }
        }
        self.clock = end;
        seeds
    }

    /// Adds a seed from elsewhere to the fuzzer's visible corpus. Returns
    /// whether it covered anything new.
    pub fn observe(&mut self, seed: &SimSeed) -> bool {
        let mut new = false;
        for &b in seed.branches() {
            if b < self.universe.n_branches() {
                new |= self.cover(b, self.clock);
            }
        }
        new
    }

    pub fn is_covered(&self, b: u32) -> bool {
        self.covered[b as usize]
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    /// Branches this fuzzer discovered itself (not imported).
    pub fn discovered(&self) -> impl Iterator<Item = u32> + '_ {
        self.found
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(b, _)| b as u32)
    }

    /// Intrinsic (rate-weighted) time consumed so far.
    pub fn clock(&self) -> f64 {
        self.clock
    }
}

/// A [`Fuzzer`] backed by a [`SimActor`]. It imports new files from its
/// sync directory at the start of every run (keeping those that add
/// coverage, as AFL's sync stage does) and writes each discovery to its
/// queue.
pub struct SimFuzzer {
    actor: SimActor,
    layout: FuzzerLayout,
    store: SharedStore,
    state: FuzzerState,
    instances: usize,
    next_id: usize,
    imported: HashSet<PathBuf>,
    sync_version: Option<u64>,
}

impl SimFuzzer {
    pub fn new(actor: SimActor, layout: FuzzerLayout, store: SharedStore) -> Self {
        Self {
            actor,
            layout,
            store,
            state: FuzzerState::Stopped,
            instances: 0,
            next_id: 0,
            imported: HashSet::new(),
            sync_version: None,
        }
    }

    pub fn actor(&self) -> &SimActor {
        &self.actor
    }

    fn io(&self, source: std::io::Error) -> AdapterError {
        AdapterError::Io {
            fuzzer: self.actor.profile.name.clone(),
            source,
        }
    }

    fn queue(&self) -> &PathBuf {
        &self.layout.interesting[0]
    }

    fn write_seed(&mut self, seed: &SimSeed, tag: &str) -> Result<(), AdapterError> {
        let path = self.queue().join(format!("id:{:06},{tag}", self.next_id));
        self.next_id += 1;
        self.store
            .write(&path, &seed.encode())
            .map_err(|e| self.io(e))
    }

    fn import(&mut self) -> Result<(), AdapterError> {
        let version = self.store.version(&self.layout.sync);
        if version.is_some() && version == self.sync_version {
            return Ok(());
        }
        let files = self.store.list(&self.layout.sync).map_err(|e| self.io(e))?;
        let mut complete = true;
        for path in files {
            if !self.imported.insert(path.clone()) {
                continue;
            }
            let Ok(data) = self.store.read(&path) else {
                self.imported.remove(&path);
                complete = false;
                continue;
            };
            if let Some(seed) = SimSeed::decode(&data) {
                if self.actor.observe(&seed) {
                    let name = path.file_name().unwrap().to_string_lossy().into_owned();
                    self.write_seed(&seed, &format!("sync:{name}"))?;
                }
            }
        }
        if complete {
            self.sync_version = version;
        }
        Ok(())
    }

    /// Rebuilds the visible corpus from what is already on disk.
    fn recover(&mut self) -> Result<(), AdapterError> {
        for dir in self.layout.interesting.clone() {
            let files = self.store.list(&dir).map_err(|e| self.io(e))?;
            if dir == *self.queue() {
                self.next_id = self.next_id.max(files.len());
            }
            for path in files {
                if let Some(seed) = self
                    .store
                    .read(&path)
                    .ok()
                    .and_then(|d| SimSeed::decode(&d))
                {
                    self.actor.observe(&seed);
                }
            }
        }
        Ok(())
    }

    fn invalid(&self, op: &'static str, expected: FuzzerState) -> AdapterError {
        AdapterError::InvalidState {
            fuzzer: self.actor.profile.name.clone(),
            op,
            expected,
            found: self.state,
        }
    }
}

impl Fuzzer for SimFuzzer {
    fn name(&self) -> &str {
        &self.actor.profile.name
    }

    fn layout(&self) -> &FuzzerLayout {
        &self.layout
    }

    fn state(&self) -> FuzzerState {
        self.state
    }

    fn instances(&self) -> usize {
        self.instances
    }

    fn start(&mut self) -> Result<(), AdapterError> {
        if self.state != FuzzerState::Stopped {
            return Err(self.invalid("start", FuzzerState::Stopped));
        }
        self.layout
            .create(self.store.as_ref())
            .map_err(|e| self.io(e))?;
        self.recover()?;
        self.state = FuzzerState::Running;
        self.instances = 1;
        Ok(())
    }

    fn stop(&mut self) -> Result<(), AdapterError> {
        self.state = FuzzerState::Stopped;
        self.instances = 0;
        Ok(())
    }

    fn pause(&mut self) -> Result<(), AdapterError> {
        match self.state {
            FuzzerState::Stopped => Err(self.invalid("pause", FuzzerState::Running)),
            _ => {
                self.state = FuzzerState::Paused;
                Ok(())
            }
        }
    }

    fn resume(&mut self) -> Result<(), AdapterError> {
        match self.state {
            FuzzerState::Stopped => Err(self.invalid("resume", FuzzerState::Paused)),
            _ => {
                self.state = FuzzerState::Running;
                Ok(())
            }
        }
    }

    fn scale_to(&mut self, n_instances: usize) -> Result<(), AdapterError> {
        if self.state == FuzzerState::Stopped {
            return Err(self.invalid("scale", FuzzerState::Running));
        }
        if n_instances == 0 {
            return self.stop();
        }
        self.instances = n_instances;
        Ok(())
    }

    fn advance(&mut self, cpu_seconds: f64, window: ClockWindow) -> Result<(), AdapterError> {
        if self.state != FuzzerState::Running {
            return Err(self.invalid("run", FuzzerState::Running));
        }
        if cpu_seconds <= 0.0 {
            return Ok(());
        }
        self.import()?;
        for seed in self.actor.step(cpu_seconds, window) {
            self.write_seed(&seed, "src:sim")?;
        }
        Ok(())
    }

    fn discovered(&self) -> Option<Vec<u32>> {
        Some(self.actor.discovered().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemStore;
    use proptest::prelude::*;

    fn window(a: f64, b: f64) -> ClockWindow {
        ClockWindow { start: a, end: b }
    }

    #[test]
    fn zero_rate_never_discovers() {
        let u = Arc::new(BranchUniverse::independent(100));
        let mut a = SimActor::new(u, SimProfile::uniform("z", 0.0, 0), 7);
        assert!(a.step(1e6, window(0.0, 1e6)).is_empty());
    }

    #[test]
    fn same_seed_same_history_same_output() {
        let u = Arc::new(BranchUniverse::independent(500));
        let p = SimProfile::uniform("a", 0.01, 3);
        let mut x = SimActor::new(u.clone(), p.clone(), 42);
        let mut y = SimActor::new(u, p, 42);
        for i in 0..5 {
            let w = window(i as f64 * 10.0, i as f64 * 10.0 + 10.0);
            assert_eq!(x.step(10.0, w), y.step(10.0, w));
        }
    }

    #[test]
    fn slicing_does_not_change_discoveries() {
        let u = Arc::new(BranchUniverse::independent(300));
        let p = SimProfile::uniform("a", 0.02, 1);
        let mut whole = SimActor::new(u.clone(), p.clone(), 9);
        let mut sliced = SimActor::new(u, p, 9);
        let all = whole.step(60.0, window(0.0, 60.0));
        let mut parts = Vec::new();
        for k in 0..6 {
            parts.extend(sliced.step(10.0, window(k as f64 * 10.0, k as f64 * 10.0 + 10.0)));
        }
        assert_eq!(all, parts);
    }

    #[test]
    fn streams_differ() {
        let u = Arc::new(BranchUniverse::independent(300));
        let mut x = SimActor::new(u.clone(), SimProfile::uniform("a", 0.02, 1), 9);
        let mut y = SimActor::new(u, SimProfile::uniform("b", 0.02, 2), 9);
        assert_ne!(
            x.step(30.0, window(0.0, 30.0)),
            y.step(30.0, window(0.0, 30.0))
        );
    }

    #[test]
    fn dag_gates_children_until_parent_covered() {
        let u = Arc::new(BranchUniverse::with_edges(3, &[[0, 1], [1, 2]]).unwrap());
        let mut p = SimProfile::uniform("a", 0.0, 0);
        p.rates.push(RateRange {
            first: 1,
            last: 2,
            rate: 1e9,
        });
        let mut a = SimActor::new(u.clone(), p, 1);
        // Root has rate 0, so nothing is reachable.
        assert!(a.step(100.0, window(0.0, 100.0)).is_empty());
        assert!(a.observe(&SimSeed::new([0])));
        let seeds = a.step(1.0, window(100.0, 101.0));
        assert_eq!(seeds, vec![SimSeed::new([0, 1]), SimSeed::new([1, 2])]);
    }

    #[test]
    fn import_grows_reachable_set() {
        let u = Arc::new(BranchUniverse::with_edges(4, &[[0, 1], [0, 2], [0, 3]]).unwrap());
        let mut a = SimActor::new(u, SimProfile::uniform("a", 0.0, 0), 1);
        assert_eq!(a.covered_count(), 0);
        assert!(a.observe(&SimSeed::new([0])));
        assert!(!a.observe(&SimSeed::new([0])));
        assert_eq!(a.covered_count(), 1);
        assert!(a.discovered().next().is_none());
    }

    #[test]
    fn bad_edges_rejected() {
        assert_eq!(
            BranchUniverse::with_edges(3, &[[2, 1]]),
            Err(SimError::NotTopological {
                parent: 2,
                child: 1
            })
        );
        assert!(BranchUniverse::with_edges(3, &[[0, 3]]).is_err());
    }

    #[test]
    fn execute_sets_encoded_branches() {
        let u = BranchUniverse::independent(64);
        assert!(u
            .execute(&SimSeed::new([]), 64)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&c| c == 0));
        let raw = u.execute(&SimSeed::new([5]), 64).unwrap();
        let hit: Vec<usize> = (0..64).filter(|&i| raw.as_slice()[i] != 0).collect();
        assert_eq!(hit, vec![5]);
        assert!(u.execute(&SimSeed::new([64]), 64).is_err());
    }

    #[test]
    fn fold_matches_execute_then_union() {
        let u = Arc::new(BranchUniverse::independent(64));
        let oracle = SimOracle::new(u, 64);
        let seed = SimSeed::new([0, 7, 63]).encode();
        let mut via_raw = CoverageBitmap::empty(64);
        via_raw.union_raw(&oracle.execute(&seed).unwrap()).unwrap();
        let mut folded = CoverageBitmap::empty(64);
        oracle.fold_into(&seed, &mut folded).unwrap();
        assert_eq!(folded, via_raw);
        assert!(oracle
            .fold_into(&SimSeed::new([64]).encode(), &mut folded)
            .is_err());
        assert_eq!(folded, via_raw);
    }

    #[test]
    fn seed_decoding_is_strict() {
        assert!(SimSeed::decode(b"garbage").is_none());
        let mut bytes = SimSeed::new([1, 2]).encode();
        bytes.push(0);
        assert!(SimSeed::decode(&bytes).is_none());
        // Non-canonical order.
        let mut raw = SEED_MAGIC.to_vec();
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&1u32.to_le_bytes());
        assert!(SimSeed::decode(&raw).is_none());
    }

    #[test]
    fn phase_multiplier_integrates_over_window() {
        let mut p = SimProfile::uniform("a", 1.0, 0);
        p.phases.push(Phase {
            from: 0.0,
            to: 50.0,
            multiplier: 0.0,
        });
        p.validate().unwrap();
        assert_eq!(p.effective_time(10.0, window(0.0, 10.0)), 0.0);
        assert_eq!(p.effective_time(10.0, window(60.0, 70.0)), 10.0);
        assert_eq!(p.effective_time(10.0, window(40.0, 60.0)), 5.0);
        assert_eq!(p.effective_time(10.0, window(45.0, 45.0)), 0.0);
        p.phases.push(Phase {
            from: 40.0,
            to: 60.0,
            multiplier: 2.0,
        });
        assert!(p.validate().is_err());
    }

    #[test]
    fn sim_fuzzer_lifecycle_and_import() {
        let store: SharedStore = Arc::new(MemStore::new());
        let u = Arc::new(BranchUniverse::with_edges(3, &[[0, 1]]).unwrap());
        let layout = FuzzerLayout::new(
            std::path::Path::new("/out"),
            &crate::adapter::FuzzerSpec::named("a"),
        );
        let actor = SimActor::new(u, SimProfile::uniform("a", 0.0, 0), 0);
        let mut f = SimFuzzer::new(actor, layout.clone(), store.clone());
        assert!(f.pause().is_err());
        f.start().unwrap();
        assert!(f.start().is_err());
        store
            .write(&layout.sync.join("x.b"), &SimSeed::new([0]).encode())
            .unwrap();
        f.advance(1.0, window(0.0, 1.0)).unwrap();
        let queue = store.list(&layout.interesting[0]).unwrap();
        assert_eq!(queue.len(), 1);
        assert!(queue[0].to_string_lossy().ends_with("id:000000,sync:x.b"));
        assert!(f.actor().is_covered(0));
        f.stop().unwrap();
        f.stop().unwrap();
        assert_eq!(f.instances(), 0);
    }

    proptest! {
        #[test]
        fn seed_encoding_round_trips(ids in proptest::collection::btree_set(0u32..100_000, 0..50)) {
            let seed = SimSeed::new(ids.iter().copied());
            prop_assert_eq!(SimSeed::decode(&seed.encode()), Some(seed));
        }
    }
}
