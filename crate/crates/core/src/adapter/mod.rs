//! Baseline fuzzer integration.
//!
//! Every member of the ensemble implements [`Fuzzer`]: lifecycle
//! (start/stop, pause/resume for time slicing), scaling for multi-core runs,
//! and the directories where it keeps interesting inputs. The scheduler only
//! ever sees [`FuzzerHandle`]s, which pair a fuzzer with the corpus monitor
//! that turns its inputs into coverage.

mod limiter;
mod monitor;
#[cfg(unix)]
pub mod process;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitmap::CoverageBitmap;
use crate::store::CorpusStore;

pub use limiter::{Assignment, CgroupLimiter, ResourceLimiter, TimeSlicing, VirtualTime};
pub use monitor::{
    CorpusMonitor, ExecutionOracle, InputMode, InstrumentedTarget, MonitorUpdate, OracleError,
};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("fuzzer {fuzzer}: {op} requires state {expected:?}, found {found:?}")]
    InvalidState {
        fuzzer: String,
        op: &'static str,
        expected: FuzzerState,
        found: FuzzerState,
    },
    #[error("template placeholder {{{0}}} has no value")]
    UnknownPlaceholder(String),
    #[error("template is empty")]
    EmptyTemplate,
    #[error("fuzzer {fuzzer}: failed to spawn `{program}`: {source}{stderr}")]
    Spawn {
        fuzzer: String,
        program: String,
        #[source]
        source: std::io::Error,
        stderr: String,
    },
    #[error("fuzzer {fuzzer}: instance exited immediately ({status}){stderr}")]
    EarlyExit {
        fuzzer: String,
        status: String,
        stderr: String,
    },
    #[error("fuzzer {0} has no scale command; capped at one instance")]
    UnsupportedScaling(String),
    #[error("fuzzer {fuzzer}: signal failed: {source}")]
    Signal {
        fuzzer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fuzzer {fuzzer}: {source}")]
    Io {
        fuzzer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cgroup {path}: {source}")]
    Cgroup {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuzzerState {
    Stopped,
    Running,
    Paused,
}

fn default_interesting() -> Vec<String> {
    vec!["queue".into(), "crashes".into(), "hangs".into()]
}

fn default_sync() -> String {
    "sync".into()
}

/// How to launch one baseline fuzzer and where it keeps its inputs.
///
/// Argument templates may use `{target}`, `{in}`, `{out}`, `{sync}`,
/// `{name}` and `{id}` (instance number).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzerSpec {
    pub name: String,
    #[serde(default)]
    pub start: Vec<String>,
    #[serde(default = "default_interesting")]
    pub interesting_dirs: Vec<String>,
    #[serde(default = "default_sync")]
    pub sync_dir: String,
    #[serde(default)]
    pub scale: Option<Vec<String>>,
}

impl FuzzerSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            start: Vec::new(),
            interesting_dirs: default_interesting(),
            sync_dir: default_sync(),
            scale: None,
        }
    }
}

/// Resolved on-disk layout: `<out>/<name>/{queue,crashes,hangs,sync}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzerLayout {
    pub root: PathBuf,
    pub interesting: Vec<PathBuf>,
    pub sync: PathBuf,
}

impl FuzzerLayout {
    pub fn new(out_dir: &Path, spec: &FuzzerSpec) -> Self {
        let root = out_dir.join(&spec.name);
        Self {
            interesting: spec.interesting_dirs.iter().map(|d| root.join(d)).collect(),
            sync: root.join(&spec.sync_dir),
            root,
        }
    }

    pub fn create(&self, store: &dyn CorpusStore) -> std::io::Result<()> {
        store.create_dir_all(&self.root)?;
        for d in &self.interesting {
            store.create_dir_all(d)?;
        }
        store.create_dir_all(&self.sync)
    }
}

/// Substitutes `{key}` placeholders in every argument.
pub fn expand_template(
    template: &[String],
    vars: &[(&str, &str)],
) -> Result<Vec<String>, AdapterError> {
    if template.is_empty() {
        return Err(AdapterError::EmptyTemplate);
    }
    template
        .iter()
        .map(|arg| {
            let mut out = String::with_capacity(arg.len());
            let mut rest = arg.as_str();
            while let Some(open) = rest.find('{') {
                out.push_str(&rest[..open]);
                let after = &rest[open + 1..];
                let Some(close) = after.find('}') else {
                    out.push_str(&rest[open..]);
                    rest = "";
                    break;
                };
                let key = &after[..close];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| AdapterError::UnknownPlaceholder(key.to_string()))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            out.push_str(rest);
            Ok(out)
        })
        .collect()
}

/// Campaign-clock interval a run slot covers, in CPU seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockWindow {
    pub start: f64,
    pub end: f64,
}

/// A baseline fuzzer as seen by the scheduler.
pub trait Fuzzer: Send {
    fn name(&self) -> &str;
    fn layout(&self) -> &FuzzerLayout;
    fn state(&self) -> FuzzerState;
    fn instances(&self) -> usize;

    fn start(&mut self) -> Result<(), AdapterError>;
    /// Terminates every instance. Stopping a stopped fuzzer is a no-op.
    fn stop(&mut self) -> Result<(), AdapterError>;
    fn pause(&mut self) -> Result<(), AdapterError>;
    fn resume(&mut self) -> Result<(), AdapterError>;
    fn scale_to(&mut self, n_instances: usize) -> Result<(), AdapterError>;

    /// Hook for fuzzers that live on virtual time: called after a slot in
    /// which the fuzzer ran for `cpu_seconds`. Real processes make progress
    /// on their own while resumed and ignore it.
    fn advance(&mut self, _cpu_seconds: f64, _window: ClockWindow) -> Result<(), AdapterError> {
        Ok(())
    }

    /// False once every instance has died on its own.
    fn is_alive(&mut self) -> bool {
        true
    }

    fn pids(&self) -> Vec<u32> {
        Vec::new()
    }

    /// Branches the fuzzer found by itself, for fuzzers that know (the
    /// simulated ones). Used to check monitoring against ground truth.
    fn discovered(&self) -> Option<Vec<u32>> {
        None
    }
}

pub type SharedMonitor = Arc<Mutex<CorpusMonitor>>;

/// A fuzzer plus its coverage accumulator and CPU accounting.
pub struct FuzzerHandle {
    fuzzer: Box<dyn Fuzzer>,
    monitor: SharedMonitor,
    cpu_time: f64,
    failure: Option<String>,
}

impl FuzzerHandle {
    pub fn new(fuzzer: Box<dyn Fuzzer>, map_size: usize) -> Self {
        let monitor =
            CorpusMonitor::new(fuzzer.name(), fuzzer.layout().interesting.clone(), map_size);
        Self {
            fuzzer,
            monitor: Arc::new(Mutex::new(monitor)),
            cpu_time: 0.0,
            failure: None,
        }
    }

    pub fn name(&self) -> &str {
        self.fuzzer.name()
    }

    pub fn layout(&self) -> &FuzzerLayout {
        self.fuzzer.layout()
    }

    pub fn state(&self) -> FuzzerState {
        self.fuzzer.state()
    }

    pub fn fuzzer(&self) -> &dyn Fuzzer {
        self.fuzzer.as_ref()
    }

    pub fn fuzzer_mut(&mut self) -> &mut dyn Fuzzer {
        self.fuzzer.as_mut()
    }

    pub fn monitor(&self) -> &SharedMonitor {
        &self.monitor
    }

    pub fn lock_monitor(&self) -> MutexGuard<'_, CorpusMonitor> {
        self.monitor.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Consistent copy of the accumulated bitmap.
    pub fn bitmap(&self) -> CoverageBitmap {
        self.lock_monitor().bitmap().clone()
    }

    pub fn count(&self) -> u64 {
        self.lock_monitor().bitmap().count()
    }

    pub fn harvest(
        &self,
        store: &dyn CorpusStore,
        oracle: &ExecutionOracle,
    ) -> std::io::Result<MonitorUpdate> {
        self.lock_monitor().poll(store, oracle)
    }

    pub fn cpu_time(&self) -> f64 {
        self.cpu_time
    }

    pub(crate) fn charge(&mut self, cpu_seconds: f64) {
        self.cpu_time += cpu_seconds;
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn mark_failed(&mut self, reason: impl Into<String>) {
        let reason = reason.into();
        log::warn!("fuzzer {} marked failed: {reason}", self.name());
        self.failure = Some(reason);
    }
}

impl std::fmt::Debug for FuzzerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FuzzerHandle")
            .field("name", &self.name())
            .field("state", &self.state())
            .field("cpu_time", &self.cpu_time)
            .field("failure", &self.failure)
            .finish()
    }
}
