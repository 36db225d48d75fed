use std::collections::{HashMap, HashSet};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::expand_template;
use crate::bitmap::{CoverageBitmap, RawHitMap};
use crate::sim::SimOracle;
use crate::store::CorpusStore;
use crate::sync::{content_hash, ContentHash};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("execution timed out after {0:?}")]
    Timeout(Duration),
    #[error("target crashed: {0}")]
    Crash(String),
    #[error("target produced no coverage map at {0}")]
    NoMap(String),
    #[error("coverage map has {found} bytes, expected {expected}")]
    BadMap { expected: usize, found: usize },
    #[error("input is not a simulated seed")]
    NotASeed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Template(#[from] super::AdapterError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The input path replaces `{input}` in the argument template.
    #[default]
    File,
    Stdin,
}

/// An AFL-instrumented target that reports its hit counts through a file.
///
/// The target is run once per input with the environment variable
/// `map_env` naming a path; it must leave exactly `map_size` raw counter
/// bytes there before exiting.
#[derive(Debug)]
pub struct InstrumentedTarget {
    pub argv: Vec<String>,
    pub target: PathBuf,
    pub input_mode: InputMode,
    pub timeout: Duration,
    pub map_env: String,
    pub map_size: usize,
    pub scratch_dir: PathBuf,
}

static MAP_FILE_SEQ: AtomicU64 = AtomicU64::new(0);

impl InstrumentedTarget {
    pub fn execute(&self, input_path: &Path, input: &[u8]) -> Result<RawHitMap, OracleError> {
        let seq = MAP_FILE_SEQ.fetch_add(1, Ordering::Relaxed);
        let map_path = self
            .scratch_dir
            .join(format!("map-{}-{seq}", std::process::id()));
        let _ = std::fs::remove_file(&map_path);

        let target = self.target.to_string_lossy();
        let input_str = input_path.to_string_lossy();
        let argv = expand_template(&self.argv, &[("target", &target), ("input", &input_str)])?;

        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .env(&self.map_env, &map_path)
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        cmd.stdin(match self.input_mode {
            InputMode::File => Stdio::null(),
            InputMode::Stdin => Stdio::piped(),
        });
        let mut child = cmd.spawn()?;
        if self.input_mode == InputMode::Stdin {
            if let Some(mut stdin) = child.stdin.take() {
                // A target that exits without reading its input is fine.
                let _ = stdin.write_all(input);
            }
        }

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                let _ = std::fs::remove_file(&map_path);
                return Err(OracleError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(1));
        };

        let bytes = std::fs::read(&map_path);
        let _ = std::fs::remove_file(&map_path);
        if status.code().is_none() {
            return Err(OracleError::Crash(status.to_string()));
        }
        let bytes = bytes.map_err(|_| OracleError::NoMap(map_path.display().to_string()))?;
        if bytes.len() != self.map_size {
            return Err(OracleError::BadMap {
                expected: self.map_size,
                found: bytes.len(),
            });
        }
        Ok(RawHitMap::from_counts(bytes))
    }
}

/// Turns one input into one raw hit map.
#[derive(Debug)]
pub enum ExecutionOracle {
    Instrumented(InstrumentedTarget),
    Simulated(SimOracle),
}

impl ExecutionOracle {
    pub fn map_size(&self) -> usize {
        match self {
            ExecutionOracle::Instrumented(t) => t.map_size,
            ExecutionOracle::Simulated(s) => s.map_size(),
        }
    }

    pub fn execute(&self, path: &Path, input: &[u8]) -> Result<RawHitMap, OracleError> {
        match self {
            ExecutionOracle::Instrumented(t) => t.execute(path, input),
            ExecutionOracle::Simulated(s) => s.execute(input),
        }
    }

    /// Executes `input` and ORs its bucketed coverage into `bitmap`.
    /// Simulated seeds are folded in directly without a full raw map.
    pub fn fold_into(
        &self,
        path: &Path,
        input: &[u8],
        bitmap: &mut CoverageBitmap,
    ) -> Result<(), OracleError> {
        match self {
            ExecutionOracle::Instrumented(t) => {
                let raw = t.execute(path, input)?;
                bitmap.union_raw(&raw).map_err(|_| OracleError::BadMap {
                    expected: bitmap.map_size(),
                    found: raw.len(),
                })
            }
            ExecutionOracle::Simulated(s) => s.fold_into(input, bitmap),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MonitorUpdate {
    pub new_files: usize,
    pub executed: usize,
    pub failed: usize,
    pub new_entries: u64,
}

/// Watches one fuzzer's interesting directories and folds the coverage of
/// every new input into its accumulated bitmap.
#[derive(Debug)]
pub struct CorpusMonitor {
    fuzzer: String,
    dirs: Vec<PathBuf>,
    bitmap: CoverageBitmap,
    seen: HashMap<PathBuf, ContentHash>,
    executed: HashSet<ContentHash>,
    executions: u64,
    failures: u64,
    /// Store version of each directory at its last complete scan.
    scanned: HashMap<PathBuf, u64>,
}

impl CorpusMonitor {
    pub fn new(fuzzer: &str, dirs: Vec<PathBuf>, map_size: usize) -> Self {
        Self {
            fuzzer: fuzzer.to_string(),
            dirs,
            bitmap: CoverageBitmap::empty(map_size),
            seen: HashMap::new(),
            executed: HashSet::new(),
            executions: 0,
            failures: 0,
            scanned: HashMap::new(),
        }
    }

    pub fn bitmap(&self) -> &CoverageBitmap {
        &self.bitmap
    }

    pub fn executions(&self) -> u64 {
        self.executions
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    pub fn files_seen(&self) -> usize {
        self.seen.len()
    }

    /// Scans for files not seen before and executes each distinct content
    /// once. Files that vanish or cannot be read are retried next poll.
    pub fn poll(
        &mut self,
        store: &dyn CorpusStore,
        oracle: &ExecutionOracle,
    ) -> io::Result<MonitorUpdate> {
        let mut update = MonitorUpdate::default();
        let before = self.bitmap.count();
        for dir in &self.dirs {
            let version = store.version(dir);
            if version.is_some() && self.scanned.get(dir) == version.as_ref() {
                continue;
            }
            let mut complete = true;
            for path in store.list(dir)? {
                if self.seen.contains_key(&path) {
                    continue;
                }
                let data = match store.read(&path) {
                    Ok(d) => d,
                    Err(e) => {
                        log::debug!("{}: cannot read {}: {e}", self.fuzzer, path.display());
                        complete = false;
                        continue;
                    }
                };
                let hash = content_hash(&data);
                self.seen.insert(path.clone(), hash);
                update.new_files += 1;
                if !self.executed.insert(hash) {
                    continue;
                }
                self.executions += 1;
                update.executed += 1;
                if let Err(e) = oracle.fold_into(&path, &data, &mut self.bitmap) {
                    self.failures += 1;
                    update.failed += 1;
                    log::info!("{}: oracle failed on {}: {e}", self.fuzzer, path.display());
                }
            }
            if let (Some(v), true) = (version, complete) {
                self.scanned.insert(dir.clone(), v);
            }
        }
        if update.executed > 0 {
            update.new_entries = self.bitmap.count() - before;
        }
        Ok(update)
    }

    /// Tab-separated `hash<TAB>path` lines of every file already processed.
    pub fn export_index(&self) -> String {
        let mut lines: Vec<_> = self
            .seen
            .iter()
            .map(|(p, h)| format!("{}\t{}", hex::encode(h), p.display()))
            .collect();
        lines.sort();
        lines.join("\n")
    }

    /// Restores a processed-file index and the bitmap it produced, so a
    /// resumed campaign does not execute old inputs again.
    pub fn restore(&mut self, index: &str, bitmap: CoverageBitmap) -> Result<(), String> {
        if bitmap.map_size() != self.bitmap.map_size() {
            return Err(format!(
                "bitmap has {} entries, expected {}",
                bitmap.map_size(),
                self.bitmap.map_size()
            ));
        }
        for (lineno, line) in index.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (h, p) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: missing tab", lineno + 1))?;
            let bytes = hex::decode(h).map_err(|e| format!("line {}: {e}", lineno + 1))?;
            let hash: ContentHash = bytes
                .try_into()
                .map_err(|_| format!("line {}: hash is not 32 bytes", lineno + 1))?;
            self.seen.insert(PathBuf::from(p), hash);
            self.executed.insert(hash);
        }
        self.bitmap = bitmap;
        Ok(())
    }
}
