//! External-process fuzzers supervised through POSIX job control.
//!
//! Each instance is spawned as the leader of its own process group so that
//! pause (`SIGSTOP`), resume (`SIGCONT`) and termination reach every helper
//! process the fuzzer forks.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{
    expand_template, AdapterError, ExecutionOracle, Fuzzer, FuzzerLayout, FuzzerSpec, FuzzerState,
    SharedMonitor,
};
use crate::store::SharedStore;

pub struct ProcessFuzzer {
    spec: FuzzerSpec,
    layout: FuzzerLayout,
    target: String,
    seeds: String,
    instances: Vec<Child>,
    state: FuzzerState,
    grace: Duration,
}

fn send(pgid: u32, sig: libc::c_int) -> io::Result<()> {
    // SAFETY: kill(2) has no memory-safety preconditions.
    let rc = unsafe { libc::kill(-(pgid as libc::pid_t), sig) };
    if rc == 0 {
        return Ok(());
    }
    let err = io::Error::last_os_error();
    if err.raw_os_error() == Some(libc::ESRCH) {
        Ok(())
    } else {
        Err(err)
    }
}

fn log_tail(path: &std::path::Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let _ = f.seek(SeekFrom::Start(len.saturating_sub(2048)));
    let mut s = String::new();
    let _ = f.read_to_string(&mut s);
    let s = s.trim();
    if s.is_empty() {
        String::new()
    } else {
        format!("; stderr: {s}")
    }
}

impl ProcessFuzzer {
    pub fn new(spec: FuzzerSpec, layout: FuzzerLayout, target: &str, seeds: &str) -> Self {
        Self {
            spec,
            layout,
            target: target.to_string(),
            seeds: seeds.to_string(),
            instances: Vec::new(),
            state: FuzzerState::Stopped,
            grace: Duration::from_secs(5),
        }
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    /// The argv instance `id` would be launched with.
    pub fn argv(&self, id: usize) -> Result<Vec<String>, AdapterError> {
        let template = if id == 0 {
            &self.spec.start
        } else {
            self.spec
                .scale
                .as_ref()
                .ok_or_else(|| AdapterError::UnsupportedScaling(self.spec.name.clone()))?
        };
        let out = self.layout.root.to_string_lossy();
        let sync = self.layout.sync.to_string_lossy();
        let id = id.to_string();
        expand_template(
            template,
            &[
                ("target", &self.target),
                ("in", &self.seeds),
                ("out", &out),
                ("sync", &sync),
                ("name", &self.spec.name),
                ("id", &id),
            ],
        )
    }

    fn spawn(&mut self, id: usize) -> Result<(), AdapterError> {
        let argv = self.argv(id)?;
        let io_err = |source| AdapterError::Io {
            fuzzer: self.spec.name.clone(),
            source,
        };
        for d in self.layout.interesting.iter().chain([&self.layout.sync]) {
            std::fs::create_dir_all(d).map_err(io_err)?;
        }
        let log_path = self.layout.root.join(format!("instance-{id}.log"));
        let log = File::create(&log_path).map_err(io_err)?;
        let child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(&self.layout.root)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .process_group(0)
            .spawn()
            .map_err(|source| AdapterError::Spawn {
                fuzzer: self.spec.name.clone(),
                program: argv[0].clone(),
                source,
                stderr: String::new(),
            })?;
        self.instances.push(child);

        // Catch fuzzers that reject their arguments straight away.
        let deadline = Instant::now() + Duration::from_millis(50);
        while Instant::now() < deadline {
            let child = self.instances.last_mut().unwrap();
            if let Ok(Some(status)) = child.try_wait() {
                if !status.success() {
                    self.instances.pop();
                    return Err(AdapterError::EarlyExit {
                        fuzzer: self.spec.name.clone(),
                        status: status.to_string(),
                        stderr: log_tail(&log_path),
                    });
                }
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        if self.state == FuzzerState::Paused {
            let pid = self.instances.last().unwrap().id();
            self.signal_one(pid, libc::SIGSTOP)?;
        }
        Ok(())
    }

    fn signal_one(&self, pgid: u32, sig: libc::c_int) -> Result<(), AdapterError> {
        send(pgid, sig).map_err(|source| AdapterError::Signal {
            fuzzer: self.spec.name.clone(),
            source,
        })
    }

    fn signal_all(&self, sig: libc::c_int) -> Result<(), AdapterError> {
        for c in &self.instances {
            self.signal_one(c.id(), sig)?;
        }
        Ok(())
    }

    fn terminate(&self, mut child: Child) {
        let pgid = child.id();
        let _ = send(pgid, libc::SIGCONT);
        let _ = send(pgid, libc::SIGTERM);
        let deadline = Instant::now() + self.grace;
        while Instant::now() < deadline {
            match child.try_wait() {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            }
        }
        // Helpers forked by the fuzzer may outlive the leader.
        let _ = send(pgid, libc::SIGKILL);
        let _ = child.wait();
    }
}

impl Fuzzer for ProcessFuzzer {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn layout(&self) -> &FuzzerLayout {
        &self.layout
    }

    fn state(&self) -> FuzzerState {
        self.state
    }

    fn instances(&self) -> usize {
        self.instances.len()
    }

    fn start(&mut self) -> Result<(), AdapterError> {
        if self.state != FuzzerState::Stopped {
            return Err(AdapterError::InvalidState {
                fuzzer: self.spec.name.clone(),
                op: "start",
                expected: FuzzerState::Stopped,
                found: self.state,
            });
        }
        self.spawn(0)?;
        self.state = FuzzerState::Running;
        Ok(())
    }

    fn stop(&mut self) -> Result<(), AdapterError> {
        for child in std::mem::take(&mut self.instances) {
            self.terminate(child);
        }
        self.state = FuzzerState::Stopped;
        Ok(())
    }

    fn pause(&mut self) -> Result<(), AdapterError> {
        match self.state {
            FuzzerState::Paused => Ok(()),
            FuzzerState::Running => {
                self.signal_all(libc::SIGSTOP)?;
                self.state = FuzzerState::Paused;
                Ok(())
            }
            FuzzerState::Stopped => Err(AdapterError::InvalidState {
                fuzzer: self.spec.name.clone(),
                op: "pause",
                expected: FuzzerState::Running,
                found: self.state,
            }),
        }
    }

    fn resume(&mut self) -> Result<(), AdapterError> {
        match self.state {
            FuzzerState::Running => Ok(()),
            FuzzerState::Paused => {
                self.signal_all(libc::SIGCONT)?;
                self.state = FuzzerState::Running;
                Ok(())
            }
            FuzzerState::Stopped => Err(AdapterError::InvalidState {
                fuzzer: self.spec.name.clone(),
                op: "resume",
                expected: FuzzerState::Paused,
                found: self.state,
            }),
        }
    }

    fn scale_to(&mut self, n_instances: usize) -> Result<(), AdapterError> {
        if self.state == FuzzerState::Stopped {
            return Err(AdapterError::InvalidState {
                fuzzer: self.spec.name.clone(),
                op: "scale",
                expected: FuzzerState::Running,
                found: self.state,
            });
        }
        if n_instances == 0 {
            return self.stop();
        }
        if n_instances > 1 && self.spec.scale.is_none() {
            return Err(AdapterError::UnsupportedScaling(self.spec.name.clone()));
        }
        while self.instances.len() > n_instances {
            let child = self.instances.pop().unwrap();
            self.terminate(child);
        }
        while self.instances.len() < n_instances {
            let id = self.instances.len();
            self.spawn(id)?;
        }
        Ok(())
    }

    fn is_alive(&mut self) -> bool {
        self.instances
            .iter_mut()
            .any(|c| matches!(c.try_wait(), Ok(None)))
    }

    fn pids(&self) -> Vec<u32> {
        self.instances.iter().map(|c| c.id()).collect()
    }
}

impl Drop for ProcessFuzzer {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Background corpus harvesting for one real fuzzer. The scheduler still
/// polls synchronously before each measurement; the task just keeps the
/// backlog short between measurements.
pub struct MonitorTask {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl MonitorTask {
    pub fn spawn(
        monitor: SharedMonitor,
        store: SharedStore,
        oracle: Arc<ExecutionOracle>,
        interval: Duration,
    ) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                {
                    let mut m = monitor.lock().unwrap_or_else(|e| e.into_inner());
                    if let Err(e) = m.poll(store.as_ref(), &oracle) {
                        log::warn!("monitor poll failed: {e}");
                    }
                }
                std::thread::sleep(interval);
            }
        });
        Self {
            stop,
            thread: Some(thread),
        }
    }
}

impl Drop for MonitorTask {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
