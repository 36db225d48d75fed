//! Campaign configuration files.
//!
//! A campaign is described by one TOML file. Every key has a default except
//! the ones that pick what to fuzz (`scenario` in sim mode, `[target]` and
//! `[[fuzzer]]` in exec mode). Any key can be overridden from the
//! environment: `TRENDFUZZ_RNG_SEED=7`, `TRENDFUZZ_SCHEDULE__T_PREP=120`,
//! `TRENDFUZZ_FUZZER__0__NAME=afl` (`__` separates path segments).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
#[cfg(unix)]
use std::sync::Arc;
#[cfg(unix)]
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapter::{FuzzerSpec, InputMode};
use crate::bitmap::{check_map_size, DEFAULT_MAP_SIZE};
use crate::scheduler::{corpus_root, Campaign, ScheduleConfig, UNION};
use crate::sim::Scenario;
use crate::store::SharedStore;
use crate::Error;

pub const ENV_PREFIX: &str = "TRENDFUZZ_";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sim,
    Exec,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sim => "sim",
            Mode::Exec => "exec",
        })
    }
}

fn default_argv() -> Vec<String> {
    vec!["{target}".into(), "{input}".into()]
}

fn default_timeout() -> f64 {
    1.0
}

fn default_map_env() -> String {
    "COVERAGE_MAP_FILE".into()
}

/// The instrumented binary used to measure coverage of fuzzer outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub path: PathBuf,
    /// Coverage run command line; `{target}` and `{input}` are substituted.
    #[serde(default = "default_argv")]
    pub argv: Vec<String>,
    #[serde(default)]
    pub input: InputMode,
    /// Per-input timeout, seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_map_env")]
    pub map_env: String,
    /// Initial corpus handed to every fuzzer as `{in}`.
    #[serde(default)]
    pub seeds: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimiterKind {
    #[default]
    Slicing,
    Cgroup,
}

fn default_period() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimiterConfig {
    #[serde(default)]
    pub kind: LimiterKind,
    /// Duty-cycle period for time slicing, seconds.
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub cgroup_root: Option<PathBuf>,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            kind: LimiterKind::Slicing,
            period: default_period(),
            cgroup_root: None,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("trendfuzz-out")
}

fn default_map_size() -> usize {
    DEFAULT_MAP_SIZE
}

fn default_grace() -> f64 {
    5.0
}

fn default_monitor_interval() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Built-in scenario name or scenario file (sim mode).
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_map_size")]
    pub map_size: usize,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default, rename = "fuzzer")]
    pub fuzzers: Vec<FuzzerSpec>,
    #[serde(default)]
    pub limiter: LimiterConfig,
    /// Seconds between SIGTERM and SIGKILL when stopping a fuzzer.
    #[serde(default = "default_grace")]
    pub grace_period: f64,
    /// Seconds between background corpus scans (exec mode).
    #[serde(default = "default_monitor_interval")]
    pub monitor_interval: f64,
    /// Directory relative scenario and target paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", at(.origin, *.line, .message))]
    Invalid {
        origin: String,
        line: Option<usize>,
        message: String,
    },
}

fn at(origin: &str, line: Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("{origin}:{l}: {message}"),
        None => format!("{origin}: {message}"),
    }
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Invalid { line, .. } => *line,
            ConfigError::Read { .. } => None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside the table at `path` (array elements as numeric
/// segments), falling back to the table header.
fn locate(text: &str, path: &[String]) -> Option<usize> {
    let (key, tables) = path.split_last()?;
    let want = tables.join(".");
    let mut current = String::new();
    let mut arrays: HashMap<String, usize> = HashMap::new();
    let mut header = None;
    for (n, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if let Some(rest) = t.strip_prefix("[[") {
            let name = rest.split("]]").next().unwrap_or("").trim().to_string();
            let idx = arrays.entry(name.clone()).or_insert(0);
            current = format!("{name}.{idx}");
            *idx += 1;
        } else if let Some(rest) = t.strip_prefix('[') {
            current = rest.split(']').next().unwrap_or("").trim().to_string();
        } else if let Some((k, _)) = t.split_once('=') {
            if current == want && k.trim().trim_matches('"') == key {
                return Some(n + 1);
            }
            continue;
        } else {
            continue;
        }
        if current == want && header.is_none() {
            header = Some(n + 1);
        }
    }
    if want.is_empty() {
        None
    } else {
        header
    }
}

fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (first, rest) = path.split_first().ok_or("empty key")?;
    if rest.is_empty() {
        table.insert(first.clone(), value);
        return Ok(());
    }
    let slot = table.entry(first.clone()).or_insert_with(|| {
        if rest[0].parse::<usize>().is_ok() {
            toml::Value::Array(Vec::new())
        } else {
            toml::Value::Table(toml::Table::new())
        }
    });
    set_value(slot, rest, value)
}

fn set_value(slot: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), String> {
    match slot {
        toml::Value::Table(t) => set_path(t, path, value),
        toml::Value::Array(items) => {
            let (idx, rest) = path.split_first().ok_or("empty key")?;
            let i: usize = idx
                .parse()
                .map_err(|_| format!("`{idx}` is not an array index"))?;
            if i > items.len() {
                return Err(format!("index {i} skips past the end of the array"));
            }
            if i == items.len() {
                items.push(toml::Value::Table(toml::Table::new()));
            }
            if rest.is_empty() {
                items[i] = value;
                Ok(())
            } else {
                set_value(&mut items[i], rest, value)
            }
        }
        _ => Err("cannot set a key inside a scalar".into()),
    }
}

/// Config keys named by the environment, with the variable that set each.
fn env_overrides<I>(env: I) -> Vec<(String, Vec<String>, String)>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<_> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path: Vec<String> = rest
                .to_ascii_lowercase()
                .split("__")
                .map(str::to_string)
                .collect();
            Some((k, path, v))
        })
        .collect();
    out.sort();
    out
}

impl CampaignConfig {
    /// Reads a config file, applying environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse_with_env(&text, &path.display().to_string(), std::env::vars())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.check_resources(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        Self::parse_with_env(text, origin, std::env::vars())
    }

    pub fn parse_with_env<I>(text: &str, origin: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let invalid = |line, message: String| ConfigError::Invalid {
            origin: origin.to_string(),
            line,
            message,
        };
        let overrides = env_overrides(env);
        let cfg: CampaignConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| {
                invalid(
                    e.span().map(|s| line_of(text, s.start)),
                    e.message().to_string(),
                )
            })?
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                invalid(
                    e.span().map(|s| line_of(text, s.start)),
                    e.message().to_string(),
                )
            })?;
            for (var, path, value) in &overrides {
                set_path(&mut table, path, env_value(value))
                    .map_err(|m| invalid(None, format!("environment variable {var}: {m}")))?;
            }
            let vars: Vec<&str> = overrides.iter().map(|(v, _, _)| v.as_str()).collect();
            CampaignConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
                invalid(
                    None,
                    format!("{} (with overrides from {})", e.message(), vars.join(", ")),
                )
            })?
        };
        if let Err((path, message)) = cfg.validate() {
            let from_env = overrides
                .iter()
                .find(|(_, p, _)| *p == path)
                .map(|(v, _, _)| v.clone());
            return Err(match from_env {
                Some(var) => invalid(
                    None,
                    format!("{message} (set by environment variable {var})"),
                ),
                None => invalid(locate(text, &path), message),
            });
        }
        Ok(cfg)
    }

    /// Re-validates after programmatic changes (command-line overrides).
    /// Errors name the offending key since there is no source line.
    pub fn check(&self, origin: &str) -> Result<(), ConfigError> {
        self.validate()
            .map_err(|(key, message)| ConfigError::Invalid {
                origin: origin.to_string(),
                line: None,
                message: format!("{}: {message}", key.join(".")),
            })
    }

    fn validate(&self) -> Result<(), (Vec<String>, String)> {
        let key = |parts: &[&str]| parts.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        if let Err((k, msg)) = self.schedule.validate() {
            return Err((key(&["schedule", k]), msg));
        }
        check_map_size(self.map_size).map_err(|e| (key(&["map_size"]), e.to_string()))?;
        if !(self.grace_period >= 0.0 && self.grace_period.is_finite()) {
            return Err((
                key(&["grace_period"]),
                "grace_period must be a non-negative number".into(),
            ));
        }
        if !(self.monitor_interval > 0.0 && self.monitor_interval.is_finite()) {
            return Err((
                key(&["monitor_interval"]),
                "monitor_interval must be positive".into(),
            ));
        }
        if !(self.limiter.period > 0.0 && self.limiter.period.is_finite()) {
            return Err((
                key(&["limiter", "period"]),
                "limiter period must be positive".into(),
            ));
        }
        if self.limiter.kind == LimiterKind::Cgroup && self.limiter.cgroup_root.is_none() {
            return Err((
                key(&["limiter", "kind"]),
                "the cgroup limiter needs cgroup_root".into(),
            ));
        }
        match self.mode {
            Mode::Sim => {
                if self.scenario.is_none() {
                    return Err((key(&["mode"]), "sim mode needs a `scenario`".into()));
                }
            }
            Mode::Exec => {
                let Some(target) = &self.target else {
                    return Err((key(&["mode"]), "exec mode needs a [target] table".into()));
                };
                if target.argv.is_empty() {
                    return Err((
                        key(&["target", "argv"]),
                        "target argv must not be empty".into(),
                    ));
                }
                if !(target.timeout > 0.0 && target.timeout.is_finite()) {
                    return Err((
                        key(&["target", "timeout"]),
                        "target timeout must be positive".into(),
                    ));
                }
                if self.fuzzers.is_empty() {
                    return Err((
                        key(&["mode"]),
                        "exec mode needs at least one [[fuzzer]]".into(),
                    ));
                }
            }
        }
        let mut names = BTreeSet::new();
        for (i, f) in self.fuzzers.iter().enumerate() {
            let idx = i.to_string();
            let k = |field: &str| vec!["fuzzer".to_string(), idx.clone(), field.to_string()];
            if f.name.is_empty() || f.name.contains(['/', '\\']) || f.name.starts_with('.') {
                return Err((
                    k("name"),
                    format!("`{}` is not a usable fuzzer name", f.name),
                ));
            }
            if f.name == UNION {
                return Err((k("name"), format!("`{UNION}` is reserved")));
            }
            if !names.insert(f.name.as_str()) {
                return Err((k("name"), format!("duplicate fuzzer name `{}`", f.name)));
            }
            if self.mode == Mode::Exec && f.start.is_empty() {
                return Err((
                    k("start"),
                    format!("fuzzer `{}` has no start command", f.name),
                ));
            }
            if f.interesting_dirs.is_empty() {
                return Err((
                    k("interesting_dirs"),
                    "at least one interesting directory is needed".into(),
                ));
            }
        }
        Ok(())
    }

    /// Checks references to other files, reporting the line of the key.
    fn check_resources(&self, text: &str, origin: &str) -> Result<(), ConfigError> {
        if self.mode == Mode::Sim {
            if let Err(e) = self.load_scenario() {
                return Err(ConfigError::Invalid {
                    origin: origin.to_string(),
                    line: locate(text, &["scenario".to_string()]),
                    message: e.to_string(),
                });
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn load_scenario(&self) -> Result<Scenario, Error> {
        let name = self
            .scenario
            .as_deref()
            .ok_or_else(|| Error::Invalid("no scenario configured".into()))?;
        if let Some(s) = Scenario::builtin(name) {
            return Ok(s);
        }
        let path = self.resolve(Path::new(name));
        Ok(Scenario::load(path.to_str().unwrap_or(name))?)
    }

    pub fn corpus_root(&self) -> PathBuf {
        corpus_root(&self.output_dir)
    }

    /// Assembles the campaign. Nothing is started yet; in exec mode the
    /// returned guards keep background corpus monitors alive.
    pub fn build(&self, store: SharedStore) -> Result<(Campaign, Vec<Box<dyn Send>>), Error> {
        match self.mode {
            Mode::Sim => {
                let scenario = self.load_scenario()?;
                let campaign = Campaign::simulated(
                    &scenario,
                    self.schedule.clone(),
                    self.rng_seed,
                    store,
                    &self.corpus_root(),
                    self.map_size,
                )?;
                Ok((campaign, Vec::new()))
            }
            Mode::Exec => self.build_exec(store),
        }
    }

    #[cfg(unix)]
    fn build_exec(&self, store: SharedStore) -> Result<(Campaign, Vec<Box<dyn Send>>), Error> {
        use crate::adapter::process::{MonitorTask, ProcessFuzzer};
        use crate::adapter::{
            CgroupLimiter, ExecutionOracle, FuzzerHandle, FuzzerLayout, InstrumentedTarget,
            ResourceLimiter, TimeSlicing,
        };

        let target = self.target.as_ref().expect("validated");
        let target_path = self.resolve(&target.path);
        let seeds = target
            .seeds
            .as_ref()
            .map(|s| self.resolve(s).display().to_string())
            .unwrap_or_default();
        let scratch = self.output_dir.join(".scratch");
        std::fs::create_dir_all(&scratch)
            .map_err(Error::io(format!("creating {}", scratch.display())))?;
        let oracle = Arc::new(ExecutionOracle::Instrumented(InstrumentedTarget {
            argv: target.argv.clone(),
            target: target_path.clone(),
            input_mode: target.input,
            timeout: Duration::from_secs_f64(target.timeout),
            map_env: target.map_env.clone(),
            map_size: self.map_size,
            scratch_dir: scratch,
        }));
        let root = self.corpus_root();
        let grace = Duration::from_secs_f64(self.grace_period);
        let handles: Vec<FuzzerHandle> = self
            .fuzzers
            .iter()
            .map(|spec| {
                let layout = FuzzerLayout::new(&root, spec);
                let f = ProcessFuzzer::new(
                    spec.clone(),
                    layout,
                    &target_path.display().to_string(),
                    &seeds,
                )
                .with_grace(grace);
                FuzzerHandle::new(Box::new(f), self.map_size)
            })
            .collect();
        let interval = Duration::from_secs_f64(self.monitor_interval);
        let guards: Vec<Box<dyn Send>> = handles
            .iter()
            .map(|h| {
                Box::new(MonitorTask::spawn(
                    h.monitor().clone(),
                    store.clone(),
                    oracle.clone(),
                    interval,
                )) as Box<dyn Send>
            })
            .collect();
        let limiter: Box<dyn ResourceLimiter> = match self.limiter.kind {
            LimiterKind::Slicing => Box::new(TimeSlicing {
                period: Duration::from_secs_f64(self.limiter.period),
            }),
            LimiterKind::Cgroup => Box::new(CgroupLimiter::new(
                self.limiter.cgroup_root.clone().expect("validated"),
            )),
        };
        let campaign = Campaign::new(
            self.schedule.clone(),
            handles,
            store,
            oracle,
            limiter,
            self.rng_seed,
        )?;
        Ok((campaign, guards))
    }

    #[cfg(not(unix))]
    fn build_exec(&self, _store: SharedStore) -> Result<(Campaign, Vec<Box<dyn Send>>), Error> {
        Err(Error::Invalid("exec mode needs a unix host".into()))
    }
}
