//! Campaign output directories: writing telemetry while a campaign runs,
//! resuming from it, and turning it into reports.
//!
//! Layout of an output directory:
//!
//! ```text
//! rounds.jsonl          one RoundRecord per line
//! coverage.csv          cpu_seconds,fuzzer,count,density
//! seed_index.jsonl      every distinct seed, first origin and round
//! summary.json          final numbers, written when the campaign ends
//! bitmaps/<fuzzer>.map  accumulated bitmaps (raw bytes), plus union.map
//! state/                scheduler state and monitor indexes for resume
//! fuzzers/<fuzzer>/     corpora
//! report/               output of `report`
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitmap::CoverageBitmap;
use crate::scheduler::{
    Campaign, CampaignObserver, CampaignResult, CoverageSample, RoundRecord, SchedulerState, UNION,
};
use crate::sync::{SeedIndex, SeedSyncer, SyncReport};
use crate::Error;

pub const ROUNDS: &str = "rounds.jsonl";
pub const COVERAGE: &str = "coverage.csv";
pub const SEED_INDEX: &str = "seed_index.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const BITMAPS: &str = "bitmaps";
pub const STATE: &str = "state";
pub const REPORT: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub mode: String,
    #[serde(default)]
    pub scenario: Option<String>,
    pub rng_seed: u64,
    pub rounds: usize,
    pub elapsed_cpu: f64,
    pub total_budget: f64,
    pub final_density: f64,
    pub union_count: u64,
    pub final_counts: BTreeMap<String, u64>,
    pub focus_cpu: BTreeMap<String, f64>,
    pub aborted: bool,
}

/// Writes telemetry into an output directory as the campaign runs and
/// checkpoints resumable state after every round.
pub struct RunWriter {
    dir: PathBuf,
    rounds: File,
    coverage: csv::Writer<File>,
}

fn open_append(path: &Path) -> Result<File, Error> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(format!("opening {}", path.display())))
}

/// Removes what an earlier campaign left in `dir`. Only entries this
/// module creates are touched.
fn clear(dir: &Path) -> Result<(), Error> {
    for f in [ROUNDS, COVERAGE, SEED_INDEX, SUMMARY] {
        match fs::remove_file(dir.join(f)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => {
                return Err(Error::io(format!("removing {f}"))(e));
            }
            _ => {}
        }
    }
    for d in [BITMAPS, STATE, REPORT, "fuzzers", ".scratch"] {
        match fs::remove_dir_all(dir.join(d)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => {
                return Err(Error::io(format!("removing {d}"))(e));
            }
            _ => {}
        }
    }
    Ok(())
}

impl RunWriter {
    /// Opens `dir` for a fresh campaign (`resume == false`, existing
    /// telemetry is truncated) or for appending to a resumed one.
    pub fn open(dir: &Path, resume: bool) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
        if !resume {
            clear(dir)?;
        }
        for sub in [dir.join(BITMAPS), dir.join(STATE)] {
            fs::create_dir_all(&sub).map_err(Error::io(format!("creating {}", sub.display())))?;
        }
        let coverage_path = dir.join(COVERAGE);
        let header = !coverage_path.exists();
        let coverage = csv::WriterBuilder::new()
            .has_headers(header)
            .from_writer(open_append(&coverage_path)?);
        Ok(Self {
            rounds: open_append(&dir.join(ROUNDS))?,
            coverage,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Saves bitmaps, monitor indexes and scheduler state.
    pub fn checkpoint(&self, campaign: &Campaign) -> Result<(), Error> {
        for h in campaign.handles() {
            let m = h.lock_monitor();
            let map = self.dir.join(BITMAPS).join(format!("{}.map", h.name()));
            m.bitmap().write_to(&map)?;
            let idx = self.dir.join(STATE).join(format!("{}.idx", h.name()));
            fs::write(&idx, m.export_index())
                .map_err(Error::io(format!("writing {}", idx.display())))?;
        }
        campaign
            .union_bitmap()
            .write_to(&self.dir.join(BITMAPS).join(format!("{UNION}.map")))?;
        let state = serde_json::to_string_pretty(campaign.state()).expect("state serializes");
        let path = self.dir.join(STATE).join("scheduler.json");
        fs::write(&path, state).map_err(Error::io(format!("writing {}", path.display())))
    }

    pub fn finish(&mut self, campaign: &Campaign, summary: &Summary) -> Result<(), Error> {
        self.coverage
            .flush()
            .map_err(Error::io("flushing coverage.csv"))?;
        self.checkpoint(campaign)?;
        let path = self.dir.join(SUMMARY);
        let text = serde_json::to_string_pretty(summary).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(Error::io(format!("writing {}", path.display())))
    }
}

impl CampaignObserver for RunWriter {
    fn on_round(&mut self, record: &RoundRecord, campaign: &Campaign) -> Result<(), Error> {
        let line = serde_json::to_string(record).expect("round record serializes");
        writeln!(self.rounds, "{line}").map_err(Error::io("appending to rounds.jsonl"))?;
        self.coverage
            .flush()
            .map_err(Error::io("flushing coverage.csv"))?;
        self.checkpoint(campaign)
    }

    fn on_sample(&mut self, sample: &CoverageSample) -> Result<(), Error> {
        self.coverage
            .serialize(sample)
            .map_err(|e| Error::Invalid(format!("writing coverage.csv: {e}")))
    }

    fn on_sync(&mut self, round: u32, report: &SyncReport) {
        log::debug!(
            "round {round}: sync {:?} imported {} files, {} new seeds",
            report.kind,
            report.total_imported(),
            report.new_seeds
        );
    }
}

/// Builds a [`Summary`] for a finished campaign.
pub fn summarize(
    result: &CampaignResult,
    campaign: &Campaign,
    mode: &str,
    scenario: Option<&str>,
) -> Summary {
    Summary {
        policy: campaign.config().policy.to_string(),
        mode: mode.to_string(),
        scenario: scenario.map(str::to_string),
        rng_seed: campaign.state().rng_seed,
        rounds: result.rounds.len(),
        elapsed_cpu: result.elapsed_cpu,
        total_budget: campaign.config().total_budget,
        final_density: result.final_density,
        union_count: result.union_count,
        final_counts: result.final_counts.clone(),
        focus_cpu: result.focus_cpu.clone(),
        aborted: result.aborted,
    }
}

/// Seed syncer that appends to the directory's seed index.
pub fn syncer_for(dir: &Path) -> SeedSyncer {
    SeedSyncer::new().with_index_file(dir.join(SEED_INDEX))
}

/// Restores a campaign's scheduler state, monitors and seed index from an
/// earlier run in `dir`. Returns false if there was nothing to resume.
pub fn resume(dir: &Path, campaign: Campaign) -> Result<(Campaign, bool), Error> {
    let state_path = dir.join(STATE).join("scheduler.json");
    let Ok(text) = fs::read_to_string(&state_path) else {
        return Ok((campaign.with_syncer(syncer_for(dir)), false));
    };
    let state: SchedulerState = serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("{}: {e}", state_path.display())))?;
    let map_size = campaign
        .handles()
        .first()
        .map(|h| h.bitmap().map_size())
        .unwrap_or(0);
    for h in campaign.handles() {
        let map = dir.join(BITMAPS).join(format!("{}.map", h.name()));
        let idx = dir.join(STATE).join(format!("{}.idx", h.name()));
        if !map.exists() {
            continue;
        }
        let bitmap = CoverageBitmap::read_from(&map, map_size)?;
        let index = fs::read_to_string(&idx).unwrap_or_default();
        h.lock_monitor()
            .restore(&index, bitmap)
            .map_err(|e| Error::Invalid(format!("{}: {e}", idx.display())))?;
    }
    let seed_index = match fs::read_to_string(dir.join(SEED_INDEX)) {
        Ok(text) => SeedIndex::parse(&text)?,
        Err(_) => SeedIndex::default(),
    };
    let syncer = syncer_for(dir).with_index(seed_index);
    Ok((campaign.with_syncer(syncer).with_state(state), true))
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no {ROUNDS} in {0}")]
    NoRounds(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: no final density (missing {SUMMARY} and {COVERAGE})")]
    NoDensity(PathBuf),
}

/// Everything `report` produces, as file contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rounds: Vec<RoundRecord>,
    pub table_text: String,
    pub table_csv: String,
    pub coverage_series: String,
    pub heatmap: String,
    pub warnings: Vec<String>,
}

fn fuzzer_names(rounds: &[RoundRecord]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in rounds {
        for k in r.allocation.keys().chain(r.counts.keys()) {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    names.sort();
    names
}

fn round_table(rounds: &[RoundRecord]) -> (String, String) {
    let header = ["round", "winner", "diff_peak", "theta", "t_prep", "t_focus"];
    let rows: Vec<[String; 6]> = rounds
        .iter()
        .map(|r| {
            [
                r.round.to_string(),
                r.winner.clone(),
                r.diff_peak.to_string(),
                format!("{:.2}", r.theta),
                format!("{}", r.t_prep_actual),
                format!("{}", r.t_focus_assigned),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let line = |cells: &[&str], text: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 1 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(text, "{}", padded.join("  ").trim_end());
    };
    line(&header, &mut text);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells, &mut text);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in &rows {
        w.write_record(row).expect("in-memory csv");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8");
    (text, csv)
}

fn heatmap(rounds: &[RoundRecord], names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).expect("in-memory csv");
    for r in rounds {
        let mut row = vec![r.round.to_string()];
        row.extend(
            names
                .iter()
                .map(|n| r.allocation.get(n).copied().unwrap_or(0.0).to_string()),
        );
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

/// Pivots the long coverage log into one density column per fuzzer.
fn coverage_series(coverage: &str, warnings: &mut Vec<String>) -> String {
    let mut reader = csv::Reader::from_reader(coverage.as_bytes());
    let mut times: Vec<f64> = Vec::new();
    let mut rows: Vec<BTreeMap<String, f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, rec) in reader.deserialize::<CoverageSample>().enumerate() {
        let s = match rec {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("{COVERAGE} row {}: {e}", i + 2));
                continue;
            }
        };
        if times.last() != Some(&s.cpu_seconds) {
            times.push(s.cpu_seconds);
            rows.push(BTreeMap::new());
        }
        if !names.contains(&s.fuzzer) {
            names.push(s.fuzzer.clone());
        }
        rows.last_mut().unwrap().insert(s.fuzzer, s.density);
    }
    names.sort_by_key(|n| (n == UNION, n.clone()));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cpu_seconds".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).expect("in-memory csv");
    for (t, row) in times.iter().zip(&rows) {
        let mut out = vec![t.to_string()];
        out.extend(
            names
                .iter()
                .map(|n| row.get(n).map(f64::to_string).unwrap_or_default()),
        );
        w.write_record(&out).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

/// Builds a report from telemetry contents. Malformed lines are skipped
/// with a warning.
pub fn render_report(rounds_jsonl: &str, coverage_csv: Option<&str>) -> Report {
    let mut warnings = Vec::new();
    let mut rounds = Vec::new();
    for (i, line) in rounds_jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RoundRecord>(line) {
            Ok(r) => rounds.push(r),
            Err(e) => warnings.push(format!("{ROUNDS} line {}: {e}", i + 1)),
        }
    }
    let names = fuzzer_names(&rounds);
    for r in &rounds {
        let sum: f64 = r.allocation.values().sum();
        if r.allocation.values().any(|&f| f != 0.0) && (sum - 1.0).abs() > 1e-9 {
            warnings.push(format!("round {}: allocation sums to {sum}", r.round));
        }
    }
    let (table_text, table_csv) = round_table(&rounds);
    let coverage_series = match coverage_csv {
        Some(c) => coverage_series(c, &mut warnings),
        None => {
            warnings.push(format!("{COVERAGE} missing; no coverage series"));
            String::new()
        }
    };
    Report {
        heatmap: heatmap(&rounds, &names),
        rounds,
        table_text,
        table_csv,
        coverage_series,
        warnings,
    }
}

/// Reads the telemetry in `dir` and renders a report without touching it.
pub fn build_report(dir: &Path) -> Result<Report, ReportError> {
    let rounds_path = dir.join(ROUNDS);
    let rounds = match fs::read_to_string(&rounds_path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ReportError::NoRounds(dir.to_path_buf()))
        }
        Err(source) => {
            return Err(ReportError::Io {
                path: rounds_path,
                source,
            })
        }
    };
    let coverage = fs::read_to_string(dir.join(COVERAGE)).ok();
    Ok(render_report(&rounds, coverage.as_deref()))
}

/// Writes a report into `dir/report/`.
pub fn write_report(dir: &Path, report: &Report) -> Result<PathBuf, ReportError> {
    let out = dir.join(REPORT);
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    for (name, body) in [
        ("rounds.txt", &report.table_text),
        ("rounds.csv", &report.table_csv),
        ("coverage_series.csv", &report.coverage_series),
        ("allocation_heatmap.csv", &report.heatmap),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub dir: String,
    pub policy: String,
    pub final_density: f64,
    pub rank: usize,
    /// Shares its density with another campaign.
    pub tie: bool,
}

fn final_density(dir: &Path) -> Result<(f64, String), ReportError> {
    if let Ok(text) = fs::read_to_string(dir.join(SUMMARY)) {
        if let Ok(s) = serde_json::from_str::<Summary>(&text) {
            return Ok((s.final_density, s.policy));
        }
    }
    let text = fs::read_to_string(dir.join(COVERAGE))
        .map_err(|_| ReportError::NoDensity(dir.to_path_buf()))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<CoverageSample>()
        .filter_map(Result::ok)
        .filter(|s| s.fuzzer == UNION)
        .last()
        .map(|s| (s.density, "?".to_string()))
        .ok_or_else(|| ReportError::NoDensity(dir.to_path_buf()))
}

/// Ranks campaigns by final density, best first. Equal densities share a
/// rank and are flagged as ties.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>, ReportError> {
    let mut rows = Vec::with_capacity(dirs.len());
    for d in dirs {
        let (final_density, policy) = final_density(d)?;
        rows.push(CompareRow {
            dir: d.display().to_string(),
            policy,
            final_density,
            rank: 0,
            tie: false,
        });
    }
    rank_rows(&mut rows);
    Ok(rows)
}

pub fn rank_rows(rows: &mut [CompareRow]) {
    rows.sort_by(|a, b| b.final_density.total_cmp(&a.final_density));
    for i in 0..rows.len() {
        rows[i].rank = if i > 0 && rows[i].final_density == rows[i - 1].final_density {
            rows[i - 1].rank
        } else {
            i + 1
        };
    }
    for i in 0..rows.len() {
        let d = rows[i].final_density;
        rows[i].tie = rows
            .iter()
            .enumerate()
            .any(|(j, r)| j != i && r.final_density == d);
    }
}

pub fn render_compare(rows: &[CompareRow]) -> String {
    let dw = rows.iter().map(|r| r.dir.len()).max().unwrap_or(0).max(3);
    let pw = rows
        .iter()
        .map(|r| r.policy.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut s = format!(
        "{:>4}  {:<dw$}  {:<pw$}  {:>12}\n",
        "rank", "dir", "policy", "density"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>4}  {:<dw$}  {:<pw$}  {:>12.6}{}",
            r.rank,
            r.dir,
            r.policy,
            r.final_density,
            if r.tie { "  (tie)" } else { "" }
        );
    }
    s
}
