//! Seed synchronization across the ensemble.
//!
//! Every distinct input found by any fuzzer is copied once into every other
//! fuzzer's sync directory, named `<first 16 hex digits of SHA-256>.<origin>`.
//! Content hashes make the operation idempotent and keep a fuzzer from ever
//! receiving its own seed back.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::FuzzerLayout;
use crate::store::CorpusStore;

pub type ContentHash = [u8; 32];

pub fn content_hash(data: &[u8]) -> ContentHash {
    Sha256::digest(data).into()
}

pub fn sync_file_name(hash: &ContentHash, origin: &str) -> String {
    format!("{}.{origin}", &hex::encode(hash)[..16])
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("listing {path}: {source}")]
    List {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("seed index line {line}: {message}")]
    Index { line: usize, message: String },
}

/// One distinct input, as first seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub hash: String,
    pub origin: String,
    pub first_round: u32,
    pub size: u64,
}

#[derive(Debug, Default, Clone)]
pub struct SeedIndex {
    records: BTreeMap<ContentHash, SeedRecord>,
}

impl SeedIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, hash: &ContentHash) -> Option<&SeedRecord> {
        self.records.get(hash)
    }

    pub fn hashes(&self) -> impl Iterator<Item = &ContentHash> {
        self.records.keys()
    }

    /// Parses the JSON-lines form written by the syncer.
    pub fn parse(text: &str) -> Result<Self, SyncError> {
        let mut records = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| SyncError::Index {
                line: i + 1,
                message,
            };
            let rec: SeedRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let hash: ContentHash = hex::decode(&rec.hash)
                .map_err(|e| bad(e.to_string()))?
                .try_into()
                .map_err(|_| bad("hash is not 32 bytes".into()))?;
            records.entry(hash).or_insert(rec);
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum SyncKind {
    Full,
    AfterFocusRun(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub kind: SyncKind,
    /// Newly imported files per receiving fuzzer.
    pub imported: BTreeMap<String, usize>,
    /// Distinct inputs seen for the first time in this call.
    pub new_seeds: usize,
    pub skipped: usize,
}

impl SyncReport {
    pub fn total_imported(&self) -> usize {
        self.imported.values().sum()
    }
}

/// A fuzzer taking part in a sync.
#[derive(Debug, Clone, Copy)]
pub struct SyncMember<'a> {
    pub name: &'a str,
    pub layout: &'a FuzzerLayout,
}

#[derive(Debug, Default)]
pub struct SeedSyncer {
    index: SeedIndex,
    sources: HashMap<ContentHash, PathBuf>,
    hashed: HashMap<PathBuf, ContentHash>,
    delivered: HashMap<String, HashSet<ContentHash>>,
    /// Hashes found in each member's own directories so far.
    owned: HashMap<String, HashSet<ContentHash>>,
    /// Store version of each directory at its last complete scan.
    scanned: HashMap<PathBuf, u64>,
    index_path: Option<PathBuf>,
}

impl SeedSyncer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persists new index records by appending to `path`.
    pub fn with_index_file(mut self, path: PathBuf) -> Self {
        self.index_path = Some(path);
        self
    }

    pub fn with_index(mut self, index: SeedIndex) -> Self {
        self.index = index;
        self
    }

    pub fn index(&self) -> &SeedIndex {
        &self.index
    }

    pub fn sync_all(
        &mut self,
        store: &dyn CorpusStore,
        members: &[SyncMember<'_>],
        round: u32,
    ) -> Result<SyncReport, SyncError> {
        self.sync(store, members, round, SyncKind::Full)
    }

    /// Same contract as [`sync_all`](Self::sync_all); tagged so telemetry can
    /// attribute the cost to the focus slot of `just_ran`.
    pub fn sync_after_focus_run(
        &mut self,
        store: &dyn CorpusStore,
        members: &[SyncMember<'_>],
        just_ran: &str,
        round: u32,
    ) -> Result<SyncReport, SyncError> {
        self.sync(
            store,
            members,
            round,
            SyncKind::AfterFocusRun(just_ran.to_string()),
        )
    }

    fn scan(
        &mut self,
        store: &dyn CorpusStore,
        member: &SyncMember<'_>,
        round: u32,
        new_lines: &mut Vec<String>,
        report: &mut SyncReport,
    ) -> Result<(), SyncError> {
        let own = self.owned.entry(member.name.to_string()).or_default();
        for dir in &member.layout.interesting {
            let version = store.version(dir);
            if version.is_some() && self.scanned.get(dir) == version.as_ref() {
                continue;
            }
            let mut complete = true;
            let files = store.list(dir).map_err(|source| SyncError::List {
                path: dir.clone(),
                source,
            })?;
            for path in files {
                let hash = match self.hashed.get(&path) {
                    Some(h) => *h,
                    None => match store.read(&path) {
                        Ok(data) => {
                            let h = content_hash(&data);
                            self.hashed.insert(path.clone(), h);
                            if !self.index.records.contains_key(&h) {
                                let rec = SeedRecord {
                                    hash: hex::encode(h),
                                    origin: member.name.to_string(),
                                    first_round: round,
                                    size: data.len() as u64,
                                };
                                new_lines.push(serde_json::to_string(&rec).unwrap());
                                self.index.records.insert(h, rec);
                                report.new_seeds += 1;
                            }
                            h
                        }
                        Err(e) => {
                            log::warn!("sync: skipping unreadable {}: {e}", path.display());
                            report.skipped += 1;
                            complete = false;
                            continue;
                        }
                    },
                };
                self.sources.entry(hash).or_insert_with(|| path.clone());
                own.insert(hash);
            }
            if let (Some(v), true) = (version, complete) {
                self.scanned.insert(dir.clone(), v);
            }
        }
        Ok(())
    }

    fn sync(
        &mut self,
        store: &dyn CorpusStore,
        members: &[SyncMember<'_>],
        round: u32,
        kind: SyncKind,
    ) -> Result<SyncReport, SyncError> {
        let mut report = SyncReport {
            kind,
            imported: members.iter().map(|m| (m.name.to_string(), 0)).collect(),
            new_seeds: 0,
            skipped: 0,
        };
        let mut new_lines = Vec::new();
        let mut union = BTreeMap::new();
        for m in members {
            self.scan(store, m, round, &mut new_lines, &mut report)?;
            for h in &self.owned[m.name] {
                union.entry(*h).or_insert(());
            }
        }

        for m in members {
            let own = &self.owned[m.name];
            let delivered = self.delivered.entry(m.name.to_string()).or_default();
            for hash in union.keys() {
                if own.contains(hash) || delivered.contains(hash) {
                    continue;
                }
                let origin = &self.index.records[hash].origin;
                let dest = m.layout.sync.join(sync_file_name(hash, origin));
                if store.exists(&dest) {
                    delivered.insert(*hash);
                    continue;
                }
                let src = &self.sources[hash];
                let data = match store.read(src) {
                    Ok(d) => d,
                    Err(e) => {
                        log::warn!("sync: source {} vanished: {e}", src.display());
                        report.skipped += 1;
                        continue;
                    }
                };
                write(store, &dest, &data)?;
                delivered.insert(*hash);
                *report.imported.get_mut(m.name).unwrap() += 1;
            }
        }

        if let (Some(path), false) = (&self.index_path, new_lines.is_empty()) {
            let mut text = new_lines.join("\n");
            text.push('\n');
            store
                .append(path, text.as_bytes())
                .map_err(|source| write_error(path, source))?;
        }
        Ok(report)
    }
}

fn write_error(path: &Path, source: io::Error) -> SyncError {
    if source.kind() == io::ErrorKind::StorageFull {
        SyncError::DiskFull(path.to_path_buf())
    } else {
        SyncError::Write {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn write(store: &dyn CorpusStore, dest: &Path, data: &[u8]) -> Result<(), SyncError> {
    store.write(dest, data).map_err(|e| write_error(dest, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::FuzzerSpec;
    use crate::store::MemStore;

    fn layouts(names: &[&str]) -> Vec<(String, FuzzerLayout)> {
        names
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    FuzzerLayout::new(Path::new("/out"), &FuzzerSpec::named(*n)),
                )
            })
            .collect()
    }

    fn members(ls: &[(String, FuzzerLayout)]) -> Vec<SyncMember<'_>> {
        ls.iter()
            .map(|(n, l)| SyncMember { name: n, layout: l })
            .collect()
    }

    #[test]
    fn identical_content_is_not_copied() {
        let store = MemStore::new();
        let ls = layouts(&["a", "b"]);
        store
            .write(&ls[0].1.interesting[0].join("x"), b"seed")
            .unwrap();
        store
            .write(&ls[1].1.interesting[0].join("y"), b"seed")
            .unwrap();
        let r = SeedSyncer::new()
            .sync_all(&store, &members(&ls), 1)
            .unwrap();
        assert_eq!(r.total_imported(), 0);
        assert_eq!(r.new_seeds, 1);
    }

    #[test]
    fn missing_seed_copied_once_and_named_by_hash() {
        let store = MemStore::new();
        let ls = layouts(&["a", "b"]);
        store
            .write(&ls[0].1.interesting[0].join("s"), b"only-a")
            .unwrap();
        let mut syncer = SeedSyncer::new();
        let r = syncer.sync_all(&store, &members(&ls), 1).unwrap();
        assert_eq!(r.imported["b"], 1);
        assert_eq!(r.imported["a"], 0);
        let synced = store.list(&ls[1].1.sync).unwrap();
        let expected = sync_file_name(&content_hash(b"only-a"), "a");
        assert_eq!(synced, vec![ls[1].1.sync.join(expected)]);
        assert!(store.list(&ls[0].1.sync).unwrap().is_empty());

        let again = syncer
            .sync_after_focus_run(&store, &members(&ls), "a", 1)
            .unwrap();
        assert_eq!(again.total_imported(), 0);
        assert_eq!(again.kind, SyncKind::AfterFocusRun("a".into()));
    }

    #[test]
    fn fresh_syncer_does_not_recopy() {
        let store = MemStore::new();
        let ls = layouts(&["a", "b"]);
        store
            .write(&ls[0].1.interesting[1].join("crash"), b"boom")
            .unwrap();
        SeedSyncer::new()
            .sync_all(&store, &members(&ls), 1)
            .unwrap();
        let r = SeedSyncer::new()
            .sync_all(&store, &members(&ls), 2)
            .unwrap();
        assert_eq!(r.total_imported(), 0);
    }

    #[test]
    fn index_persists_and_parses() {
        let store = MemStore::new();
        let ls = layouts(&["a", "b"]);
        let path = PathBuf::from("/out/seed_index.jsonl");
        store
            .write(&ls[0].1.interesting[0].join("1"), b"one")
            .unwrap();
        store
            .write(&ls[1].1.interesting[0].join("2"), b"two!")
            .unwrap();
        let mut syncer = SeedSyncer::new().with_index_file(path.clone());
        syncer.sync_all(&store, &members(&ls), 3).unwrap();
        let text = String::from_utf8(store.read(&path).unwrap()).unwrap();
        let index = SeedIndex::parse(&text).unwrap();
        assert_eq!(index.len(), 2);
        let rec = index.get(&content_hash(b"two!")).unwrap();
        assert_eq!(
            (rec.origin.as_str(), rec.first_round, rec.size),
            ("b", 3, 4)
        );
        assert!(SeedIndex::parse("{not json").is_err());
    }
}
