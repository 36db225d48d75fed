//! Corpus storage.
//!
//! Monitors, seed sync and simulated fuzzers all talk to corpus directories
//! through [`CorpusStore`]. [`FsStore`] is the real filesystem; [`MemStore`]
//! keeps everything in memory so simulated campaigns can run where there is
//! no filesystem (the browser demo).

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub trait CorpusStore: Send + Sync {
    /// Regular files directly inside `dir`, sorted by name. Hidden files are
    /// skipped. A missing directory lists as empty.
    fn list(&self, dir: &Path) -> io::Result<Vec<PathBuf>>;
    fn read(&self, path: &Path) -> io::Result<Vec<u8>>;
    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()>;
    fn append(&self, path: &Path, data: &[u8]) -> io::Result<()>;
    fn exists(&self, path: &Path) -> bool;
    fn create_dir_all(&self, dir: &Path) -> io::Result<()>;

    /// A token that changes whenever a file in `dir` is created or
    /// rewritten, or `None` if the store cannot tell (callers then rescan).
    fn version(&self, _dir: &Path) -> Option<u64> {
        None
    }
}

pub type SharedStore = Arc<dyn CorpusStore>;

#[derive(Debug, Default, Clone, Copy)]
pub struct FsStore;

impl CorpusStore for FsStore {
    fn list(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        let rd = match std::fs::read_dir(dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for entry in rd {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            if entry.file_type()?.is_file() {
                out.push(entry.path());
            }
        }
        out.sort();
        Ok(out)
    }

    fn read(&self, path: &Path) -> io::Result<Vec<u8>> {
        std::fs::read(path)
    }

    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        // Write-then-rename so a concurrent scan never sees a torn file.
        let file_name = path
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(file_name);
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        std::fs::write(&tmp, data)?;
        std::fs::rename(&tmp, path)
    }

    fn append(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        use std::io::Write;
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?
            .write_all(data)
    }

    fn exists(&self, path: &Path) -> bool {
        path.exists()
    }

    fn create_dir_all(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)
    }
}

type Dir = BTreeMap<String, Arc<[u8]>>;

#[derive(Debug, Default)]
struct Inner {
    dirs: BTreeMap<PathBuf, Dir>,
    versions: BTreeMap<PathBuf, u64>,
    clock: u64,
}

impl Inner {
    fn dir_mut(&mut self, dir: PathBuf) -> &mut Dir {
        self.clock += 1;
        self.versions.insert(dir.clone(), self.clock);
        self.dirs.entry(dir).or_default()
    }
}

#[derive(Debug, Default)]
pub struct MemStore {
    inner: Mutex<Inner>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file_count(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .dirs
            .values()
            .map(|d| d.len())
            .sum()
    }
}

fn split(path: &Path) -> io::Result<(PathBuf, String)> {
    let parent = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    Ok((parent, name))
}

impl CorpusStore for MemStore {
    fn list(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        let inner = self.inner.lock().unwrap();
        Ok(inner
            .dirs
            .get(dir)
            .map(|d| {
                d.keys()
                    .filter(|n| !n.starts_with('.'))
                    .map(|n| dir.join(n))
                    .collect()
            })
            .unwrap_or_default())
    }

    fn read(&self, path: &Path) -> io::Result<Vec<u8>> {
        let (parent, name) = split(path)?;
        let inner = self.inner.lock().unwrap();
        inner
            .dirs
            .get(&parent)
            .and_then(|d| d.get(&name))
            .map(|data| data.to_vec())
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, path.display().to_string()))
    }

    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        let (parent, name) = split(path)?;
        let mut inner = self.inner.lock().unwrap();
        inner.dir_mut(parent).insert(name, Arc::from(data));
        Ok(())
    }

    fn append(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        let (parent, name) = split(path)?;
        let mut inner = self.inner.lock().unwrap();
        let slot = inner
            .dir_mut(parent)
            .entry(name)
            .or_insert_with(|| Arc::from(&[][..]));
        let mut joined = slot.to_vec();
        joined.extend_from_slice(data);
        *slot = Arc::from(joined);
        Ok(())
    }

    fn exists(&self, path: &Path) -> bool {
        let Ok((parent, name)) = split(path) else {
            return false;
        };
        let inner = self.inner.lock().unwrap();
        inner
            .dirs
            .get(&parent)
            .is_some_and(|d| d.contains_key(&name))
            || inner.dirs.contains_key(path)
    }

    fn create_dir_all(&self, dir: &Path) -> io::Result<()> {
        self.inner
            .lock()
            .unwrap()
            .dirs
            .entry(dir.to_path_buf())
            .or_default();
        Ok(())
    }

    fn version(&self, dir: &Path) -> Option<u64> {
        Some(
            self.inner
                .lock()
                .unwrap()
                .versions
                .get(dir)
                .copied()
                .unwrap_or(0),
        )
    }
}
