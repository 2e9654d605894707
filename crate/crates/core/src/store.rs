//! Fixed-length time windows of landscapes with flat-file persistence.
//!
//! A completed trace belongs wholly to the half-open window containing its
//! first span start. Each window persists as `window-<start_unix_nano>.json`
//! whose last field is an end marker, so truncated files are recognized and
//! skipped on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::assembly::TraceTree;
use crate::ingest::IngestCounters;
use crate::landscape::{Landscape, TimeWindow};

pub const DEFAULT_WINDOW_NANO: u64 = 10_000_000_000;
const END_MARKER: &str = "end-of-window";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowKey {
    pub start_unix_nano: u64,
    pub window_length_nano: u64,
}

impl WindowKey {
    /// The window containing `t`. Windows are half-open, `[start, start + len)`.
    pub fn containing(t: u64, window_length_nano: u64) -> Self {
        WindowKey {
            start_unix_nano: t - t % window_length_nano,
            window_length_nano,
        }
    }

    pub fn end_unix_nano(&self) -> u64 {
        self.start_unix_nano.saturating_add(self.window_length_nano)
    }

    pub fn time_window(&self) -> TimeWindow {
        TimeWindow {
            start_unix_nano: self.start_unix_nano,
            end_unix_nano: self.end_unix_nano(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("window-{}.json", self.start_unix_nano)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredWindow {
    pub key: WindowKey,
    pub landscape: Landscape,
    pub counters_snapshot: IngestCounters,
}

#[derive(Serialize, Deserialize)]
struct WindowFile {
    key: WindowKey,
    counters_snapshot: IngestCounters,
    landscape: Landscape,
    end_marker: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("window length must be positive")]
    ZeroWindowLength,
    #[error("query range is empty: from {from} >= to {to}")]
    EmptyRange { from: u64, to: u64 },
    #[error("no data directory configured")]
    NoDirectory,
    #[error("i/o error for window {}: {source}", key.start_unix_nano)]
    WindowIo {
        key: WindowKey,
        #[source]
        source: io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Files that were corrupt, truncated or for another window length.
    pub skipped: Vec<PathBuf>,
}

#[derive(Debug)]
pub struct SnapshotStore {
    window_length_nano: u64,
    dir: Option<PathBuf>,
    windows: RwLock<BTreeMap<u64, StoredWindow>>,
    dirty: Mutex<BTreeSet<u64>>,
}

impl SnapshotStore {
    pub fn new(window_length_nano: u64, dir: Option<PathBuf>) -> Result<Self, StoreError> {
        if window_length_nano == 0 {
            return Err(StoreError::ZeroWindowLength);
        }
        Ok(SnapshotStore {
            window_length_nano,
            dir,
            windows: RwLock::new(BTreeMap::new()),
            dirty: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn window_length_nano(&self) -> u64 {
        self.window_length_nano
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Folds one tree into its window and returns the window key.
    pub fn route(&self, tree: &TraceTree, counters: IngestCounters) -> WindowKey {
        self.route_batch(std::slice::from_ref(tree), counters)
            .pop()
            .expect("one tree routes to one window")
    }

    /// Folds trees under a single write lock. Returns one key per tree.
    pub fn route_batch(&self, trees: &[TraceTree], counters: IngestCounters) -> Vec<WindowKey> {
        let mut windows = self.windows.write().unwrap_or_else(|e| e.into_inner());
        let mut dirty = self.dirty.lock().unwrap_or_else(|e| e.into_inner());
        trees
            .iter()
            .map(|tree| {
                let key = WindowKey::containing(tree.first_start_unix_nano, self.window_length_nano);
                let stored = windows
                    .entry(key.start_unix_nano)
                    .or_insert_with(|| StoredWindow {
                        key,
                        landscape: Landscape::new(key.time_window()),
                        counters_snapshot: counters,
                    });
                stored.landscape.fold_tree(tree);
                stored.counters_snapshot = counters;
                dirty.insert(key.start_unix_nano);
                key
            })
            .collect()
    }

    /// Merge of every stored window intersecting `[from, to)`.
    pub fn query(&self, from: u64, to: u64) -> Result<Landscape, StoreError> {
        if from >= to {
            return Err(StoreError::EmptyRange { from, to });
        }
        let windows = self.windows.read().unwrap_or_else(|e| e.into_inner());
        let first = from - from % self.window_length_nano;
        let merged = windows
            .range(first..to)
            .map(|(_, w)| &w.landscape)
            .filter(|l| l.window.is_some_and(|w| w.end_unix_nano > from))
            .fold(Landscape::default(), |acc, l| {
                acc.merge(l.clone())
                    .expect("aligned windows of equal length never overlap")
            });
        Ok(merged)
    }

    pub fn window_count(&self) -> usize {
        self.windows.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn windows(&self) -> Vec<StoredWindow> {
        self.windows
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    /// Latest window key, if any.
    pub fn latest(&self) -> Option<WindowKey> {
        self.windows
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .next_back()
            .map(|w| w.key)
    }

    pub fn insert(&self, window: StoredWindow) {
        let start = window.key.start_unix_nano;
        self.windows
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(start, window);
        self.dirty.lock().unwrap_or_else(|e| e.into_inner()).insert(start);
    }

    /// Writes every window changed since the last call. Returns how many
    /// files were written.
    pub fn persist_dirty(&self) -> Result<usize, StoreError> {
        let Some(dir) = &self.dir else {
            return Ok(0);
        };
        let starts: Vec<u64> = std::mem::take(&mut *self.dirty.lock().unwrap_or_else(|e| e.into_inner()))
            .into_iter()
            .collect();
        let snapshot: Vec<StoredWindow> = {
            let windows = self.windows.read().unwrap_or_else(|e| e.into_inner());
            starts.iter().filter_map(|s| windows.get(s).cloned()).collect()
        };
        for (i, window) in snapshot.iter().enumerate() {
            if let Err(e) = persist(dir, window) {
                // Keep the unwritten ones dirty for the next attempt.
                let mut dirty = self.dirty.lock().unwrap_or_else(|e| e.into_inner());
                dirty.extend(snapshot[i..].iter().map(|w| w.key.start_unix_nano));
                return Err(e);
            }
        }
        Ok(snapshot.len())
    }

    /// Restores a store from `dir`, skipping unreadable or truncated files.
    pub fn load_all(dir: &Path, window_length_nano: u64) -> Result<(Self, LoadReport), StoreError> {
        let store = SnapshotStore::new(window_length_nano, Some(dir.to_path_buf()))?;
        let mut report = LoadReport::default();
        let io_err = |source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("window-") && n.ends_with(".json"))
            })
            .collect();
        paths.sort();
        {
            let mut windows = store.windows.write().unwrap_or_else(|e| e.into_inner());
            for path in paths {
                match read_window(&path) {
                    Some(w) if w.key.window_length_nano == window_length_nano => {
                        windows.insert(w.key.start_unix_nano, w);
                        report.loaded += 1;
                    }
                    _ => {
                        tracing::warn!(path = %path.display(), "skipping unreadable window file");
                        report.skipped.push(path);
                    }
                }
            }
        }
        Ok((store, report))
    }
}

fn read_window(path: &Path) -> Option<StoredWindow> {
    let bytes = fs::read(path).ok()?;
    let file: WindowFile = serde_json::from_slice(&bytes).ok()?;
    if file.end_marker != END_MARKER
        || file.landscape.window != Some(file.key.time_window())
        || !file.key.start_unix_nano.is_multiple_of(file.key.window_length_nano.max(1))
    {
        return None;
    }
    Some(StoredWindow {
        key: file.key,
        landscape: file.landscape,
        counters_snapshot: file.counters_snapshot,
    })
}

/// Writes one window file via a temporary file and rename.
pub fn persist(dir: &Path, window: &StoredWindow) -> Result<(), StoreError> {
    let key = window.key;
    let io_err = |source| StoreError::WindowIo { key, source };
    fs::create_dir_all(dir).map_err(io_err)?;
    let file = WindowFile {
        key,
        counters_snapshot: window.counters_snapshot,
        landscape: window.landscape.clone(),
        end_marker: END_MARKER.to_owned(),
    };
    let bytes = serde_json::to_vec_pretty(&file).expect("window documents always serialize");
    let target = dir.join(key.file_name());
    let tmp = dir.join(format!(".{}.tmp", key.file_name()));
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, &target).map_err(io_err)?;
    Ok(())
}
