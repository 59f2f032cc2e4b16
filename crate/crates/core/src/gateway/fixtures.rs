//! Record/replay fixtures for chat exchanges.
//!
//! A fixture file is JSONL, one record per exchange:
//! `{"tag": "...", "prompt_sha256": "...", "ordinal": 0, "response_text": "..."}`.
//!
//! Lookups match on `(tag, prompt digest)`. Repeated identical prompts are
//! disambiguated by `ordinal`: a replay session keeps a per-key counter, so
//! the n-th identical request receives the entry recorded with ordinal n.
//! Counters are session-local; a fresh session (e.g. per evaluation
//! approach) starts every key back at ordinal 0.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GatewayError, Tag};

/// How the gateway uses the fixture layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMode {
    /// Every exchange goes to the backing model and is appended to the file.
    Record,
    /// Every lookup must hit; a miss is fatal.
    Replay,
    /// Replay when possible, fall through to the backing model and record
    /// the result otherwise.
    Hybrid,
}

/// One recorded exchange.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FixtureEntry {
    pub tag: Tag,
    pub prompt_sha256: String,
    pub ordinal: u32,
    pub response_text: String,
}

/// An immutable, indexed set of recorded exchanges.
#[derive(Debug, Default)]
pub struct FixtureStore {
    entries: Vec<FixtureEntry>,
    /// (tag, digest) -> entry indices sorted by ordinal.
    index: HashMap<(Tag, String), Vec<usize>>,
}

impl FixtureStore {
    pub fn from_entries(entries: Vec<FixtureEntry>) -> Self {
        let mut index: HashMap<(Tag, String), Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            index
                .entry((e.tag, e.prompt_sha256.clone()))
                .or_default()
                .push(i);
        }
        for slots in index.values_mut() {
            slots.sort_by_key(|&i| entries[i].ordinal);
        }
        Self { entries, index }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| {
            GatewayError::Config(format!("cannot open fixture file {}: {e}", path.display()))
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| {
                GatewayError::Config(format!("error reading {}: {e}", path.display()))
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line).map_err(|e| {
                GatewayError::Config(format!(
                    "malformed fixture record at {}:{}: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FixtureEntry] {
        &self.entries
    }

    fn get(&self, tag: Tag, digest: &str, ordinal: u32) -> Option<&FixtureEntry> {
        let slots = self.index.get(&(tag, digest.to_string()))?;
        slots
            .iter()
            .map(|&i| &self.entries[i])
            .find(|e| e.ordinal == ordinal)
    }

    /// Structural validation: for every key, ordinals must form a contiguous
    /// run 0..n with no duplicates. Returns the number of distinct keys.
    pub fn verify(&self) -> Result<usize, GatewayError> {
        for ((tag, digest), slots) in &self.index {
            for (expect, &i) in slots.iter().enumerate() {
                let got = self.entries[i].ordinal;
                if got as usize != expect {
                    return Err(GatewayError::Config(format!(
                        "fixture ordinals for tag {tag} digest {digest} are not contiguous: \
                         expected {expect}, found {got}"
                    )));
                }
            }
        }
        Ok(self.index.len())
    }
}

/// Replay view over a store: per-key ordinal counters, advanced on each hit.
#[derive(Debug)]
pub struct ReplaySession {
    store: FixtureStore,
    counters: Mutex<HashMap<(Tag, String), u32>>,
}

impl ReplaySession {
    pub fn new(store: FixtureStore) -> Self {
        Self {
            store,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &FixtureStore {
        &self.store
    }

    /// Looks up the next entry for `(tag, digest)`. The counter advances
    /// only on a hit, so a miss is repeatable.
    pub fn next(&self, tag: Tag, digest: &str) -> Result<String, GatewayError> {
        let mut counters = self.counters.lock().expect("replay counters poisoned");
        let key = (tag, digest.to_string());
        let ordinal = *counters.get(&key).unwrap_or(&0);
        match self.store.get(tag, digest, ordinal) {
            Some(entry) => {
                counters.insert(key, ordinal + 1);
                Ok(entry.response_text.clone())
            }
            None => Err(GatewayError::FixtureMiss {
                tag,
                digest: digest.to_string(),
                ordinal,
            }),
        }
    }
}

/// Append-only fixture writer used in record and hybrid modes.
#[derive(Debug)]
pub struct FixtureRecorder {
    path: PathBuf,
    inner: Mutex<RecorderInner>,
}

#[derive(Debug)]
struct RecorderInner {
    file: File,
    counters: HashMap<(Tag, String), u32>,
}

impl FixtureRecorder {
    /// Opens `path` for appending, creating parent directories as needed.
    /// Existing entries are loaded first so ordinals continue where a
    /// previous recording stopped.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| {
                GatewayError::Config(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
        let mut counters = HashMap::new();
        if path.exists() {
            let existing = FixtureStore::load(path)?;
            for e in existing.entries() {
                let c = counters
                    .entry((e.tag, e.prompt_sha256.clone()))
                    .or_insert(0u32);
                *c = (*c).max(e.ordinal + 1);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| {
                GatewayError::Config(format!("cannot open {} for append: {e}", path.display()))
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(RecorderInner { file, counters }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, tag: Tag, digest: &str, response_text: &str) -> Result<(), GatewayError> {
        let mut inner = self.inner.lock().expect("recorder poisoned");
        let key = (tag, digest.to_string());
        let ordinal = *inner.counters.get(&key).unwrap_or(&0);
        let entry = FixtureEntry {
            tag,
            prompt_sha256: digest.to_string(),
            ordinal,
            response_text: response_text.to_string(),
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| GatewayError::Config(format!("fixture serialization failed: {e}")))?;
        writeln!(inner.file, "{line}").map_err(|e| {
            GatewayError::Config(format!("cannot write to {}: {e}", self.path.display()))
        })?;
        inner.counters.insert(key, ordinal + 1);
        Ok(())
    }
}
