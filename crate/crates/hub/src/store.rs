//! Directory-backed episode store.
//!
//! ```text
//! <root>/index.json                      cache of the directory scan
//! <root>/episodes/<user>/<id>.dxe        episode bytes, as uploaded
//! <root>/episodes/<user>/<id>.curated    empty marker
//! <root>/tmp/                            in-flight writes
//! ```
//!
//! Files are written to `tmp/` and renamed into place, so an episode is
//! either fully present or absent. The episode files are the source of
//! truth; `index.json` is rebuilt from them when it disagrees.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use teleop_core::episode::{EpisodeError, EpisodeLog, EXTENSION};
use uuid::Uuid;

use crate::tokens::Principal;

const INDEX_FILE: &str = "index.json";
const CURATED_EXT: &str = "curated";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("malformed episode: {0}")]
    Malformed(#[from] EpisodeError),
    #[error("episode is attributed to `{claimed}`, uploader is `{user}`")]
    Attribution { claimed: String, user: String },
    #[error("episode {0} already exists with different content")]
    Conflict(Uuid),
    #[error("store full: {used} of {capacity} bytes used, upload needs {needed}")]
    Full { used: u64, needed: u64, capacity: u64 },
    #[error("episode {0} not found")]
    NotFound(Uuid),
    #[error("episode {0} belongs to another user and is not curated")]
    Forbidden(Uuid),
    #[error("episode {0} failed its digest check")]
    Corrupt(Uuid),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub episode_id: Uuid,
    pub user_id: String,
    /// Relative to the store root.
    pub path: String,
    pub size: u64,
    pub scene_id: String,
    /// Episode end time, µs since the Unix epoch.
    pub created_at: u64,
    pub curated: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    pub entries: BTreeMap<Uuid, IndexEntry>,
}

impl Index {
    pub fn total_size(&self) -> u64 {
        self.entries.values().map(|e| e.size).sum()
    }
}

/// Result of a successful upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stored {
    pub episode_id: Uuid,
    /// The identical episode was already stored.
    pub duplicate: bool,
}

/// One-shot simulated crash for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Stop writing the episode file after this many bytes.
    EpisodeWrite { after: usize },
    /// Stop writing the index file after this many bytes.
    IndexWrite { after: usize },
}

/// Writes through a temp file next to `path` then renames it over `path`.
/// With `crash_after`, the write stops short and the temp file is left
/// behind, as after a crash.
pub fn write_atomic(path: &Path, bytes: &[u8], crash_after: Option<usize>) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.{}.part", Uuid::new_v4().simple()));
    write_then_rename(&tmp, path, bytes, crash_after)
}

fn write_then_rename(tmp: &Path, path: &Path, bytes: &[u8], crash_after: Option<usize>) -> std::io::Result<()> {
    let mut f = fs::File::create(tmp)?;
    if let Some(k) = crash_after {
        f.write_all(&bytes[..k.min(bytes.len())])?;
        return Err(std::io::Error::other(format!("injected crash after {k} bytes")));
    }
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(tmp, path)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    capacity: Option<u64>,
    index: RwLock<Index>,
    /// Serializes writers.
    write: Mutex<()>,
    fault: Mutex<Option<Fault>>,
}

impl Store {
    /// Opens (creating if needed) the store at `root`, discarding leftovers
    /// of interrupted writes and reconciling the index with the files.
    pub fn open(root: &Path, capacity: Option<u64>) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join("episodes"))?;
        let tmp = root.join("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let scanned = scan(root)?;
        let cached: Option<Index> = fs::read(root.join(INDEX_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let store = Self {
            root: root.to_path_buf(),
            capacity,
            index: RwLock::new(scanned.clone()),
            write: Mutex::new(()),
            fault: Mutex::new(None),
        };
        if cached.as_ref() != Some(&scanned) {
            if cached.is_some() {
                tracing::warn!(root = %root.display(), "index disagreed with the episode files; rebuilt");
            }
            store.persist_index(&scanned)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn inject(&self, fault: Fault) {
        *self.fault.lock().unwrap() = Some(fault);
    }

    /// Consumes the pending fault if `pick` selects it.
    fn crash_point(&self, pick: impl Fn(Fault) -> Option<usize>) -> Option<usize> {
        let mut pending = self.fault.lock().unwrap();
        let k = pending.and_then(pick)?;
        *pending = None;
        Some(k)
    }

    pub fn index(&self) -> Index {
        self.index.read().unwrap().clone()
    }

    /// Reads `index.json` as currently on disk.
    pub fn index_on_disk(&self) -> Result<Index, StoreError> {
        let bytes = fs::read(self.root.join(INDEX_FILE))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Io(std::io::Error::other(e)))
    }

    /// Rebuilds the index by scanning the episode tree.
    pub fn rebuild(&self) -> Result<Index, StoreError> {
        let _w = self.write.lock().unwrap();
        let scanned = scan(&self.root)?;
        *self.index.write().unwrap() = scanned.clone();
        self.persist_index(&scanned)?;
        Ok(scanned)
    }

    fn persist_index(&self, index: &Index) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(index).expect("index serializes");
        let crash = self.crash_point(|f| match f {
            Fault::IndexWrite { after } => Some(after),
            _ => None,
        });
        let tmp = self.root.join("tmp").join(format!("{INDEX_FILE}.{}.part", Uuid::new_v4().simple()));
        write_then_rename(&tmp, &self.root.join(INDEX_FILE), &bytes, crash)?;
        Ok(())
    }

    fn relative_path(user: &str, id: Uuid, ext: &str) -> String {
        format!("episodes/{user}/{id}.{ext}")
    }

    /// Persists an uploaded episode under `user`.
    pub fn put(&self, user: &Principal, bytes: &[u8]) -> Result<Stored, StoreError> {
        let log = EpisodeLog::parse(bytes)?;
        let meta = log.meta();
        if meta.user_id != user.user_id {
            return Err(StoreError::Attribution {
                claimed: meta.user_id.clone(),
                user: user.user_id.clone(),
            });
        }
        let id = meta.episode_id;
        let sha = sha256_hex(bytes);
        let _w = self.write.lock().unwrap();
        if let Some(e) = self.index.read().unwrap().entries.get(&id) {
            if e.sha256 == sha && e.user_id == user.user_id {
                return Ok(Stored {
                    episode_id: id,
                    duplicate: true,
                });
            }
            return Err(StoreError::Conflict(id));
        }
        if let Some(capacity) = self.capacity {
            let used = self.index.read().unwrap().total_size();
            if used + bytes.len() as u64 > capacity {
                return Err(StoreError::Full {
                    used,
                    needed: bytes.len() as u64,
                    capacity,
                });
            }
        }
        let rel = Self::relative_path(&user.user_id, id, EXTENSION);
        let dest = self.root.join(&rel);
        fs::create_dir_all(dest.parent().unwrap())?;
        let crash = self.crash_point(|f| match f {
            Fault::EpisodeWrite { after } => Some(after),
            _ => None,
        });
        let tmp = self.root.join("tmp").join(format!("{id}.{}.part", Uuid::new_v4().simple()));
        write_then_rename(&tmp, &dest, bytes, crash)?;
        let entry = IndexEntry {
            episode_id: id,
            user_id: user.user_id.clone(),
            path: rel,
            size: bytes.len() as u64,
            scene_id: meta.scene_id.clone(),
            created_at: meta.end_wall_us,
            curated: false,
            sha256: sha,
        };
        let snapshot = {
            let mut index = self.index.write().unwrap();
            index.entries.insert(id, entry);
            index.clone()
        };
        // the episode file is committed; a stale index is repaired on open
        if let Err(e) = self.persist_index(&snapshot) {
            tracing::warn!(episode = %id, "index write failed: {e}");
        }
        tracing::info!(episode = %id, user = %user.user_id, size = bytes.len(), "episode stored");
        Ok(Stored {
            episode_id: id,
            duplicate: false,
        })
    }

    /// The caller's episodes, newest first.
    pub fn list_user(&self, user: &str) -> Vec<IndexEntry> {
        self.list(|e| e.user_id == user)
    }

    /// Curated episodes of every user, newest first.
    pub fn list_curated(&self) -> Vec<IndexEntry> {
        self.list(|e| e.curated)
    }

    fn list(&self, keep: impl Fn(&IndexEntry) -> bool) -> Vec<IndexEntry> {
        let mut out: Vec<IndexEntry> = self.index.read().unwrap().entries.values().filter(|e| keep(e)).cloned().collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(a.episode_id.cmp(&b.episode_id)));
        out
    }

    /// Stored bytes, for the owner or for anyone once curated.
    pub fn fetch(&self, user: &str, id: Uuid) -> Result<Vec<u8>, StoreError> {
        let entry = self.index.read().unwrap().entries.get(&id).cloned().ok_or(StoreError::NotFound(id))?;
        if entry.user_id != user && !entry.curated {
            return Err(StoreError::Forbidden(id));
        }
        let bytes = fs::read(self.root.join(&entry.path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(StoreError::Corrupt(id));
        }
        Ok(bytes)
    }

    pub fn set_curated(&self, id: Uuid, curated: bool) -> Result<IndexEntry, StoreError> {
        let _w = self.write.lock().unwrap();
        let entry = self.index.read().unwrap().entries.get(&id).cloned().ok_or(StoreError::NotFound(id))?;
        let marker = self.root.join(Self::relative_path(&entry.user_id, id, CURATED_EXT));
        if curated {
            write_atomic(&marker, b"", None)?;
        } else if marker.exists() {
            fs::remove_file(&marker)?;
        }
        let snapshot = {
            let mut index = self.index.write().unwrap();
            let e = index.entries.get_mut(&id).expect("entry present under the write lock");
            e.curated = curated;
            index.clone()
        };
        self.persist_index(&snapshot)?;
        Ok(snapshot.entries[&id].clone())
    }
}

/// Builds an index from the episode tree. Unreadable files are skipped.
pub fn scan(root: &Path) -> Result<Index, StoreError> {
    let mut index = Index::default();
    let episodes = root.join("episodes");
    if !episodes.exists() {
        return Ok(index);
    }
    for user_dir in fs::read_dir(&episodes)? {
        let user_dir = user_dir?;
        if !user_dir.file_type()?.is_dir() {
            continue;
        }
        let user = user_dir.file_name().to_string_lossy().into_owned();
        for f in fs::read_dir(user_dir.path())? {
            let path = f?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
                continue;
            }
            let bytes = fs::read(&path)?;
            let log = match EpisodeLog::parse(&bytes) {
                Ok(log) => log,
                Err(e) => {
                    tracing::warn!(file = %path.display(), "skipping unreadable episode: {e}");
                    continue;
                }
            };
            let id = log.id();
            if path.file_stem().and_then(|s| s.to_str()) != Some(id.to_string().as_str()) {
                tracing::warn!(file = %path.display(), "file name does not match episode id {id}; skipped");
                continue;
            }
            let curated = path.with_extension(CURATED_EXT).exists();
            index.entries.insert(
                id,
                IndexEntry {
                    episode_id: id,
                    user_id: user.clone(),
                    path: Store::relative_path(&user, id, EXTENSION),
                    size: bytes.len() as u64,
                    scene_id: log.meta().scene_id.clone(),
                    created_at: log.meta().end_wall_us,
                    curated,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
    }
    Ok(index)
}
