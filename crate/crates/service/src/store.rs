//! Directory-backed session store with an in-memory cache of snapshots.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use anchorloop_core::rollout::RolloutConfig;

use crate::error::ApiError;
use crate::session::SessionData;

/// Per-session serialization point. Writers hold `writer` for the whole
/// mutation; readers only clone the current snapshot.
pub struct Entry {
    pub writer: Arc<tokio::sync::Mutex<()>>,
    snapshot: RwLock<Arc<SessionData>>,
}

impl Entry {
    fn new(data: SessionData) -> Self {
        Self { writer: Arc::new(tokio::sync::Mutex::new(())), snapshot: RwLock::new(Arc::new(data)) }
    }

    pub fn snapshot(&self) -> Arc<SessionData> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn replace(&self, data: SessionData) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(data);
    }
}

pub struct Store {
    dir: PathBuf,
    defaults: RolloutConfig,
    sessions: Mutex<HashMap<String, Arc<Entry>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>, defaults: RolloutConfig) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, defaults, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn defaults(&self) -> &RolloutConfig {
        &self.defaults
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn create(&self, config: RolloutConfig) -> Result<Arc<SessionData>, ApiError> {
        let mut sessions = self.sessions.lock().expect("session map lock");
        let id = loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            if !sessions.contains_key(&id) && !self.path(&id).exists() {
                break id;
            }
        };
        let data = SessionData::new(id.clone(), config);
        self.persist(&data)?;
        let entry = Arc::new(Entry::new(data));
        let snap = entry.snapshot();
        sessions.insert(id, entry);
        Ok(snap)
    }

    /// Cached entry, loading it from disk on a miss.
    pub fn get(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown session {id}"));
        if !valid_id(id) {
            return Err(unknown());
        }
        let mut sessions = self.sessions.lock().expect("session map lock");
        if let Some(e) = sessions.get(id) {
            return Ok(e.clone());
        }
        let text = fs::read_to_string(self.path(id)).map_err(|_| unknown())?;
        let data: SessionData =
            serde_json::from_str(&text).map_err(|e| ApiError::internal(format!("stored session {id} is unreadable: {e}")))?;
        let entry = Arc::new(Entry::new(data));
        sessions.insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn persist(&self, data: &SessionData) -> Result<(), ApiError> {
        let path = self.path(&data.id);
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec(data).map_err(|e| ApiError::internal(e.to_string()))?;
        fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| ApiError::internal(format!("persisting session: {e}")))
    }

    /// Writes the new state to disk, then publishes it to readers.
    pub fn commit(&self, entry: &Entry, data: SessionData) -> Result<(), ApiError> {
        self.persist(&data)?;
        entry.replace(data);
        Ok(())
    }

    /// Persists every cached session.
    pub fn flush_all(&self) -> Result<usize, ApiError> {
        let entries: Vec<Arc<Entry>> = self.sessions.lock().expect("session map lock").values().cloned().collect();
        for e in &entries {
            self.persist(&e.snapshot())?;
        }
        Ok(entries.len())
    }

    /// Drops the in-memory cache; the next access reloads from disk.
    pub fn evict_all(&self) {
        self.sessions.lock().expect("session map lock").clear();
    }
}
