//! File-backed session persistence: one JSON file per thread.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::pipeline::Thread;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session not found: {0}")]
    NotFound(Uuid),
    #[error("unsupported session schema version {0}")]
    UnsupportedVersion(u32),
    #[error("session storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("session serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub config_name: String,
    pub thread: Thread,
}

impl SessionRecord {
    pub fn new(config_name: impl Into<String>) -> Self {
        Self { schema_version: SCHEMA_VERSION, config_name: config_name.into(), thread: Thread::new() }
    }

    pub fn id(&self) -> Uuid {
        self.thread.id
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: Uuid) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn create(&self, config_name: &str) -> Result<SessionRecord, SessionError> {
        let record = SessionRecord::new(config_name);
        self.save(&record)?;
        Ok(record)
    }

    /// Writes the record atomically (temp file, then rename).
    pub fn save(&self, record: &SessionRecord) -> Result<(), SessionError> {
        let path = self.path(record.id());
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(record)?;
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(&self, id: Uuid) -> Result<SessionRecord, SessionError> {
        let raw = match fs::read(self.path(id)) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SessionError::NotFound(id)),
            Err(e) => return Err(e.into()),
        };
        let record: SessionRecord = serde_json::from_slice(&raw)?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(SessionError::UnsupportedVersion(record.schema_version));
        }
        Ok(record)
    }

    pub fn exists(&self, id: Uuid) -> bool {
        self.path(id).is_file()
    }

    pub fn list(&self) -> Result<Vec<Uuid>, SessionError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|s| s.parse().ok()) {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }
}
