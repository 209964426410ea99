//! Flat directory store. Payloads live once under `blobs/<sha256>.json`;
//! datasets and models are small metadata records under `datasets/` and
//! `models/` that point at a blob, so every upload gets its own id while
//! identical bytes are stored once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub blob: String,
    pub d_c: usize,
    pub trajectories: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub blob: String,
    pub dataset_id: String,
    pub job_id: String,
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        for sub in ["blobs", "datasets", "models"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores `bytes` under their digest and returns it.
    pub fn put_blob(&self, bytes: &[u8]) -> std::io::Result<String> {
        let digest = hex::encode(Sha256::digest(bytes));
        let path = self.root.join("blobs").join(format!("{digest}.json"));
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(digest)
    }

    pub fn get_blob(&self, digest: &str) -> std::io::Result<String> {
        if !valid_id(digest) {
            return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "bad digest"));
        }
        std::fs::read_to_string(self.root.join("blobs").join(format!("{digest}.json")))
    }

    fn put_record<T: Serialize>(&self, kind: &str, id: &str, record: &T) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(record).expect("plain data");
        write_atomic(&self.root.join(kind).join(format!("{id}.json")), &json)
    }

    fn get_record<T: for<'de> Deserialize<'de>>(&self, kind: &str, id: &str) -> std::io::Result<Option<T>> {
        if !valid_id(id) {
            return Ok(None);
        }
        match std::fs::read(self.root.join(kind).join(format!("{id}.json"))) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_dataset(&self, record: &DatasetRecord) -> std::io::Result<()> {
        self.put_record("datasets", &record.id, record)
    }

    pub fn dataset(&self, id: &str) -> std::io::Result<Option<DatasetRecord>> {
        self.get_record("datasets", id)
    }

    pub fn put_model(&self, record: &ModelRecord) -> std::io::Result<()> {
        self.put_record("models", &record.id, record)
    }

    pub fn model(&self, id: &str) -> std::io::Result<Option<ModelRecord>> {
        self.get_record("models", id)
    }
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}
