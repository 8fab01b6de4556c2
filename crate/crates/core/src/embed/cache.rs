use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::fsutil::write_atomic;

const INDEX_FILE: &str = "index.json";

/// SHA-256 over the model id and the exact input text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn new(model_id: &str, text: &str) -> Self {
        let mut h = Sha256::new();
        h.update((model_id.len() as u64).to_le_bytes());
        h.update(model_id.as_bytes());
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
        Self(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRecord {
    model_id: String,
    text: String,
    dims: usize,
}

/// Content-addressed embedding store.
///
/// Vectors live in memory and, when a directory is configured, as one
/// `<digest>.vec` file each (raw little-endian f64) plus an informational
/// `index.json`. Files are written to a temporary name and renamed into place.
pub struct EmbedCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<CacheKey, EmbeddingVector>>,
    index_lock: Mutex<()>,
}

impl EmbedCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: RwLock::new(HashMap::new()),
            index_lock: Mutex::new(()),
        }
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            mem: RwLock::new(HashMap::new()),
            index_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn vec_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.vec", key.hex())))
    }

    pub fn get(&self, model_id: &str, text: &str) -> io::Result<Option<EmbeddingVector>> {
        let key = CacheKey::new(model_id, text);
        if let Some(v) = self.mem.read().get(&key) {
            return Ok(Some(v.clone()));
        }
        let Some(path) = self.vec_path(&key) else {
            return Ok(None);
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        if bytes.is_empty() || bytes.len() % 8 != 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("corrupt cache entry {}", path.display()),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let v = EmbeddingVector {
            model_id: model_id.to_string(),
            values,
        };
        self.mem.write().insert(key, v.clone());
        Ok(Some(v))
    }

    pub fn insert(&self, text: &str, v: &EmbeddingVector) -> io::Result<()> {
        let key = CacheKey::new(&v.model_id, text);
        if let (Some(dir), Some(path)) = (&self.dir, self.vec_path(&key)) {
            let bytes: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
            write_atomic(dir, &path, &bytes)?;
            self.update_index(dir, &key, text, v)?;
        }
        self.mem.write().insert(key, v.clone());
        Ok(())
    }

    fn update_index(&self, dir: &Path, key: &CacheKey, text: &str, v: &EmbeddingVector) -> io::Result<()> {
        let _guard = self.index_lock.lock();
        let path = dir.join(INDEX_FILE);
        let mut index: BTreeMap<String, IndexRecord> = match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        index.insert(
            key.hex(),
            IndexRecord {
                model_id: v.model_id.clone(),
                text: text.to_string(),
                dims: v.dims(),
            },
        );
        let bytes = serde_json::to_vec_pretty(&index).map_err(io::Error::other)?;
        write_atomic(dir, &path, &bytes)
    }

    pub fn len(&self) -> usize {
        self.mem.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
