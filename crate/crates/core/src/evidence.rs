//! Off-chain store for sealed evidence, addressed by the SHA-256 digest of
//! the encoded blob.
//!
//! Locators are URLs of the form `evidence://<64 hex digits>`. The directory
//! backend keeps one file per object at `<root>/<hex[0..2]>/<hex>.blob`. Files
//! are written to a temporary name and renamed into place, so a reader never
//! sees a partial object and identical concurrent puts settle on one file.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::DecodeError;
use crate::protection::ProtectedBlob;

const SCHEME: &str = "evidence://";

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("no evidence stored at {0}")]
    NotFound(EvidenceLocator),
    #[error("stored object at {locator} hashes to {actual}")]
    Integrity { locator: EvidenceLocator, actual: String },
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("stored object is not a sealed blob: {0}")]
    Decode(#[from] DecodeError),
    #[error("malformed locator {0:?}")]
    BadLocator(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EvidenceLocator {
    digest: [u8; 32],
}

impl EvidenceLocator {
    pub fn for_bytes(bytes: &[u8]) -> Self {
        Self { digest: Sha256::digest(bytes).into() }
    }

    pub fn for_blob(blob: &ProtectedBlob) -> Self {
        Self::for_bytes(&blob.encode())
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn url(&self) -> String {
        format!("{SCHEME}{}", self.hex())
    }
}

impl fmt::Display for EvidenceLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.url())
    }
}

impl fmt::Debug for EvidenceLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EvidenceLocator({})", self.url())
    }
}

impl FromStr for EvidenceLocator {
    type Err = EvidenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvidenceError::BadLocator(s.to_owned());
        let hex_part = s.strip_prefix(SCHEME).ok_or_else(bad)?;
        if hex_part.len() != 64 || hex_part.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad());
        }
        let digest = hex::decode(hex_part).map_err(|_| bad())?;
        Ok(Self { digest: digest.try_into().map_err(|_| bad())? })
    }
}

pub trait BlobBackend: Send + Sync {
    /// Stores `bytes` under `key` unless an object already lives there.
    fn write(&self, key: &str, bytes: &[u8]) -> io::Result<()>;
    fn read(&self, key: &str) -> io::Result<Option<Vec<u8>>>;
    fn remove(&self, key: &str) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemoryBackend {
    objects: Mutex<HashMap<String, Vec<u8>>>,
}

impl BlobBackend for MemoryBackend {
    fn write(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        self.objects.lock().unwrap().entry(key.to_owned()).or_insert_with(|| bytes.to_vec());
        Ok(())
    }

    fn read(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.objects.lock().unwrap().get(key).cloned())
    }

    fn remove(&self, key: &str) -> io::Result<()> {
        self.objects.lock().unwrap().remove(key);
        Ok(())
    }
}

#[derive(Debug)]
pub struct DirBackend {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl DirBackend {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, tmp_counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.blob"))
    }
}

impl BlobBackend for DirBackend {
    fn write(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.object_path(key);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("object paths have a parent");
        fs::create_dir_all(dir)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)
    }

    fn read(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.object_path(key)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn remove(&self, key: &str) -> io::Result<()> {
        match fs::remove_file(self.object_path(key)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}

pub struct EvidenceStore {
    backend: Box<dyn BlobBackend>,
}

impl EvidenceStore {
    pub fn new(backend: impl BlobBackend + 'static) -> Self {
        Self { backend: Box::new(backend) }
    }

    pub fn in_memory() -> Self {
        Self::new(MemoryBackend::default())
    }

    pub fn open_dir(root: impl Into<PathBuf>) -> io::Result<Self> {
        Ok(Self::new(DirBackend::new(root)?))
    }

    pub fn put(&self, blob: &ProtectedBlob) -> Result<EvidenceLocator, EvidenceError> {
        let bytes = blob.encode();
        let locator = EvidenceLocator::for_bytes(&bytes);
        self.backend.write(&locator.hex(), &bytes)?;
        Ok(locator)
    }

    /// Fetches and re-hashes the object before decoding it.
    pub fn get(&self, locator: &EvidenceLocator) -> Result<ProtectedBlob, EvidenceError> {
        let bytes = self.backend.read(&locator.hex())?.ok_or(EvidenceError::NotFound(*locator))?;
        let actual = EvidenceLocator::for_bytes(&bytes);
        if actual != *locator {
            return Err(EvidenceError::Integrity { locator: *locator, actual: actual.hex() });
        }
        Ok(ProtectedBlob::decode(&bytes)?)
    }

    /// Drops a stored object. Used once evidence has been consumed.
    pub fn evict(&self, locator: &EvidenceLocator) -> Result<(), EvidenceError> {
        Ok(self.backend.remove(&locator.hex())?)
    }
}

impl fmt::Debug for EvidenceStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvidenceStore").finish_non_exhaustive()
    }
}
