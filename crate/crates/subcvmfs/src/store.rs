//! Hash-addressed blob store: `objects/<hex[0..2]>/<hex[2..]>`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use subcvmfs_core::{ContentHash, ContentHasher};

use crate::fsutil;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("{0} is not a regular file")]
    NotRegular(PathBuf),
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure { path: path.to_path_buf(), source }
}

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone)]
pub struct ContentStore {
    root: PathBuf,
}

impl ContentStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let objects = root.join("objects");
        fs::create_dir_all(&objects).map_err(io_failure(&objects))?;
        Ok(ContentStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, hash: &ContentHash) -> PathBuf {
        let (dir, rest) = hash.fanout();
        self.root.join("objects").join(dir).join(rest)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.blob_path(hash).is_file()
    }

    /// Adds a file's content. Returns its hash and whether an identical
    /// blob was already present, in which case nothing is written.
    pub fn ingest(&self, source: &Path) -> Result<(ContentHash, bool), StoreError> {
        let meta = fs::metadata(source).map_err(io_failure(source))?;
        if !meta.is_file() {
            return Err(StoreError::NotRegular(source.to_path_buf()));
        }
        let hash = hash_file(source)?;
        Ok((hash, self.ingest_hashed(source, &hash)?))
    }

    /// Like [`ingest`](Self::ingest) when the hash is already known.
    pub fn ingest_hashed(&self, source: &Path, hash: &ContentHash) -> Result<bool, StoreError> {
        let blob = self.blob_path(hash);
        if blob.is_file() {
            return Ok(true);
        }
        let dir = blob.parent().expect("blob has a fan-out parent");
        fs::create_dir_all(dir).map_err(io_failure(dir))?;
        // Concurrent ingests of the same content rename identical bytes
        // over each other, which is harmless.
        fsutil::atomic_copy(source, &blob).map_err(io_failure(&blob))?;
        Ok(false)
    }

    /// Every blob currently stored, with its size, sorted by hash.
    pub fn list(&self) -> Result<Vec<(ContentHash, u64)>, StoreError> {
        let objects = self.root.join("objects");
        let mut out = Vec::new();
        for fan in fs::read_dir(&objects).map_err(io_failure(&objects))? {
            let fan = fan.map_err(io_failure(&objects))?;
            let prefix = fan.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !fan.path().is_dir() {
                continue;
            }
            for blob in fs::read_dir(fan.path()).map_err(io_failure(&fan.path()))? {
                let blob = blob.map_err(io_failure(&fan.path()))?;
                let name = blob.file_name().to_string_lossy().into_owned();
                if let Ok(hash) = format!("{prefix}{name}").parse::<ContentHash>() {
                    let size = blob.metadata().map_err(io_failure(&blob.path()))?.len();
                    out.push((hash, size));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Deletes blobs not in `keep`; returns how many were removed.
    pub fn retain(&self, keep: &BTreeSet<ContentHash>) -> Result<usize, StoreError> {
        let mut removed = 0;
        for (hash, _) in self.list()? {
            if !keep.contains(&hash) {
                let p = self.blob_path(&hash);
                fs::remove_file(&p).map_err(io_failure(&p))?;
                removed += 1;
            }
        }
        Ok(removed)
    }

    /// Writes `index.tsv` (`<hash>\t<size>` per blob) and returns its size.
    pub fn write_index(&self, blobs: &[(ContentHash, u64)]) -> Result<u64, StoreError> {
        let mut text = String::new();
        for (h, s) in blobs {
            text.push_str(&format!("{h}\t{s}\n"));
        }
        let p = self.root.join(INDEX_FILE);
        fsutil::atomic_write(&p, text.as_bytes()).map_err(io_failure(&p))?;
        Ok(text.len() as u64)
    }
}

pub fn hash_file(path: &Path) -> Result<ContentHash, StoreError> {
    let mut f = fs::File::open(path).map_err(io_failure(path))?;
    let mut hasher = ContentHasher::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(io_failure(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize())
}

/// Ingests `source_file` into the store rooted at `store_root`.
pub fn ingest(store_root: &Path, source_file: &Path) -> Result<(ContentHash, bool), StoreError> {
    ContentStore::open(store_root)?.ingest(source_file)
}
