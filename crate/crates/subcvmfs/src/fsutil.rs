use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

/// A name unlikely to collide with concurrent writers in the same directory.
pub fn temp_name(stem: &str) -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    format!(".{stem}.tmp-{}-{n}", std::process::id())
}

/// Writes `bytes` to a sibling temporary and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(temp_name(stem));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Copies a regular file through a temporary so readers never see a
/// partial file.
pub fn atomic_copy(src: &Path, dst: &Path) -> io::Result<u64> {
    let dir = dst.parent().unwrap_or(Path::new("."));
    let stem = dst.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(temp_name(stem));
    let result = fs::copy(src, &tmp).and_then(|n| fs::rename(&tmp, dst).map(|_| n));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

pub fn is_executable(meta: &fs::Metadata) -> bool {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o111 != 0
}

/// Removes whatever is at `path` (file, symlink or directory tree).
pub fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Advisory lock held for the lifetime of the value.
#[derive(Debug)]
pub struct LockFile {
    path: PathBuf,
}

impl LockFile {
    pub fn acquire(path: &Path) -> io::Result<LockFile> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path)?;
        writeln!(f, "{}", std::process::id())?;
        Ok(LockFile { path: path.to_path_buf() })
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `<tree>/<mount_prefix without its leading separator>`.
pub fn under(tree: &Path, absolute: &str) -> PathBuf {
    let rel = absolute.trim_start_matches('/');
    if rel.is_empty() {
        tree.to_path_buf()
    } else {
        tree.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(".lock");
        let held = LockFile::acquire(&p).unwrap();
        assert_eq!(LockFile::acquire(&p).unwrap_err().kind(), io::ErrorKind::AlreadyExists);
        drop(held);
        assert!(LockFile::acquire(&p).is_ok());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn under_strips_leading_separator() {
        assert_eq!(under(Path::new("/o/tree"), "/cvmfs"), PathBuf::from("/o/tree/cvmfs"));
        assert_eq!(under(Path::new("/o/tree"), "/"), PathBuf::from("/o/tree"));
    }
}
