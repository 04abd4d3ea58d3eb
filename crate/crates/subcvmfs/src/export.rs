use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tar::{EntryType, Header};

use crate::builder::{self, BuildError};
use crate::fsutil;

pub const TAR_FILE: &str = "subset.tar";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Directory,
    Tar,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("unsupported export format `{0}`")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, ExportError> {
        match s {
            "directory" | "dir" => Ok(ExportFormat::Directory),
            "tar" => Ok(ExportFormat::Tar),
            other => Err(ExportError::UnsupportedFormat(other.into())),
        }
    }
}

/// Exports a completed build. The directory format is the tree itself; the
/// tar format writes `subset.tar` next to the manifest with entries sorted
/// by path, zero mtimes and numeric owner 0.
pub fn export(out_root: &Path, format: ExportFormat) -> Result<PathBuf, ExportError> {
    let tree = builder::tree_dir(out_root);
    if builder::load_manifest(out_root)?.is_none() || !tree.is_dir() {
        return Err(BuildError::NotABuild(out_root.to_path_buf()).into());
    }
    match format {
        ExportFormat::Directory => Ok(tree),
        ExportFormat::Tar => {
            let dst = out_root.join(TAR_FILE);
            let bytes = deterministic_tar(&tree).map_err(|source| ExportError::IoFailure { path: tree.clone(), source })?;
            fsutil::atomic_write(&dst, &bytes).map_err(|source| ExportError::IoFailure { path: dst.clone(), source })?;
            Ok(dst)
        }
    }
}

fn base_header(kind: EntryType, mode: u32, size: u64) -> Header {
    let mut h = Header::new_gnu();
    h.set_entry_type(kind);
    h.set_mode(mode);
    h.set_size(size);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h
}

/// Archives everything below `tree`, in byte order of relative paths.
pub fn deterministic_tar(tree: &Path) -> io::Result<Vec<u8>> {
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    for entry in walkdir::WalkDir::new(tree).min_depth(1).follow_links(false) {
        let entry = entry?;
        let rel = entry
            .path()
            .strip_prefix(tree)
            .expect("walk stays below its root")
            .to_str()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "non UTF-8 path in tree"))?
            .to_string();
        paths.push((rel, entry.path().to_path_buf()));
    }
    paths.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));

    let mut tar = tar::Builder::new(Vec::new());
    for (rel, full) in paths {
        let meta = fs::symlink_metadata(&full)?;
        let ft = meta.file_type();
        if ft.is_dir() {
            let mut h = base_header(EntryType::Directory, 0o755, 0);
            tar.append_data(&mut h, format!("{rel}/"), io::empty())?;
        } else if ft.is_symlink() {
            let target = fs::read_link(&full)?;
            let mut h = base_header(EntryType::Symlink, 0o777, 0);
            tar.append_link(&mut h, &rel, target)?;
        } else if ft.is_file() {
            let mode = if fsutil::is_executable(&meta) { 0o755 } else { 0o644 };
            let mut h = base_header(EntryType::Regular, mode, meta.len());
            tar.append_data(&mut h, &rel, fs::File::open(&full)?)?;
        }
    }
    tar.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_names() {
        assert_eq!("tar".parse::<ExportFormat>().unwrap(), ExportFormat::Tar);
        assert_eq!("directory".parse::<ExportFormat>().unwrap(), ExportFormat::Directory);
        assert!(matches!("squashfs".parse::<ExportFormat>(), Err(ExportError::UnsupportedFormat(_))));
    }

    #[test]
    fn empty_tree_has_only_footer() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = deterministic_tar(dir.path()).unwrap();
        assert_eq!(bytes.len(), 1024);
        assert!(bytes.iter().all(|&b| b == 0));
        let mut a = tar::Archive::new(bytes.as_slice());
        assert_eq!(a.entries().unwrap().count(), 0);
    }

    #[test]
    fn headers_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("d")).unwrap();
        fs::write(dir.path().join("d/f"), "hello").unwrap();
        std::os::unix::fs::symlink("f", dir.path().join("d/l")).unwrap();
        let bytes = deterministic_tar(dir.path()).unwrap();
        let mut a = tar::Archive::new(bytes.as_slice());
        let got: Vec<(String, u64, u64, u64)> = a
            .entries()
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                let h = e.header();
                (
                    e.path().unwrap().to_string_lossy().into_owned(),
                    h.mtime().unwrap(),
                    h.uid().unwrap(),
                    h.size().unwrap(),
                )
            })
            .collect();
        assert_eq!(
            got,
            vec![("d/".into(), 0, 0, 0), ("d/f".into(), 0, 0, 5), ("d/l".into(), 0, 0, 0)]
        );
    }
}
