//! The subset manifest and its canonical serialization.
//!
//! ```text
//! subcvmfs-manifest v1 revision=<n>
//! <logical_path>\t<kind>\t<hash|target|->\t<size|0>\t<exec 0|1>
//! ```
//!
//! Records are sorted by logical path (raw bytes). Logical paths are
//! absolute below the mount prefix: `/repoA/path/to/file` is materialized
//! at `<mount_prefix>/repoA/path/to/file`. The root hash is the SHA-256 of
//! every byte after the header line.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::hash::{ContentHash, ContentHasher};
use crate::path;

pub const MANIFEST_MAGIC: &str = "subcvmfs-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum EntryKind {
    Regular {
        hash: ContentHash,
        size: u64,
        exec: bool,
    },
    Symlink {
        target: String,
    },
    Directory,
}

impl EntryKind {
    pub fn name(&self) -> &'static str {
        match self {
            EntryKind::Regular { .. } => "regular",
            EntryKind::Symlink { .. } => "symlink",
            EntryKind::Directory => "directory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FileRecord {
    pub logical_path: String,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub kind: EntryKind,
}

impl FileRecord {
    pub fn directory(logical_path: &str) -> Self {
        FileRecord {
            logical_path: logical_path.into(),
            kind: EntryKind::Directory,
        }
    }

    pub fn regular(logical_path: &str, hash: ContentHash, size: u64, exec: bool) -> Self {
        FileRecord {
            logical_path: logical_path.into(),
            kind: EntryKind::Regular { hash, size, exec },
        }
    }

    pub fn symlink(logical_path: &str, target: &str) -> Self {
        FileRecord {
            logical_path: logical_path.into(),
            kind: EntryKind::Symlink {
                target: target.into(),
            },
        }
    }

    pub fn is_dir(&self) -> bool {
        matches!(self.kind, EntryKind::Directory)
    }

    fn write_line(&self, out: &mut String) {
        let _ = match &self.kind {
            EntryKind::Regular { hash, size, exec } => writeln!(
                out,
                "{}\tregular\t{}\t{}\t{}",
                self.logical_path,
                hash,
                size,
                u8::from(*exec)
            ),
            EntryKind::Symlink { target } => {
                writeln!(out, "{}\tsymlink\t{}\t0\t0", self.logical_path, target)
            }
            EntryKind::Directory => writeln!(out, "{}\tdirectory\t-\t0\t0", self.logical_path),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("missing or malformed manifest header")]
    BadHeader,
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("manifest is not valid UTF-8")]
    NonUtf8,
    #[error("{0} is not a normalized absolute path below the root")]
    BadPath(String),
    #[error("{0} appears more than once")]
    Duplicate(String),
    #[error("{0} has no directory record for its parent")]
    MissingParent(String),
    #[error("{0} contains a tab or newline and cannot be serialized")]
    Unrepresentable(String),
}

/// A versioned, sorted listing of the subset. Construction checks the
/// closure invariant: every record's parent is the root or a directory
/// record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetManifest {
    revision: u64,
    records: Vec<FileRecord>,
    root_hash: ContentHash,
}

impl SubsetManifest {
    pub fn new(revision: u64, mut records: Vec<FileRecord>) -> Result<Self, ManifestError> {
        records.sort_by(|a, b| a.logical_path.as_bytes().cmp(b.logical_path.as_bytes()));
        for w in records.windows(2) {
            if w[0].logical_path == w[1].logical_path {
                return Err(ManifestError::Duplicate(w[1].logical_path.clone()));
            }
        }
        let dirs: BTreeSet<&str> = records
            .iter()
            .filter(|r| r.is_dir())
            .map(|r| r.logical_path.as_str())
            .collect();
        for r in &records {
            let p = r.logical_path.as_str();
            if p == "/" || !path::is_normalized(p) {
                return Err(ManifestError::BadPath(r.logical_path.clone()));
            }
            if p.contains(['\t', '\n']) {
                return Err(ManifestError::Unrepresentable(r.logical_path.clone()));
            }
            if let EntryKind::Symlink { target } = &r.kind {
                if target.contains(['\t', '\n']) || target.is_empty() {
                    return Err(ManifestError::Unrepresentable(r.logical_path.clone()));
                }
            }
            match path::parent(p) {
                Some("/") => {}
                Some(parent) if dirs.contains(parent) => {}
                _ => return Err(ManifestError::MissingParent(r.logical_path.clone())),
            }
        }
        let root_hash = ContentHash::digest(body(&records).as_bytes());
        Ok(SubsetManifest {
            revision,
            records,
            root_hash,
        })
    }

    pub fn empty(revision: u64) -> Self {
        SubsetManifest::new(revision, Vec::new()).expect("empty manifest is valid")
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn records(&self) -> &[FileRecord] {
        &self.records
    }

    pub fn root_hash(&self) -> ContentHash {
        self.root_hash
    }

    pub fn get(&self, logical_path: &str) -> Option<&FileRecord> {
        self.records
            .binary_search_by(|r| r.logical_path.as_bytes().cmp(logical_path.as_bytes()))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn with_revision(mut self, revision: u64) -> Self {
        self.revision = revision;
        self
    }

    /// Regular-file records only.
    pub fn regular_files(&self) -> impl Iterator<Item = (&FileRecord, ContentHash, u64)> {
        self.records.iter().filter_map(|r| match r.kind {
            EntryKind::Regular { hash, size, .. } => Some((r, hash, size)),
            _ => None,
        })
    }

    /// Distinct blob hashes with their sizes, sorted by hash.
    pub fn blobs(&self) -> Vec<(ContentHash, u64)> {
        let set: BTreeSet<(ContentHash, u64)> =
            self.regular_files().map(|(_, h, s)| (h, s)).collect();
        set.into_iter().collect()
    }

    /// The serialized record lines (everything the root hash covers).
    pub fn body(&self) -> String {
        body(&self.records)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC} revision={}\n", self.revision);
        out.push_str(&self.body());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ManifestError> {
        let text = core::str::from_utf8(bytes).map_err(|_| ManifestError::NonUtf8)?;
        let (header, rest) = text.split_once('\n').ok_or(ManifestError::BadHeader)?;
        let revision = header
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|h| h.strip_prefix(" revision="))
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or(ManifestError::BadHeader)?;
        let mut records = Vec::new();
        for (i, line) in rest.split_terminator('\n').enumerate() {
            let lineno = i + 2;
            let bad = |reason: &str| ManifestError::BadRecord {
                line: lineno,
                reason: reason.into(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, kind, third, size, exec] = fields[..] else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            let kind = match kind {
                "regular" => EntryKind::Regular {
                    hash: third.parse().map_err(|_| bad("bad content hash"))?,
                    size: size.parse().map_err(|_| bad("bad size"))?,
                    exec: match exec {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("exec flag must be 0 or 1")),
                    },
                },
                "symlink" => EntryKind::Symlink {
                    target: third.into(),
                },
                "directory" => EntryKind::Directory,
                _ => return Err(bad("unknown kind")),
            };
            records.push(FileRecord {
                logical_path: p.into(),
                kind,
            });
        }
        let m = SubsetManifest::new(revision, records)?;
        // Reject anything that is not in canonical form.
        if m.to_text().as_bytes() != bytes {
            return Err(ManifestError::BadRecord {
                line: 0,
                reason: "manifest is not in canonical form".into(),
            });
        }
        Ok(m)
    }
}

fn body(records: &[FileRecord]) -> String {
    let mut out = String::new();
    for r in records {
        r.write_line(&mut out);
    }
    out
}

/// Root hash over records in any order, for callers that only need the
/// digest.
pub fn root_hash_of(records: &[FileRecord]) -> ContentHash {
    let mut sorted: Vec<&FileRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.logical_path.as_bytes().cmp(b.logical_path.as_bytes()));
    let mut h = ContentHasher::new();
    let mut line = String::new();
    for r in sorted {
        line.clear();
        r.write_line(&mut line);
        h.update(line.as_bytes());
    }
    h.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn sample() -> Vec<FileRecord> {
        vec![
            FileRecord::regular("/repoA/path/to/file", ContentHash::digest(b"abc"), 3, false),
            FileRecord::directory("/repoA"),
            FileRecord::directory("/repoA/path"),
            FileRecord::directory("/repoA/path/to"),
            FileRecord::symlink("/repoA/link", "path/to/file"),
        ]
    }

    #[test]
    fn serializes_canonically() {
        let m = SubsetManifest::new(3, sample()).unwrap();
        let text = m.to_text();
        let expected = "subcvmfs-manifest v1 revision=3\n\
/repoA\tdirectory\t-\t0\t0\n\
/repoA/link\tsymlink\tpath/to/file\t0\t0\n\
/repoA/path\tdirectory\t-\t0\t0\n\
/repoA/path/to\tdirectory\t-\t0\t0\n\
/repoA/path/to/file\tregular\tba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad\t3\t0\n";
        assert_eq!(text, expected);
        let body = &expected[expected.find('\n').unwrap() + 1..];
        assert_eq!(m.root_hash(), ContentHash::digest(body.as_bytes()));
        assert_eq!(SubsetManifest::parse(text.as_bytes()).unwrap(), m);
    }

    #[test]
    fn root_hash_ignores_revision_and_order() {
        let mut rev = sample();
        rev.reverse();
        let a = SubsetManifest::new(1, sample()).unwrap();
        let b = SubsetManifest::new(9, rev).unwrap();
        assert_eq!(a.root_hash(), b.root_hash());
        assert_eq!(root_hash_of(&sample()), a.root_hash());
    }

    #[test]
    fn empty_manifest() {
        let m = SubsetManifest::empty(1);
        assert_eq!(m.to_text(), "subcvmfs-manifest v1 revision=1\n");
        assert_eq!(
            m.root_hash().to_string(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn rejects_broken_closure_and_duplicates() {
        let r = vec![FileRecord::directory("/a/b")];
        assert_eq!(
            SubsetManifest::new(1, r),
            Err(ManifestError::MissingParent("/a/b".into()))
        );
        let r = vec![FileRecord::directory("/a"), FileRecord::directory("/a")];
        assert_eq!(SubsetManifest::new(1, r), Err(ManifestError::Duplicate("/a".into())));
        let r = vec![
            FileRecord::regular("/f", ContentHash::digest(b""), 0, false),
            FileRecord::directory("/f/g"),
        ];
        assert_eq!(
            SubsetManifest::new(1, r),
            Err(ManifestError::MissingParent("/f/g".into()))
        );
        let r = vec![FileRecord::directory("/a\tb")];
        assert!(matches!(SubsetManifest::new(1, r), Err(ManifestError::Unrepresentable(_))));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(SubsetManifest::parse(b""), Err(ManifestError::BadHeader));
        assert_eq!(
            SubsetManifest::parse(b"subcvmfs-manifest v2 revision=1\n"),
            Err(ManifestError::BadHeader)
        );
        let bad = b"subcvmfs-manifest v1 revision=1\n/a\tdirectory\t-\t0\n";
        assert!(matches!(
            SubsetManifest::parse(bad),
            Err(ManifestError::BadRecord { line: 2, .. })
        ));
        let unsorted = b"subcvmfs-manifest v1 revision=1\n/b\tdirectory\t-\t0\t0\n/a\tdirectory\t-\t0\t0\n";
        assert!(SubsetManifest::parse(unsorted).is_err());
    }

    #[test]
    fn blobs_are_distinct() {
        let h = ContentHash::digest(b"x");
        let m = SubsetManifest::new(
            1,
            vec![
                FileRecord::regular("/a", h, 1, false),
                FileRecord::regular("/b", h, 1, true),
                FileRecord::regular("/c", ContentHash::digest(b"yy"), 2, false),
            ],
        )
        .unwrap();
        assert_eq!(m.blobs().len(), 2);
        assert_eq!(m.get("/b").unwrap().kind.name(), "regular");
        assert!(m.get("/z").is_none());
    }
}
