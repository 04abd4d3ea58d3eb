//! Namelists (flat dependency path lists) and per-repository spec files.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::path;

/// Sorted, unique, normalized absolute paths plus where they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Namelist {
    entries: Vec<String>,
    pub source: String,
}

impl Namelist {
    /// Builds a namelist from already-absolute paths, normalizing each.
    pub fn from_paths<I, S>(paths: I, source: &str) -> Result<Self, path::PathError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for p in paths {
            set.insert(path::normalize(p.as_ref())?);
        }
        Ok(Namelist {
            entries: set.into_iter().collect(),
            source: source.into(),
        })
    }

    pub fn empty(source: &str) -> Self {
        Namelist {
            entries: Vec::new(),
            source: source.into(),
        }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One path per line, LF terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NamelistError {
    #[error("line {0}: entry is not an absolute path")]
    RelativePathEntry(usize),
    #[error("namelist is not valid UTF-8")]
    NonUtf8Input,
}

/// Parses namelist text: one absolute path per line, `#` comments and blank
/// lines ignored, surrounding whitespace trimmed.
pub fn parse_namelist(bytes: &[u8], source: &str) -> Result<Namelist, NamelistError> {
    let text = core::str::from_utf8(bytes).map_err(|_| NamelistError::NonUtf8Input)?;
    let mut set = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = path::normalize(line).map_err(|_| NamelistError::RelativePathEntry(i + 1))?;
        set.insert(p);
    }
    Ok(Namelist {
        entries: set.into_iter().collect(),
        source: source.into(),
    })
}

/// Set union of all inputs.
pub fn merge(namelists: &[Namelist]) -> Namelist {
    let set: BTreeSet<&String> = namelists.iter().flat_map(|n| n.entries.iter()).collect();
    Namelist {
        entries: set.into_iter().cloned().collect(),
        source: "merged".into(),
    }
}

/// Partitions entries by `exists`, returning `(valid, missing)`.
pub fn validate<F>(namelist: &Namelist, mut exists: F) -> (Namelist, Namelist)
where
    F: FnMut(&str) -> bool,
{
    let (valid, missing): (Vec<String>, Vec<String>) =
        namelist.entries.iter().cloned().partition(|p| exists(p));
    (
        Namelist {
            entries: valid,
            source: namelist.source.clone(),
        },
        Namelist {
            entries: missing,
            source: namelist.source.clone(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SpecMode {
    /// Just the named path.
    Exact,
    /// A directory and its immediate entries.
    Children,
    /// A directory and everything below it.
    Subtree,
}

/// One inclusion line of a spec file. `relpath` is relative to the
/// repository root but written with a leading separator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpecEntry {
    pub relpath: String,
    pub mode: SpecMode,
}

impl SpecEntry {
    pub fn new(relpath: &str, mode: SpecMode) -> Result<Self, SpecError> {
        let relpath = path::normalize(relpath).map_err(|_| SpecError::MalformedEntry(0))?;
        if path::components(&relpath).any(|c| c.contains('*')) {
            return Err(SpecError::MalformedEntry(0));
        }
        Ok(SpecEntry { relpath, mode })
    }

    pub fn exact(relpath: &str) -> Result<Self, SpecError> {
        SpecEntry::new(relpath, SpecMode::Exact)
    }
}

/// The inclusion list for one repository. Entries are kept sorted by
/// relpath then mode, without duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpecFile {
    pub repository: String,
    entries: Vec<SpecEntry>,
}

impl SpecFile {
    pub fn new<I: IntoIterator<Item = SpecEntry>>(repository: &str, entries: I) -> Self {
        let set: BTreeSet<SpecEntry> = entries.into_iter().collect();
        SpecFile {
            repository: repository.into(),
            entries: set.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[SpecEntry] {
        &self.entries
    }

    /// File name the spec is stored under.
    pub fn file_name(&self) -> String {
        let mut s = self.repository.clone();
        s.push_str(".spec");
        s
    }

    /// Union of entries of two specs for the same repository.
    pub fn union(&self, other: &SpecFile) -> SpecFile {
        SpecFile::new(
            &self.repository,
            self.entries.iter().chain(other.entries.iter()).cloned(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("{0} does not lie under the mount prefix")]
    EntryOutsideMount(String),
    #[error("{0} names a repository root; entries need a path inside the repository")]
    BareRepositoryEntry(String),
    #[error("line {0}: malformed spec entry")]
    MalformedEntry(usize),
}

/// Groups entries by repository (the first component under `mount_prefix`)
/// and strips mount prefix and repository from each path. All entries
/// become [`SpecMode::Exact`].
pub fn split_by_repository(namelist: &Namelist, mount_prefix: &str) -> Result<Vec<SpecFile>, SpecError> {
    let mut by_repo: BTreeMap<&str, Vec<SpecEntry>> = BTreeMap::new();
    for entry in &namelist.entries {
        let rest = path::strip_component_prefix(entry, mount_prefix)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| SpecError::EntryOutsideMount(entry.clone()))?;
        let rest = &rest[1..];
        let (repo, relpath) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => return Err(SpecError::BareRepositoryEntry(entry.clone())),
        };
        let e = SpecEntry::exact(relpath).map_err(|_| SpecError::EntryOutsideMount(entry.clone()))?;
        by_repo.entry(repo).or_default().push(e);
    }
    Ok(by_repo
        .into_iter()
        .map(|(repo, entries)| SpecFile::new(repo, entries))
        .collect())
}

/// Canonical text form: sorted, one entry per line, LF terminated. A `/*`
/// suffix marks children, `/**` marks a subtree.
pub fn write_spec(spec: &SpecFile) -> String {
    let mut out = String::new();
    for e in &spec.entries {
        let base = if e.relpath == "/" { "" } else { e.relpath.as_str() };
        let _ = match e.mode {
            SpecMode::Exact => writeln!(out, "{}", e.relpath),
            SpecMode::Children => writeln!(out, "{base}/*"),
            SpecMode::Subtree => writeln!(out, "{base}/**"),
        };
    }
    out
}

pub fn parse_spec(bytes: &[u8], repository: &str) -> Result<SpecFile, SpecError> {
    let text = core::str::from_utf8(bytes).map_err(|_| SpecError::MalformedEntry(0))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, mode) = if let Some(p) = line.strip_suffix("/**") {
            (p, SpecMode::Subtree)
        } else if let Some(p) = line.strip_suffix("/*") {
            (p, SpecMode::Children)
        } else {
            (line, SpecMode::Exact)
        };
        let p = if p.is_empty() && mode != SpecMode::Exact { "/" } else { p };
        let e = SpecEntry::new(p, mode).map_err(|_| SpecError::MalformedEntry(lineno))?;
        entries.push(e);
    }
    Ok(SpecFile::new(repository, entries))
}
