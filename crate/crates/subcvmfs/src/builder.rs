//! Materializes a subset from spec files: a content store, an export tree
//! whose regular files are hard links into the store, and a manifest.
//!
//! Output layout under `out_root`:
//!
//! ```text
//! store/objects/xx/<rest>   blobs
//! store/index.tsv           <hash>\t<size> per blob
//! tree/<mount_prefix>/...   export tree
//! manifest.tsv              subset manifest
//! build.json                mount prefix, revision and root hash
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subcvmfs_core::{path, ContentHash, DedupStats, FileRecord, ManifestError, SpecFile, SpecMode, SubsetManifest};

use crate::fsutil;
use crate::store::{self, ContentStore, StoreError};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BUILD_INFO_FILE: &str = "build.json";

const MAX_SYMLINK_HOPS: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no source root configured for repository `{0}`")]
    MissingSourceRoot(String),
    #[error("{} spec target(s) missing, first: {}", .0.len(), .0.first().map(|m| m.to_string()).unwrap_or_default())]
    SpecTargetsMissing(Vec<SpecTargetMissing>),
    #[error("{0} has a name that cannot be represented in the manifest")]
    Unrepresentable(PathBuf),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{0} is not a completed build")]
    NotABuild(PathBuf),
    #[error("invalid mount prefix: {0}")]
    MountPrefix(String),
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> BuildError + '_ {
    move |source| BuildError::IoFailure { path: path.to_path_buf(), source }
}

/// A spec entry that did not resolve in its source repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecTargetMissing {
    pub repository: String,
    pub relpath: String,
    pub reason: String,
}

impl std::fmt::Display for SpecTargetMissing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{} ({})", self.repository, self.relpath, self.reason)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    DropWarn,
    Strict,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub mount_prefix: String,
    pub missing_policy: MissingPolicy,
}

impl BuildOptions {
    pub fn new(mount_prefix: &str) -> Self {
        BuildOptions {
            mount_prefix: mount_prefix.into(),
            missing_policy: MissingPolicy::DropWarn,
        }
    }
}

/// What a logical path is backed by in the source repository.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    Directory,
    Symlink(String),
    Regular { path: PathBuf, size: u64, exec: bool },
}

/// Logical path -> source, the output of spec resolution before hashing.
#[derive(Debug, Default)]
struct Selection {
    entries: BTreeMap<String, Source>,
    missing: Vec<SpecTargetMissing>,
}

fn utf8_name(p: &Path) -> Result<&str, BuildError> {
    let s = p
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| BuildError::Unrepresentable(p.to_path_buf()))?;
    if s.contains(['\t', '\n']) {
        return Err(BuildError::Unrepresentable(p.to_path_buf()));
    }
    Ok(s)
}

fn classify(src: &Path, meta: &fs::Metadata) -> Result<Option<Source>, BuildError> {
    let ft = meta.file_type();
    Ok(Some(if ft.is_symlink() {
        let target = fs::read_link(src).map_err(io_failure(src))?;
        let target = target
            .to_str()
            .filter(|t| !t.contains(['\t', '\n']))
            .ok_or_else(|| BuildError::Unrepresentable(src.to_path_buf()))?;
        Source::Symlink(target.to_string())
    } else if ft.is_dir() {
        Source::Directory
    } else if ft.is_file() {
        Source::Regular {
            path: src.to_path_buf(),
            size: meta.len(),
            exec: fsutil::is_executable(meta),
        }
    } else {
        return Ok(None);
    }))
}

struct Resolver<'a> {
    repo: &'a str,
    source_root: &'a Path,
    /// `<mount_prefix>/<repo>`, for absolute symlink targets.
    mounted_root: String,
}

enum Step {
    Done,
    Missing(String),
}

impl Resolver<'_> {
    fn logical_root(&self) -> String {
        format!("/{}", self.repo)
    }

    /// Source location of a repository-relative path.
    fn source_of(&self, rel: &str) -> PathBuf {
        fsutil::under(self.source_root, rel)
    }

    /// Maps a symlink target seen at repository-relative `link_rel` to a
    /// repository-relative path, if it stays inside this repository.
    fn target_rel(&self, link_rel: &str, target: &str) -> Option<String> {
        let abs = if target.starts_with('/') {
            let rest = path::strip_component_prefix(&path::normalize(target).ok()?, &self.mounted_root)?.to_string();
            if rest.is_empty() {
                "/".to_string()
            } else {
                rest
            }
        } else {
            // Relative targets resolve against the link's directory; ".."
            // past the repository root leaves the repository.
            let dir = path::parent(link_rel).unwrap_or("/");
            let mut depth: i64 = path::components(dir).count() as i64;
            for c in path::components(target) {
                match c {
                    ".." => depth -= 1,
                    "." => {}
                    _ => depth += 1,
                }
                if depth < 0 {
                    return None;
                }
            }
            path::resolve(dir, target).ok()?
        };
        Some(abs)
    }

    /// Resolves one spec entry into `sel`, committing nothing if it fails.
    fn resolve_entry(&self, relpath: &str, mode: SpecMode, sel: &mut BTreeMap<String, Source>) -> Result<Step, BuildError> {
        let mut staged: BTreeMap<String, Source> = BTreeMap::new();
        let step = self.walk(relpath, mode, &mut staged, 0)?;
        if let Step::Done = step {
            staged.insert(self.logical_root(), Source::Directory);
            sel.extend(staged);
        }
        Ok(step)
    }

    fn walk(&self, relpath: &str, mode: SpecMode, staged: &mut BTreeMap<String, Source>, hops: usize) -> Result<Step, BuildError> {
        if hops > MAX_SYMLINK_HOPS {
            return Ok(Step::Missing("too many levels of symbolic links".into()));
        }
        let comps: Vec<&str> = path::components(relpath).collect();
        let root_meta = fs::symlink_metadata(self.source_root).map_err(io_failure(self.source_root))?;
        if !root_meta.is_dir() {
            return Ok(Step::Missing("source root is not a directory".into()));
        }
        if comps.is_empty() {
            return self.apply_mode("/", mode, staged);
        }
        let mut cur = String::from("/");
        for (i, c) in comps.iter().enumerate() {
            let last = i + 1 == comps.len();
            let rel = path::join(&cur, c);
            let src = self.source_of(&rel);
            let meta = match fs::symlink_metadata(&src) {
                Ok(m) => m,
                Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Step::Missing("no such file or directory".into())),
                Err(e) => return Err(io_failure(&src)(e)),
            };
            utf8_name(&src)?;
            let logical = path::join(&self.logical_root(), &rel);
            match classify(&src, &meta)? {
                Some(Source::Symlink(target)) => {
                    staged.insert(logical, Source::Symlink(target.clone()));
                    let Some(mut next) = self.target_rel(&rel, &target) else {
                        return Ok(if last {
                            Step::Done
                        } else {
                            Step::Missing(format!("symlink {rel} leaves the repository"))
                        });
                    };
                    for rest in &comps[i + 1..] {
                        next = path::join(&next, rest);
                    }
                    let step = self.walk(&next, mode, staged, hops + 1)?;
                    // A dangling final link is still a valid entry.
                    return Ok(match step {
                        Step::Missing(_) if last => Step::Done,
                        other => other,
                    });
                }
                Some(Source::Directory) => {
                    if last {
                        return self.apply_mode(&rel, mode, staged);
                    }
                    staged.insert(logical, Source::Directory);
                }
                Some(regular @ Source::Regular { .. }) => {
                    if !last {
                        return Ok(Step::Missing(format!("{rel} is not a directory")));
                    }
                    staged.insert(logical, regular);
                }
                None => return Ok(Step::Missing(format!("{rel} is not a file, directory or symlink"))),
            }
            cur = rel;
        }
        Ok(Step::Done)
    }

    /// Adds the directory at `rel` and, depending on the mode, its contents.
    fn apply_mode(&self, rel: &str, mode: SpecMode, staged: &mut BTreeMap<String, Source>) -> Result<Step, BuildError> {
        let logical = path::join(&self.logical_root(), rel);
        staged.insert(logical.clone(), Source::Directory);
        match mode {
            SpecMode::Exact => {}
            SpecMode::Children => {
                let dir = self.source_of(rel);
                let mut children: Vec<PathBuf> = fs::read_dir(&dir)
                    .map_err(io_failure(&dir))?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<io::Result<_>>()
                    .map_err(io_failure(&dir))?;
                children.sort();
                for child in children {
                    let name = utf8_name(&child)?;
                    let meta = fs::symlink_metadata(&child).map_err(io_failure(&child))?;
                    if let Some(s) = classify(&child, &meta)? {
                        staged.insert(path::join(&logical, name), s);
                    }
                }
            }
            SpecMode::Subtree => {
                let dir = self.source_of(rel);
                for entry in walkdir::WalkDir::new(&dir).min_depth(1).follow_links(false) {
                    let entry = entry.map_err(|e| {
                        let p = e.path().unwrap_or(&dir).to_path_buf();
                        BuildError::IoFailure { path: p, source: e.into() }
                    })?;
                    let tail = entry.path().strip_prefix(&dir).expect("walk stays below its root");
                    let mut lp = logical.clone();
                    for c in tail.components() {
                        let c = c.as_os_str().to_str().ok_or_else(|| BuildError::Unrepresentable(entry.path().to_path_buf()))?;
                        if c.contains(['\t', '\n']) {
                            return Err(BuildError::Unrepresentable(entry.path().to_path_buf()));
                        }
                        lp = path::join(&lp, c);
                    }
                    let meta = fs::symlink_metadata(entry.path()).map_err(io_failure(entry.path()))?;
                    if let Some(s) = classify(entry.path(), &meta)? {
                        staged.insert(lp, s);
                    }
                }
            }
        }
        Ok(Step::Done)
    }
}

fn select(spec: &SpecFile, source_root: &Path, mount_prefix: &str) -> Result<Selection, BuildError> {
    let resolver = Resolver {
        repo: &spec.repository,
        source_root,
        mounted_root: path::join(mount_prefix, &spec.repository),
    };
    let mut sel = Selection::default();
    for e in spec.entries() {
        if let Step::Missing(reason) = resolver.resolve_entry(&e.relpath, e.mode, &mut sel.entries)? {
            sel.missing.push(SpecTargetMissing {
                repository: spec.repository.clone(),
                relpath: e.relpath.clone(),
                reason,
            });
        }
    }
    Ok(sel)
}

/// Resolves a spec against its repository's source tree into manifest
/// records (hashing regular files), plus the entries that did not resolve.
/// Symlinks are recorded with their targets verbatim and are only followed
/// when they lie on the path of a named entry.
pub fn resolve_spec(
    spec: &SpecFile,
    source_root: &Path,
    mount_prefix: &str,
) -> Result<(Vec<FileRecord>, Vec<SpecTargetMissing>), BuildError> {
    let sel = select(spec, source_root, mount_prefix)?;
    let mut records = Vec::with_capacity(sel.entries.len());
    for (lp, s) in &sel.entries {
        records.push(match s {
            Source::Directory => FileRecord::directory(lp),
            Source::Symlink(t) => FileRecord::symlink(lp, t),
            Source::Regular { path, size, exec } => FileRecord::regular(lp, store::hash_file(path)?, *size, *exec),
        });
    }
    Ok((records, sel.missing))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BuildInfo {
    pub mount_prefix: String,
    pub revision: u64,
    pub root_hash: ContentHash,
}

impl BuildInfo {
    pub fn load(out_root: &Path) -> Result<BuildInfo, BuildError> {
        let p = out_root.join(BUILD_INFO_FILE);
        let bytes = fs::read(&p).map_err(|_| BuildError::NotABuild(out_root.to_path_buf()))?;
        serde_json::from_slice(&bytes).map_err(|_| BuildError::NotABuild(out_root.to_path_buf()))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub manifest: SubsetManifest,
    pub stats: DedupStats,
    pub missing: Vec<SpecTargetMissing>,
    /// Tree files that are hard links into the store.
    pub linked: usize,
    /// Tree files that had to be copied instead.
    pub copied: usize,
}

pub fn load_manifest(out_root: &Path) -> Result<Option<SubsetManifest>, BuildError> {
    let p = out_root.join(MANIFEST_FILE);
    match fs::read(&p) {
        Ok(b) => Ok(Some(SubsetManifest::parse(&b)?)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_failure(&p)(e)),
    }
}

pub fn tree_dir(out_root: &Path) -> PathBuf {
    out_root.join("tree")
}

/// Builds the subset for `specs` into `out_root`. Specs naming the same
/// repository are merged. The export tree is recreated from scratch; the
/// store is reused across revisions and pruned to the blobs the new
/// manifest references.
pub fn build_subset(
    specs: &[SpecFile],
    source_roots: &BTreeMap<String, PathBuf>,
    out_root: &Path,
    prev: Option<&SubsetManifest>,
    options: &BuildOptions,
) -> Result<BuildOutput, BuildError> {
    let mount_prefix = path::normalize(&options.mount_prefix).map_err(|e| BuildError::MountPrefix(e.to_string()))?;

    let mut by_repo: BTreeMap<&str, SpecFile> = BTreeMap::new();
    for s in specs {
        by_repo
            .entry(s.repository.as_str())
            .and_modify(|acc| *acc = acc.union(s))
            .or_insert_with(|| s.clone());
    }
    let mut entries: BTreeMap<String, Source> = BTreeMap::new();
    let mut missing = Vec::new();
    for (repo, spec) in &by_repo {
        let root = source_roots
            .get(*repo)
            .ok_or_else(|| BuildError::MissingSourceRoot(repo.to_string()))?;
        let sel = select(spec, root, &mount_prefix)?;
        entries.extend(sel.entries);
        missing.extend(sel.missing);
    }
    if options.missing_policy == MissingPolicy::Strict && !missing.is_empty() {
        return Err(BuildError::SpecTargetsMissing(missing));
    }

    fs::create_dir_all(out_root).map_err(io_failure(out_root))?;
    let store = ContentStore::open(out_root.join("store"))?;
    let tree = tree_dir(out_root);
    fsutil::remove_any(&tree).map_err(io_failure(&tree))?;
    let mount_dir = fsutil::under(&tree, &mount_prefix);
    fs::create_dir_all(&mount_dir).map_err(io_failure(&mount_dir))?;

    let mut records = Vec::with_capacity(entries.len());
    // hash -> exec flag of the first record using it; the blob carries
    // that mode and records with the other mode get a copy.
    let mut blob_exec: BTreeMap<ContentHash, bool> = BTreeMap::new();
    let mut regulars: Vec<(PathBuf, ContentHash, bool)> = Vec::new();
    for (lp, s) in &entries {
        let dst = fsutil::under(&mount_dir, lp);
        match s {
            Source::Directory => {
                fs::create_dir_all(&dst).map_err(io_failure(&dst))?;
                records.push(FileRecord::directory(lp));
            }
            Source::Symlink(target) => {
                std::os::unix::fs::symlink(target, &dst).map_err(io_failure(&dst))?;
                records.push(FileRecord::symlink(lp, target));
            }
            Source::Regular { path, size, exec } => {
                let (hash, _) = store.ingest(path)?;
                blob_exec.entry(hash).or_insert(*exec);
                regulars.push((dst, hash, *exec));
                records.push(FileRecord::regular(lp, hash, *size, *exec));
            }
        }
    }
    for (hash, exec) in &blob_exec {
        let blob = store.blob_path(hash);
        fsutil::set_mode(&blob, if *exec { 0o755 } else { 0o644 }).map_err(io_failure(&blob))?;
    }
    let (mut linked, mut copied) = (0, 0);
    for (dst, hash, exec) in &regulars {
        let blob = store.blob_path(hash);
        if blob_exec[hash] == *exec && fs::hard_link(&blob, dst).is_ok() {
            linked += 1;
        } else {
            fs::copy(&blob, dst).map_err(io_failure(dst))?;
            fsutil::set_mode(dst, if *exec { 0o755 } else { 0o644 }).map_err(io_failure(dst))?;
            copied += 1;
        }
    }

    let revision = prev.map_or(1, |p| p.revision() + 1);
    let manifest = SubsetManifest::new(revision, records)?;
    let manifest_path = out_root.join(MANIFEST_FILE);
    fsutil::atomic_write(&manifest_path, manifest.to_text().as_bytes()).map_err(io_failure(&manifest_path))?;

    let blobs = manifest.blobs();
    store.retain(&blobs.iter().map(|(h, _)| *h).collect::<BTreeSet<_>>())?;
    store.write_index(&blobs)?;

    let info = BuildInfo {
        mount_prefix: mount_prefix.clone(),
        revision,
        root_hash: manifest.root_hash(),
    };
    let info_path = out_root.join(BUILD_INFO_FILE);
    let info_json = serde_json::to_vec_pretty(&info).expect("build info serializes");
    fsutil::atomic_write(&info_path, &info_json).map_err(io_failure(&info_path))?;

    let stats = compute_stats(out_root)?;
    Ok(BuildOutput {
        manifest,
        stats,
        missing,
        linked,
        copied,
    })
}

/// Space accounting of a completed build, read back from disk.
pub fn compute_stats(out_root: &Path) -> Result<DedupStats, BuildError> {
    let manifest = load_manifest(out_root)?.ok_or_else(|| BuildError::NotABuild(out_root.to_path_buf()))?;
    let store = ContentStore::open(out_root.join("store"))?;
    let index = store.root().join(store::INDEX_FILE);
    let index_bytes = match fs::metadata(&index) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
        Err(e) => return Err(io_failure(&index)(e)),
    };
    // Header excluded so an empty build reports zero metadata.
    let mut stats = DedupStats::from_manifest(&manifest, manifest.body().len() as u64 + index_bytes);
    stats.physical_bytes = 0;
    for (hash, _) in manifest.blobs() {
        let blob = store.blob_path(&hash);
        stats.physical_bytes += fs::metadata(&blob).map_err(io_failure(&blob))?.len();
    }
    Ok(stats)
}

/// Hard-link count of a tree file's inode.
pub fn link_count(p: &Path) -> io::Result<u64> {
    Ok(fs::metadata(p)?.nlink())
}
