//! Ships a completed build to a target directory or through an external
//! transfer command, and writes container definitions.
//!
//! Destination layout is `<dst>/tree/...` mirroring the build tree plus
//! `<dst>/manifest.tsv`. The manifest is always written after the tree so a
//! destination never pairs a new manifest with stale files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use subcvmfs_core::{emit_container_definition, ContainerError, ContentHash, EntryKind, FileRecord, SubsetManifest, SyncPlan};

use crate::builder::{self, BuildError, BuildInfo, MANIFEST_FILE};
use crate::fsutil;
use crate::template;

pub const DELETED_LIST: &str = "deleted.list";
pub const DEPLOY_LOG: &str = "deploy.log";
pub const LOCK_FILE: &str = ".deploy.lock";
pub const CONTAINER_DEF: &str = "container.def";
pub const CREDENTIALS_VAR: &str = "SUBCVMFS_CREDENTIALS_REF";
const META_STAGING: &str = "deploy-meta";

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("invalid deploy target: {0}")]
    InvalidTarget(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("another deploy holds {0}")]
    Locked(PathBuf),
    #[error("sync plan does not fit the destination: {0}")]
    PlanMismatch(String),
    #[error("external command failed with exit status {0}")]
    ExternalCommandFailed(i32),
    #[error("{} path(s) failed to deploy, first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    PartialDeploy(Vec<String>),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> DeployError + '_ {
    move |source| DeployError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployKind {
    #[default]
    LocalDir,
    RemoteRsync,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployTarget {
    #[serde(default)]
    pub kind: DeployKind,
    /// A directory for `local_dir`; anything the template understands
    /// (e.g. `user@host:/path`) for `remote_rsync`.
    pub destination: String,
    /// Remote only. `{src}` is a local directory whose contents belong at
    /// `{dst}`.
    #[serde(default)]
    pub external_command_template: Option<String>,
    /// Passed to the template's environment as `SUBCVMFS_CREDENTIALS_REF`.
    #[serde(default)]
    pub credentials_ref: Option<String>,
}

impl DeployTarget {
    pub fn local(destination: impl Into<String>) -> Self {
        DeployTarget {
            kind: DeployKind::LocalDir,
            destination: destination.into(),
            external_command_template: None,
            credentials_ref: None,
        }
    }

    pub fn remote(destination: impl Into<String>, template: impl Into<String>) -> Self {
        DeployTarget {
            kind: DeployKind::RemoteRsync,
            destination: destination.into(),
            external_command_template: Some(template.into()),
            credentials_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if self.destination.trim().is_empty() {
            return Err(DeployError::InvalidTarget("destination is empty".into()));
        }
        if self.kind == DeployKind::RemoteRsync {
            let t = self
                .external_command_template
                .as_deref()
                .ok_or_else(|| DeployError::InvalidTarget("remote target needs external_command_template".into()))?;
            if !template::has_placeholder(t, "src") || !template::has_placeholder(t, "dst") {
                return Err(DeployError::InvalidTarget("template must contain {src} and {dst}".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    Full,
    Incremental,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployReport {
    pub kind: DeployKind,
    pub destination: String,
    pub mode: DeployMode,
    pub revision: u64,
    pub root_hash: ContentHash,
    pub written: usize,
    pub deleted: usize,
    /// Exit statuses of the external command invocations, in order.
    pub external_status: Vec<i32>,
}

/// Deploys the build in `out_root`. With a plan, only its additions and
/// deletions are applied; the plan must lead from the destination's current
/// manifest to the build's.
pub fn deploy(out_root: &Path, target: &DeployTarget, plan: Option<&SyncPlan>) -> Result<DeployReport, DeployError> {
    target.validate()?;
    let manifest = builder::load_manifest(out_root)?.ok_or_else(|| BuildError::NotABuild(out_root.to_path_buf()))?;
    let info = BuildInfo::load(out_root)?;
    let lock_path = out_root.join(LOCK_FILE);
    let _lock = match fsutil::LockFile::acquire(&lock_path) {
        Ok(l) => l,
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(DeployError::Locked(lock_path)),
        Err(e) => return Err(io_failure(&lock_path)(e)),
    };
    let report = match target.kind {
        DeployKind::LocalDir => deploy_local(out_root, &info.mount_prefix, &manifest, Path::new(&target.destination), plan)?,
        DeployKind::RemoteRsync => deploy_remote(out_root, &manifest, target, plan)?,
    };
    let report = DeployReport {
        kind: target.kind,
        destination: target.destination.clone(),
        revision: manifest.revision(),
        root_hash: manifest.root_hash(),
        ..report
    };
    append_log(out_root, &report)?;
    Ok(report)
}

fn blank_report(mode: DeployMode) -> DeployReport {
    DeployReport {
        kind: DeployKind::LocalDir,
        destination: String::new(),
        mode,
        revision: 0,
        root_hash: ContentHash::from_bytes([0; 32]),
        written: 0,
        deleted: 0,
        external_status: Vec::new(),
    }
}

fn append_log(out_root: &Path, r: &DeployReport) -> Result<(), DeployError> {
    let p = out_root.join(DEPLOY_LOG);
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let kind = match r.kind {
        DeployKind::LocalDir => "local_dir",
        DeployKind::RemoteRsync => "remote_rsync",
    };
    let mode = match r.mode {
        DeployMode::Full => "full",
        DeployMode::Incremental => "incremental",
        DeployMode::Noop => "noop",
    };
    let line = format!(
        "{secs}\t{kind}\t{}\t{mode}\trevision={}\troot={}\twritten={}\tdeleted={}\n",
        r.destination, r.revision, r.root_hash, r.written, r.deleted
    );
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_failure(&p))?;
    f.write_all(line.as_bytes()).map_err(io_failure(&p))
}

/// Reads `<dst>/manifest.tsv` of a local destination, if there is one.
pub fn destination_manifest(destination: &Path) -> Result<Option<SubsetManifest>, DeployError> {
    let p = destination.join(MANIFEST_FILE);
    match fs::read(&p) {
        Ok(b) => Ok(Some(SubsetManifest::parse(&b).map_err(BuildError::from)?)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_failure(&p)(e)),
    }
}

fn place(record: &FileRecord, src_root: &Path, dst_root: &Path) -> io::Result<()> {
    let src = fsutil::under(src_root, &record.logical_path);
    let dst = fsutil::under(dst_root, &record.logical_path);
    let existing = fs::symlink_metadata(&dst).ok();
    match &record.kind {
        EntryKind::Directory => {
            if existing.as_ref().is_some_and(|m| !m.is_dir()) {
                fs::remove_file(&dst)?;
            }
            fs::create_dir_all(&dst)
        }
        EntryKind::Symlink { target } => {
            if existing.is_some() {
                fsutil::remove_any(&dst)?;
            }
            std::os::unix::fs::symlink(target, &dst)
        }
        EntryKind::Regular { exec, .. } => {
            if existing.as_ref().is_some_and(|m| m.is_dir()) {
                fs::remove_dir_all(&dst)?;
            }
            fsutil::atomic_copy(&src, &dst)?;
            fsutil::set_mode(&dst, if *exec { 0o755 } else { 0o644 })
        }
    }
}

fn deploy_local(
    out_root: &Path,
    mount_prefix: &str,
    manifest: &SubsetManifest,
    dst: &Path,
    plan: Option<&SyncPlan>,
) -> Result<DeployReport, DeployError> {
    let src_root = fsutil::under(&builder::tree_dir(out_root), mount_prefix);
    let dst_tree = dst.join("tree");
    let dst_root = fsutil::under(&dst_tree, mount_prefix);
    let dst_manifest = dst.join(MANIFEST_FILE);
    let mut failed = Vec::new();
    let mut report;

    match plan {
        Some(plan) => {
            let current = destination_manifest(dst)?
                .ok_or_else(|| DeployError::PlanMismatch(format!("{} has no manifest", dst.display())))?;
            if plan.apply(current.records()).as_slice() != manifest.records() {
                return Err(DeployError::PlanMismatch(format!(
                    "plan applied to destination root {} does not give {}",
                    current.root_hash(),
                    manifest.root_hash()
                )));
            }
            if plan.is_empty() && current.root_hash() == manifest.root_hash() {
                return Ok(blank_report(DeployMode::Noop));
            }
            report = blank_report(DeployMode::Incremental);
            // Deepest paths first, so directories are empty when reached.
            for d in plan.delete.iter().rev() {
                let p = fsutil::under(&dst_root, d);
                match fsutil::remove_any(&p) {
                    Ok(()) => report.deleted += 1,
                    Err(_) => failed.push(d.clone()),
                }
            }
            for r in &plan.add {
                match place(r, &src_root, &dst_root) {
                    Ok(()) => report.written += 1,
                    Err(_) => failed.push(r.logical_path.clone()),
                }
            }
        }
        None => {
            report = blank_report(DeployMode::Full);
            fsutil::remove_any(&dst_manifest).map_err(io_failure(&dst_manifest))?;
            fsutil::remove_any(&dst_tree).map_err(io_failure(&dst_tree))?;
            fs::create_dir_all(&dst_root).map_err(io_failure(&dst_root))?;
            for r in manifest.records() {
                match place(r, &src_root, &dst_root) {
                    Ok(()) => report.written += 1,
                    Err(_) => failed.push(r.logical_path.clone()),
                }
            }
        }
    }
    if !failed.is_empty() {
        return Err(DeployError::PartialDeploy(failed));
    }
    fsutil::atomic_write(&dst_manifest, manifest.to_text().as_bytes()).map_err(io_failure(&dst_manifest))?;
    Ok(report)
}

fn run_template(target: &DeployTarget, src: &Path, dst: &str) -> Result<i32, DeployError> {
    let tmpl = target.external_command_template.as_deref().unwrap_or_default();
    let script = template::expand(
        tmpl,
        &[
            ("src", template::shell_quote(&src.to_string_lossy())),
            ("dst", template::shell_quote(dst)),
        ],
    );
    let mut cmd = template::shell(&script);
    cmd.stdin(std::process::Stdio::null());
    if let Some(c) = &target.credentials_ref {
        cmd.env(CREDENTIALS_VAR, c);
    }
    let status = cmd.status().map_err(io_failure(Path::new("/bin/sh")))?;
    let code = crate::tracer::status_code(status);
    if code != 0 {
        return Err(DeployError::ExternalCommandFailed(code));
    }
    Ok(code)
}

/// The tree goes first (`{dst}` = `<destination>/tree`), then a staging
/// directory holding the manifest and `deleted.list` (`{dst}` =
/// `<destination>`). Deletions are only listed, never executed remotely.
fn deploy_remote(
    out_root: &Path,
    manifest: &SubsetManifest,
    target: &DeployTarget,
    plan: Option<&SyncPlan>,
) -> Result<DeployReport, DeployError> {
    if plan.is_some_and(|p| p.is_empty()) {
        return Ok(blank_report(DeployMode::Noop));
    }
    let mut report = blank_report(if plan.is_some() { DeployMode::Incremental } else { DeployMode::Full });
    let dest = target.destination.trim_end_matches('/');
    let tree = builder::tree_dir(out_root);
    report.external_status.push(run_template(target, &tree, &format!("{dest}/tree"))?);

    let staging = out_root.join(META_STAGING);
    fsutil::remove_any(&staging).map_err(io_failure(&staging))?;
    fs::create_dir_all(&staging).map_err(io_failure(&staging))?;
    let deleted: String = plan.map(|p| p.delete.iter().map(|d| format!("{d}\n")).collect()).unwrap_or_default();
    let list = staging.join(DELETED_LIST);
    fs::write(&list, &deleted).map_err(io_failure(&list))?;
    let m = staging.join(MANIFEST_FILE);
    fs::write(&m, manifest.to_text()).map_err(io_failure(&m))?;
    report.external_status.push(run_template(target, &staging, dest)?);

    report.written = plan.map_or(manifest.records().len(), |p| p.add.len());
    report.deleted = plan.map_or(0, |p| p.delete.len());
    Ok(report)
}

/// Writes `<out_root>/container.def` for the build's tree.
pub fn write_container_definition(out_root: &Path, base_image_ref: &str) -> Result<PathBuf, DeployError> {
    let info = BuildInfo::load(out_root)?;
    let tree = builder::tree_dir(out_root);
    let tree = tree.to_str().ok_or_else(|| DeployError::InvalidTarget("tree path is not UTF-8".into()))?;
    let text = emit_container_definition(tree, base_image_ref, &info.mount_prefix)?;
    let p = out_root.join(CONTAINER_DEF);
    fsutil::atomic_write(&p, text.as_bytes()).map_err(io_failure(&p))?;
    Ok(p)
}

/// Runs an opaque image build command with `{definition}` and `{out}`.
pub fn run_container_build(out_root: &Path, definition: &Path, command_template: &str) -> Result<i32, DeployError> {
    let script = template::expand(
        command_template,
        &[
            ("definition", template::shell_quote(&definition.to_string_lossy())),
            ("out", template::shell_quote(&out_root.to_string_lossy())),
        ],
    );
    let status = template::shell(&script)
        .stdin(std::process::Stdio::null())
        .status()
        .map_err(io_failure(Path::new("/bin/sh")))?;
    match crate::tracer::status_code(status) {
        0 => Ok(0),
        code => Err(DeployError::ExternalCommandFailed(code)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_validation() {
        assert!(DeployTarget::local("/x").validate().is_ok());
        assert!(matches!(DeployTarget::local(" ").validate(), Err(DeployError::InvalidTarget(_))));
        assert!(DeployTarget::remote("h:/x", "rsync -a {src}/ {dst}").validate().is_ok());
        assert!(matches!(DeployTarget::remote("h:/x", "rsync {src}").validate(), Err(DeployError::InvalidTarget(_))));
        let mut t = DeployTarget::remote("h:/x", "");
        t.external_command_template = None;
        assert!(t.validate().is_err());
    }

    #[test]
    fn target_json_shape() {
        let t: DeployTarget = serde_json::from_str(r#"{"kind":"remote_rsync","destination":"u@h:/p","external_command_template":"x {src} {dst}","credentials_ref":"vault:k"}"#).unwrap();
        assert_eq!(t.kind, DeployKind::RemoteRsync);
        assert_eq!(t.credentials_ref.as_deref(), Some("vault:k"));
        let l: DeployTarget = serde_json::from_str(r#"{"destination":"/d"}"#).unwrap();
        assert_eq!(l, DeployTarget::local("/d"));
    }
}
