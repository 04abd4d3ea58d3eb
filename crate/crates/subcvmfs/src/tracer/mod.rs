//! Running applications and capturing the repository files they touch.
//!
//! Two backends: an external tracer described by a command template with
//! `{command}` and `{logfile}` placeholders, whose log is parsed afterwards,
//! and the built-in ptrace tracer where the platform supports it.

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod ptrace;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use subcvmfs_core::{filter_dependencies, parse_trace_log, path, DependencySet, LogFormat, LogWarning, TraceEvent};

use crate::template;

#[derive(Debug, thiserror::Error)]
pub enum TracerError {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("trace backend unavailable: {0}")]
    TraceBackendUnavailable(String),
    #[error("application failed with exit status {status}")]
    ApplicationFailed { status: i32, events: Vec<TraceEvent> },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TracerError + '_ {
    move |source| TracerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
#[derive(Default)]
pub enum TraceBackend {
    ExternalLog {
        /// e.g. `strace -f -o {logfile} {command}`
        command_template: String,
        #[serde(default = "native")]
        log_format: LogFormat,
    },
    #[default]
    Wrapper,
}

fn native() -> LogFormat {
    LogFormat::Native
}


#[derive(Debug, Clone)]
pub struct TraceSpec {
    pub command: Vec<String>,
    pub workdir: PathBuf,
    pub env: Vec<(String, String)>,
    pub repo_prefixes: Vec<String>,
    pub backend: TraceBackend,
    /// Log destination for the external backend; a unique temporary file
    /// when unset.
    pub log_file: Option<PathBuf>,
    /// Directory receiving the application's `stdout` and `stderr`.
    pub capture_dir: Option<PathBuf>,
}

impl TraceSpec {
    pub fn new(command: Vec<String>, workdir: impl Into<PathBuf>, repo_prefixes: &[&str]) -> Result<Self, TracerError> {
        let spec = TraceSpec {
            command,
            workdir: workdir.into(),
            env: Vec::new(),
            repo_prefixes: repo_prefixes.iter().map(|s| s.to_string()).collect(),
            backend: TraceBackend::Wrapper,
            log_file: None,
            capture_dir: None,
        };
        spec.validated()
    }

    /// Checks the invariants and normalizes the repository prefixes.
    pub fn validated(mut self) -> Result<Self, TracerError> {
        if self.command.is_empty() {
            return Err(TracerError::InvalidSpec("command is empty".into()));
        }
        for p in &mut self.repo_prefixes {
            *p = path::normalize(p).map_err(|e| TracerError::InvalidSpec(e.to_string()))?;
        }
        Ok(self)
    }

    pub fn with_backend(mut self, backend: TraceBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_env(mut self, key: &str, value: &str) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone)]
pub struct TraceRun {
    pub exit_status: i32,
    pub events: Vec<TraceEvent>,
    pub warnings: Vec<LogWarning>,
}

impl TraceRun {
    pub fn dependencies(&self, repo_prefixes: &[String]) -> DependencySet {
        filter_dependencies(&self.events, repo_prefixes)
    }
}

fn stdio_for(dir: Option<&Path>, name: &str) -> Result<Stdio, TracerError> {
    match dir {
        None => Ok(Stdio::null()),
        Some(d) => {
            fs::create_dir_all(d).map_err(io_err(d))?;
            let p = d.join(name);
            Ok(fs::File::create(&p).map_err(io_err(&p))?.into())
        }
    }
}

fn prepare(cmd: &mut Command, spec: &TraceSpec) -> Result<(), TracerError> {
    cmd.current_dir(&spec.workdir)
        .stdin(Stdio::null())
        .stdout(stdio_for(spec.capture_dir.as_deref(), "stdout")?)
        .stderr(stdio_for(spec.capture_dir.as_deref(), "stderr")?);
    for (k, v) in &spec.env {
        cmd.env(k, v);
    }
    Ok(())
}

fn unique_log_path() -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("subcvmfs-trace-{}-{n}.log", std::process::id()))
}

/// Runs the application to completion under the configured backend. A
/// non-zero exit status is reported as [`TracerError::ApplicationFailed`].
pub fn run_traced(spec: &TraceSpec) -> Result<TraceRun, TracerError> {
    if spec.command.is_empty() {
        return Err(TracerError::InvalidSpec("command is empty".into()));
    }
    let run = match &spec.backend {
        TraceBackend::ExternalLog { command_template, log_format } => {
            run_external(spec, command_template, *log_format)?
        }
        TraceBackend::Wrapper => run_wrapper(spec)?,
    };
    if run.exit_status != 0 {
        return Err(TracerError::ApplicationFailed {
            status: run.exit_status,
            events: run.events,
        });
    }
    Ok(run)
}

fn run_external(spec: &TraceSpec, tmpl: &str, format: LogFormat) -> Result<TraceRun, TracerError> {
    if !template::has_placeholder(tmpl, "command") || !template::has_placeholder(tmpl, "logfile") {
        return Err(TracerError::TraceBackendUnavailable(
            "tracer template needs {command} and {logfile}".into(),
        ));
    }
    let (log, temporary) = match &spec.log_file {
        Some(p) => (p.clone(), false),
        None => (unique_log_path(), true),
    };
    if log.exists() {
        fs::remove_file(&log).map_err(io_err(&log))?;
    }
    let log_str = log.to_str().ok_or_else(|| TracerError::InvalidSpec("log path is not UTF-8".into()))?;
    let script = template::expand(
        tmpl,
        &[
            ("command", template::quote_argv(&spec.command)),
            ("logfile", template::shell_quote(log_str)),
        ],
    );
    let mut cmd = template::shell(&script);
    prepare(&mut cmd, spec)?;
    let status = cmd
        .status()
        .map_err(|e| TracerError::TraceBackendUnavailable(format!("cannot start tracer: {e}")))?;
    let bytes = match fs::read(&log) {
        Ok(b) => b,
        Err(_) => {
            return Err(TracerError::TraceBackendUnavailable(format!(
                "tracer exited with {status} without writing {}",
                log.display()
            )))
        }
    };
    if temporary {
        let _ = fs::remove_file(&log);
    }
    let parsed = parse_trace_log(&bytes, format);
    Ok(TraceRun {
        exit_status: status_code(status),
        events: parsed.events,
        warnings: parsed.warnings,
    })
}

pub(crate) fn status_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn run_wrapper(spec: &TraceSpec) -> Result<TraceRun, TracerError> {
    let mut cmd = Command::new(&spec.command[0]);
    cmd.args(&spec.command[1..]);
    prepare(&mut cmd, spec)?;
    let search: Option<OsString> = spec.env.iter().find(|(k, _)| k == "PATH").map(|(_, v)| v.into());
    let (exit_status, events) = match ptrace::trace_command(cmd, &spec.command[0], &spec.workdir, search) {
        Ok(r) => r,
        Err(ptrace::TraceFailure::Spawn(e)) if e.kind() == std::io::ErrorKind::NotFound => (127, Vec::new()),
        Err(ptrace::TraceFailure::Spawn(e)) if e.raw_os_error() == Some(libc::EACCES) => (126, Vec::new()),
        Err(ptrace::TraceFailure::Spawn(e) | ptrace::TraceFailure::Ptrace(e)) => {
            return Err(TracerError::TraceBackendUnavailable(format!("ptrace: {e}")))
        }
    };
    Ok(TraceRun { exit_status, events, warnings: Vec::new() })
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn run_wrapper(_spec: &TraceSpec) -> Result<TraceRun, TracerError> {
    let _: Option<OsString> = None;
    Err(TracerError::TraceBackendUnavailable(
        "the built-in tracer needs Linux on x86_64".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["/bin/sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn wrapper_records_reads() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("cvmfs/repoA");
        fs::create_dir_all(&root).unwrap();
        for f in ["a", "b", "c"] {
            fs::write(root.join(f), f).unwrap();
        }
        let prefix = dir.path().join("cvmfs").to_str().unwrap().to_string();
        let script = format!("cat {p}/repoA/a {p}/repoA/b > /dev/null; cat {p}/repoA/c > /dev/null; test -e {p}/repoA/zz || true", p = prefix);
        let spec = TraceSpec::new(sh(&script), dir.path(), &[&prefix]).unwrap();
        let run = run_traced(&spec).unwrap();
        let deps = run.dependencies(&spec.repo_prefixes);
        let expected: Vec<String> = ["a", "b", "c"].iter().map(|f| format!("{prefix}/repoA/{f}")).collect();
        assert_eq!(deps.paths(), expected.as_slice());
        assert!(run.events.iter().any(|e| e.path.ends_with("/repoA/zz") && e.outcome == subcvmfs_core::Outcome::Miss));
    }

    #[test]
    fn wrapper_true_and_false() {
        let spec = TraceSpec::new(vec!["true".into()], "/", &["/cvmfs"]).unwrap();
        let run = run_traced(&spec).unwrap();
        assert_eq!(run.exit_status, 0);
        assert!(run.dependencies(&spec.repo_prefixes).is_empty());
        let spec = TraceSpec::new(vec!["false".into()], "/", &["/cvmfs"]).unwrap();
        assert!(matches!(run_traced(&spec), Err(TracerError::ApplicationFailed { status: 1, .. })));
    }
}
