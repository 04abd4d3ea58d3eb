//! Runs validation applications against a built subset and computes the
//! gate: the suite passes only when every case exits with its expected
//! status before its timeout.
//!
//! Two ways of pointing applications at the subset:
//! `env` exports `SUBCVMFS_ROOT=<tree>` so commands read
//! `$SUBCVMFS_ROOT<mount_prefix>/...`; `bind` runs each case in a private
//! mount namespace with `<tree><mount_prefix>` bind-mounted over the mount
//! prefix and `SUBCVMFS_ROOT` set to the empty string.

use std::collections::BTreeSet;
use std::ffi::CString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use subcvmfs_core::path;

use crate::fsutil;
use crate::template;

pub const ROOT_VAR: &str = "SUBCVMFS_ROOT";
pub const MOUNT_VAR: &str = "SUBCVMFS_MOUNT";

#[derive(Debug, thiserror::Error)]
pub enum TestError {
    #[error("test adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("invalid test case: {0}")]
    InvalidCase(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> TestError + '_ {
    move |source| TestError::IoFailure { path: path.to_path_buf(), source }
}

fn default_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub env: Vec<(String, String)>,
    #[serde(default)]
    pub expected_exit: i32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl TestCase {
    pub fn new(name: &str, command: Vec<String>) -> Self {
        TestCase {
            name: name.into(),
            command,
            workdir: None,
            env: Vec::new(),
            expected_exit: 0,
            timeout_secs: default_timeout(),
        }
    }

    fn check(&self) -> Result<(), TestError> {
        if self.name.is_empty() || self.name.contains('/') || self.name == "." || self.name == ".." {
            return Err(TestError::InvalidCase(format!("bad case name `{}`", self.name)));
        }
        if self.command.is_empty() {
            return Err(TestError::InvalidCase(format!("{}: empty command", self.name)));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(TestError::InvalidCase(format!("{}: timeout must be positive", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    #[default]
    Env,
    Bind,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Receives `<case>/stdout` and `<case>/stderr`.
    pub capture_dir: Option<PathBuf>,
    /// Number of cases run at once; 0 and 1 both mean sequential.
    pub parallel: usize,
    /// Wraps every command, e.g. a container runtime invocation. Knows
    /// `{command}` and `{tree}`.
    pub command_prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    /// Exit code, or 128 + signal number.
    pub exit_status: i32,
    pub expected_exit: i32,
    pub duration_secs: f64,
    pub timed_out: bool,
    pub pass: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub cases: Vec<CaseResult>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

impl TestReport {
    pub fn failed(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.pass)
    }

    /// Fixed-width table, one row per case.
    pub fn to_table(&self) -> String {
        let w = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<w$}  {:>6}  {:>8}  {:>10}  result\n", "case", "exit", "expected", "seconds");
        for c in &self.cases {
            let result = match (c.pass, c.timed_out) {
                (true, _) => "pass",
                (false, true) => "timeout",
                (false, false) => "fail",
            };
            let _ = writeln!(
                out,
                "{:<w$}  {:>6}  {:>8}  {:>10.3}  {result}",
                c.name, c.exit_status, c.expected_exit, c.duration_secs
            );
        }
        for warning in &self.warnings {
            let _ = writeln!(out, "warning: {warning}");
        }
        let _ = writeln!(out, "gate: {}", if self.pass { "open" } else { "closed" });
        out
    }
}

/// Everything `pre_exec` needs, allocated before forking.
struct BindMount {
    source: CString,
    target: CString,
}

impl BindMount {
    fn new(subset_tree: &Path, mount_prefix: &str) -> Result<Self, TestError> {
        let source = fsutil::under(subset_tree, mount_prefix);
        if !source.is_dir() {
            return Err(TestError::AdapterUnavailable(format!("{} is not a directory", source.display())));
        }
        if !Path::new(mount_prefix).is_dir() {
            return Err(TestError::AdapterUnavailable(format!("mount point {mount_prefix} does not exist")));
        }
        let c = |p: &Path| CString::new(p.as_os_str().as_bytes()).map_err(|e| TestError::AdapterUnavailable(e.to_string()));
        Ok(BindMount {
            source: c(&source)?,
            target: c(Path::new(mount_prefix))?,
        })
    }

    fn install(&self, cmd: &mut Command) {
        let source = self.source.clone();
        let target = self.target.clone();
        // SAFETY: only async-signal-safe syscalls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if libc::unshare(libc::CLONE_NEWNS) != 0 {
                    return Err(io::Error::last_os_error());
                }
                let none = c"none".as_ptr();
                let root = c"/".as_ptr();
                if libc::mount(none, root, std::ptr::null(), libc::MS_REC | libc::MS_PRIVATE, std::ptr::null()) != 0 {
                    return Err(io::Error::last_os_error());
                }
                if libc::mount(source.as_ptr(), target.as_ptr(), std::ptr::null(), libc::MS_BIND | libc::MS_REC, std::ptr::null()) != 0 {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
}

struct Runner<'a> {
    tree: &'a Path,
    mount_prefix: &'a str,
    bind: Option<BindMount>,
    options: &'a SuiteOptions,
}

impl Runner<'_> {
    fn command(&self, case: &TestCase) -> Command {
        let mut cmd = match &self.options.command_prefix {
            Some(tmpl) => template::shell(&template::expand(
                tmpl,
                &[
                    ("command", template::quote_argv(&case.command)),
                    ("tree", template::shell_quote(&self.tree.to_string_lossy())),
                ],
            )),
            None => {
                let mut c = Command::new(&case.command[0]);
                c.args(&case.command[1..]);
                c
            }
        };
        let root = if self.bind.is_some() { String::new() } else { self.tree.to_string_lossy().into_owned() };
        cmd.env(ROOT_VAR, root).env(MOUNT_VAR, self.mount_prefix);
        for (k, v) in &case.env {
            cmd.env(k, v);
        }
        if let Some(w) = &case.workdir {
            cmd.current_dir(w);
        }
        if let Some(b) = &self.bind {
            b.install(&mut cmd);
        }
        cmd.stdin(Stdio::null()).process_group(0);
        cmd
    }

    fn outputs(&self, case: &TestCase) -> Result<(Stdio, Stdio, Option<PathBuf>), TestError> {
        match &self.options.capture_dir {
            None => Ok((Stdio::null(), Stdio::null(), None)),
            Some(root) => {
                let dir = root.join(&case.name);
                fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
                let open = |n: &str| {
                    let p = dir.join(n);
                    fs::File::create(&p).map(Stdio::from).map_err(io_failure(&p))
                };
                Ok((open("stdout")?, open("stderr")?, Some(dir)))
            }
        }
    }

    fn run_case(&self, case: &TestCase) -> Result<CaseResult, TestError> {
        let (stdout, stderr, output) = self.outputs(case)?;
        let mut cmd = self.command(case);
        cmd.stdout(stdout).stderr(stderr);
        let start = Instant::now();
        let deadline = start + Duration::from_secs_f64(case.timeout_secs);
        let (exit_status, timed_out) = match cmd.spawn() {
            Err(e) if e.kind() == io::ErrorKind::NotFound => (127, false),
            Err(e) if e.raw_os_error() == Some(libc::EACCES) => (126, false),
            Err(e) if self.bind.is_some() => return Err(TestError::AdapterUnavailable(e.to_string())),
            Err(e) => return Err(io_failure(Path::new(&case.command[0]))(e)),
            Ok(mut child) => loop {
                if let Some(status) = child.try_wait().map_err(io_failure(Path::new(&case.command[0])))? {
                    break (crate::tracer::status_code(status), false);
                }
                if Instant::now() >= deadline {
                    // SAFETY: plain syscall on the child's own process group.
                    unsafe {
                        libc::kill(-(child.id() as i32), libc::SIGKILL);
                    }
                    let status = child.wait().map_err(io_failure(Path::new(&case.command[0])))?;
                    break (crate::tracer::status_code(status), true);
                }
                std::thread::sleep(Duration::from_millis(5));
            },
        };
        Ok(CaseResult {
            name: case.name.clone(),
            exit_status,
            expected_exit: case.expected_exit,
            duration_secs: start.elapsed().as_secs_f64(),
            timed_out,
            pass: !timed_out && exit_status == case.expected_exit,
            output,
        })
    }
}

/// Runs every case (a failure does not stop the others) and returns the
/// report ordered by case name.
pub fn run_suite(
    subset_tree: &Path,
    mount_prefix: &str,
    cases: &[TestCase],
    adapter: Adapter,
    options: &SuiteOptions,
) -> Result<TestReport, TestError> {
    let mount_prefix = path::normalize(mount_prefix).map_err(|e| TestError::InvalidCase(format!("mount prefix: {e}")))?;
    let mut names = BTreeSet::new();
    for c in cases {
        c.check()?;
        if !names.insert(c.name.as_str()) {
            return Err(TestError::InvalidCase(format!("duplicate case name `{}`", c.name)));
        }
    }
    let mut warnings = Vec::new();
    if cases.is_empty() {
        warnings.push("empty test suite; the gate passes vacuously".to_string());
    }
    let bind = match adapter {
        Adapter::Env => None,
        Adapter::Bind => {
            let b = BindMount::new(subset_tree, &mount_prefix)?;
            probe(&b)?;
            Some(b)
        }
    };
    let runner = Runner {
        tree: subset_tree,
        mount_prefix: &mount_prefix,
        bind,
        options,
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<CaseResult, TestError>>> = Mutex::new(Vec::with_capacity(cases.len()));
    let width = options.parallel.clamp(1, cases.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..width {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = cases.get(i) else { break };
                let r = runner.run_case(case);
                results.lock().expect("no worker panics while holding the lock").push(r);
            });
        }
    });
    let mut out = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.name.cmp(&b.name));
    let pass = out.iter().all(|c| c.pass);
    Ok(TestReport { cases: out, warnings, pass })
}

fn probe(b: &BindMount) -> Result<(), TestError> {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg("exit 0").stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
    b.install(&mut cmd);
    match cmd.status() {
        Ok(s) if s.success() => Ok(()),
        Ok(s) => Err(TestError::AdapterUnavailable(format!("probe exited with {s}"))),
        Err(e) => Err(TestError::AdapterUnavailable(format!("bind mount: {e}"))),
    }
}
