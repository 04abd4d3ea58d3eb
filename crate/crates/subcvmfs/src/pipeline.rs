//! Input discovery and the trace, build, test, deploy orchestrator.
//!
//! Input directory layout:
//!
//! ```text
//! apps/<name>/command.sh     one traced and tested application per directory
//! namelists/*.txt            hand-written dependency lists
//! specs/<repo>.spec          optional spec files, merged with the derived ones
//! container-image.sif        optional base image
//! pipeline-config.json       optional configuration
//! ```
//!
//! Outputs under `out_root`, besides the build itself: `trace/<app>/`
//! (namelist, captured output), `specs/<repo>.spec`, `tests/<case>/`,
//! `pipeline.log` and `report.json`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use subcvmfs_core::{
    merge, parse_namelist, parse_spec, path, plan_sync, split_by_repository, validate, write_spec, ContentHash, DedupStats,
    Namelist, SpecFile, SubsetManifest,
};

use crate::builder::{self, BuildOptions, MissingPolicy};
use crate::config::{ConfigError, PipelineConfig, Stage, CONFIG_FILE};
use crate::deployer::{self, DeployKind, DeployReport};
use crate::fsutil;
use crate::tester::{self, SuiteOptions, TestCase, TestReport};
use crate::tracer::{self, TraceSpec};

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "pipeline.log";
pub const LOCK_FILE: &str = ".pipeline.lock";
pub const CONTAINER_IMAGE: &str = "container-image.sif";
const REMOTE_STATE: &str = "remote-deployed.tsv";
const REMOTE_STATE_DEST: &str = "remote-deployed.dest";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0} contains neither apps nor namelists")]
    NoInputs(PathBuf),
    #[error("app `{0}` has no command.sh")]
    MalformedApp(String),
    #[error("{path}: {reason}")]
    BadInput { path: PathBuf, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("another pipeline run holds {0}")]
    Locked(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct App {
    pub name: String,
    pub dir: PathBuf,
    pub command: PathBuf,
}

impl App {
    /// `command.sh` itself when executable, otherwise run through `sh`.
    pub fn argv(&self) -> Vec<String> {
        let cmd = self.command.to_string_lossy().into_owned();
        let exec = fs::metadata(&self.command).map(|m| fsutil::is_executable(&m)).unwrap_or(false);
        if exec {
            vec![cmd]
        } else {
            vec!["/bin/sh".into(), cmd]
        }
    }

    pub fn trace_spec(&self, config: &PipelineConfig, capture_dir: &Path) -> Result<TraceSpec, tracer::TracerError> {
        let mut spec = TraceSpec::new(self.argv(), &self.dir, &[&config.mount_prefix])?
            .with_backend(config.tracer.clone())
            .with_env(tester::ROOT_VAR, "")
            .with_env(tester::MOUNT_VAR, &config.mount_prefix);
        spec.capture_dir = Some(capture_dir.to_path_buf());
        spec.log_file = Some(capture_dir.join("trace.log"));
        Ok(spec)
    }

    pub fn test_case(&self, timeout_secs: f64) -> TestCase {
        TestCase {
            workdir: Some(self.dir.clone()),
            timeout_secs,
            ..TestCase::new(&self.name, self.argv())
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputSet {
    pub apps: Vec<App>,
    pub namelists: Vec<Namelist>,
    pub specs: Vec<SpecFile>,
    pub container_image: Option<PathBuf>,
    /// The input directory's own `pipeline-config.json`, if present.
    pub config: Option<PipelineConfig>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_failure(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()
        .map_err(io_failure(dir))?;
    v.sort();
    Ok(v)
}

fn name_of(p: &Path) -> Result<String, PipelineError> {
    p.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| PipelineError::BadInput { path: p.to_path_buf(), reason: "name is not UTF-8".into() })
}

/// Finds the inputs below `input_dir`; absent optional parts are simply
/// left empty.
pub fn discover_inputs(input_dir: &Path) -> Result<InputSet, PipelineError> {
    if !input_dir.is_dir() {
        return Err(io_failure(input_dir)(io::Error::new(io::ErrorKind::NotFound, "input directory not found")));
    }
    let mut apps = Vec::new();
    let apps_dir = input_dir.join("apps");
    if apps_dir.is_dir() {
        for d in sorted_entries(&apps_dir)? {
            if !d.is_dir() {
                continue;
            }
            let name = name_of(&d)?;
            let command = d.join("command.sh");
            if !command.is_file() {
                return Err(PipelineError::MalformedApp(name));
            }
            apps.push(App { name, dir: d, command });
        }
    }
    let mut namelists = Vec::new();
    let nl_dir = input_dir.join("namelists");
    if nl_dir.is_dir() {
        for f in sorted_entries(&nl_dir)? {
            if f.extension().and_then(|e| e.to_str()) != Some("txt") || !f.is_file() {
                continue;
            }
            let bytes = fs::read(&f).map_err(io_failure(&f))?;
            let nl = parse_namelist(&bytes, &name_of(&f)?)
                .map_err(|e| PipelineError::BadInput { path: f.clone(), reason: e.to_string() })?;
            namelists.push(nl);
        }
    }
    let mut specs = Vec::new();
    let spec_dir = input_dir.join("specs");
    if spec_dir.is_dir() {
        for f in sorted_entries(&spec_dir)? {
            let Some(repo) = f.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".spec")) else {
                continue;
            };
            let bytes = fs::read(&f).map_err(io_failure(&f))?;
            let spec = parse_spec(&bytes, repo).map_err(|e| PipelineError::BadInput { path: f.clone(), reason: e.to_string() })?;
            specs.push(spec);
        }
    }
    if apps.is_empty() && namelists.is_empty() && specs.is_empty() {
        return Err(PipelineError::NoInputs(input_dir.to_path_buf()));
    }
    let image = input_dir.join(CONTAINER_IMAGE);
    let cfg = input_dir.join(CONFIG_FILE);
    Ok(InputSet {
        apps,
        namelists,
        specs,
        container_image: image.is_file().then_some(image),
        config: if cfg.is_file() { Some(PipelineConfig::load(&cfg)?) } else { None },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Passed,
    Failed,
    Blocked,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: Stage,
    pub status: StageStatus,
    pub duration_secs: f64,
    #[serde(default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// `passed`, `blocked-at-test` or `failed-at-<stage>`.
    pub status: String,
    pub stages: Vec<StageReport>,
    pub stats: Option<DedupStats>,
    pub root_hash: Option<ContentHash>,
    pub revision: Option<u64>,
    pub warnings: Vec<String>,
    pub test: Option<TestReport>,
    pub deploy: Option<DeployReport>,
}

impl PipelineReport {
    pub fn passed(&self) -> bool {
        self.status == "passed"
    }

    pub fn blocked(&self) -> bool {
        self.status == "blocked-at-test"
    }

    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.name == s)
    }
}

struct Log {
    file: fs::File,
}

impl Log {
    fn open(out_root: &Path) -> Result<Log, PipelineError> {
        let p = out_root.join(LOG_FILE);
        let file = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_failure(&p))?;
        Ok(Log { file })
    }

    fn line(&mut self, msg: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        log::info!("{msg}");
        let _ = writeln!(self.file, "{secs} {msg}");
    }

    fn block(&mut self, text: &str) {
        let _ = self.file.write_all(text.as_bytes());
    }
}

/// Outcome of one stage body: `Err` is a stage failure, `Ok(false)` a
/// closed test gate.
type StageResult = Result<bool, String>;

struct Run<'a> {
    config: &'a PipelineConfig,
    inputs: &'a InputSet,
    out: &'a Path,
    log: Log,
    report: PipelineReport,
}

impl Run<'_> {
    fn warn(&mut self, msg: String) {
        self.log.line(&format!("warning: {msg}"));
        self.report.warnings.push(msg);
    }

    fn trace(&mut self) -> StageResult {
        let trace_root = self.out.join("trace");
        fsutil::remove_any(&trace_root).map_err(|e| format!("{}: {e}", trace_root.display()))?;
        for app in &self.inputs.apps {
            let dir = trace_root.join(&app.name);
            let spec = app.trace_spec(self.config, &dir).map_err(|e| format!("app {}: {e}", app.name))?;
            let run = tracer::run_traced(&spec).map_err(|e| format!("app {}: {e}", app.name))?;
            for w in &run.warnings {
                self.warn(format!("app {}: trace log line {}: {:?}", app.name, w.line, w.kind));
            }
            let deps = run.dependencies(&spec.repo_prefixes);
            let nl = Namelist::from_paths(deps.paths(), &format!("trace:{}", app.name)).map_err(|e| e.to_string())?;
            let p = dir.join("namelist.txt");
            fsutil::atomic_write(&p, nl.to_text().as_bytes()).map_err(|e| format!("{}: {e}", p.display()))?;
            self.log.line(&format!("trace: app {} touched {} repository path(s)", app.name, nl.len()));
        }
        Ok(true)
    }

    /// Namelists produced by the trace stage, read back from disk so a
    /// standalone build sees the same input as a full run.
    fn traced_namelists(&self) -> Result<Vec<Namelist>, String> {
        let mut out = Vec::new();
        for app in &self.inputs.apps {
            let p = self.out.join("trace").join(&app.name).join("namelist.txt");
            match fs::read(&p) {
                Ok(b) => out.push(parse_namelist(&b, &format!("trace:{}", app.name)).map_err(|e| format!("{}: {e}", p.display()))?),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(format!("{}: {e}", p.display())),
            }
        }
        Ok(out)
    }

    fn derive_specs(&mut self) -> Result<Vec<SpecFile>, String> {
        let mount = self.config.mount_prefix.clone();
        let strict = self.config.missing_path_policy == MissingPolicy::Strict;
        let mut all = self.traced_namelists()?;
        all.extend(self.inputs.namelists.iter().cloned());
        let merged = merge(&all);

        // Paths that cannot become spec entries.
        let mut unusable = Vec::new();
        let usable: Vec<&String> = merged
            .entries()
            .iter()
            .filter(|p| {
                let ok = path::strip_component_prefix(p, &mount).is_some_and(|rest| path::components(rest).count() >= 2);
                if !ok {
                    unusable.push((*p).clone());
                }
                ok
            })
            .collect();
        let usable = Namelist::from_paths(usable, "merged").map_err(|e| e.to_string())?;
        if strict && !unusable.is_empty() {
            return Err(format!("{} namelist path(s) do not name a file inside a repository, first: {}", unusable.len(), unusable[0]));
        }
        for p in unusable {
            self.warn(format!("dropping {p}: not a path inside a repository under {mount}"));
        }

        let repos: BTreeSet<String> = usable
            .entries()
            .iter()
            .filter_map(|p| path::strip_component_prefix(p, &mount).and_then(|r| path::components(r).next()).map(str::to_string))
            .collect();
        let roots = self.config.source_roots(repos.iter().map(String::as_str));
        let (valid, missing) = validate(&usable, |p| {
            let rest = path::strip_component_prefix(p, &mount).unwrap_or_default();
            let repo = path::components(rest).next().unwrap_or_default();
            let inner = &rest[1 + repo.len()..];
            fs::symlink_metadata(fsutil::under(&roots[repo], inner)).is_ok()
        });
        if strict && !missing.is_empty() {
            return Err(format!("{} namelist path(s) missing from the source, first: {}", missing.len(), missing.entries()[0]));
        }
        for p in missing.entries() {
            self.warn(format!("dropping {p}: not present in the source repository"));
        }
        let mut specs = split_by_repository(&valid, &mount).map_err(|e| e.to_string())?;
        specs.extend(self.inputs.specs.iter().cloned());
        let mut by_repo: std::collections::BTreeMap<String, SpecFile> = std::collections::BTreeMap::new();
        for s in specs {
            by_repo
                .entry(s.repository.clone())
                .and_modify(|acc| *acc = acc.union(&s))
                .or_insert(s);
        }
        Ok(by_repo.into_values().collect())
    }

    fn build(&mut self) -> StageResult {
        let specs = self.derive_specs()?;
        let spec_dir = self.out.join("specs");
        fsutil::remove_any(&spec_dir).map_err(|e| format!("{}: {e}", spec_dir.display()))?;
        fs::create_dir_all(&spec_dir).map_err(|e| format!("{}: {e}", spec_dir.display()))?;
        for s in &specs {
            let p = spec_dir.join(s.file_name());
            fs::write(&p, write_spec(s)).map_err(|e| format!("{}: {e}", p.display()))?;
        }
        if specs.is_empty() {
            self.warn("no spec entries; building an empty subset".into());
        }
        let roots = self.config.source_roots(specs.iter().map(|s| s.repository.as_str()));
        let prev = builder::load_manifest(self.out).map_err(|e| e.to_string())?;
        let options = BuildOptions {
            mount_prefix: self.config.mount_prefix.clone(),
            missing_policy: self.config.missing_path_policy,
        };
        let out = builder::build_subset(&specs, &roots, self.out, prev.as_ref(), &options).map_err(|e| e.to_string())?;
        for m in &out.missing {
            self.warn(format!("spec target missing: {m}"));
        }
        self.log.line(&format!(
            "build: revision {} root {} with {} record(s), {} file(s), {} blob(s)",
            out.manifest.revision(),
            out.manifest.root_hash(),
            out.manifest.records().len(),
            out.stats.file_count,
            out.stats.unique_blob_count
        ));
        Ok(true)
    }

    fn require_build(&self) -> Result<SubsetManifest, String> {
        builder::load_manifest(self.out)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("{} holds no build output", self.out.display()))
    }

    fn test(&mut self) -> StageResult {
        self.require_build()?;
        let info = builder::BuildInfo::load(self.out).map_err(|e| e.to_string())?;
        let t = &self.config.test;
        let cases: Vec<TestCase> = match &t.cases {
            Some(c) => c.clone(),
            None => self.inputs.apps.iter().map(|a| a.test_case(t.timeout_secs)).collect(),
        };
        let capture = self.out.join("tests");
        fsutil::remove_any(&capture).map_err(|e| format!("{}: {e}", capture.display()))?;
        let options = SuiteOptions {
            capture_dir: Some(capture),
            parallel: t.parallel,
            command_prefix: t.command_prefix.clone(),
        };
        let report = tester::run_suite(&builder::tree_dir(self.out), &info.mount_prefix, &cases, t.adapter, &options)
            .map_err(|e| e.to_string())?;
        self.log.block(&report.to_table());
        for w in &report.warnings {
            self.warn(w.clone());
        }
        let pass = report.pass;
        self.report.test = Some(report);
        Ok(pass)
    }

    fn deploy(&mut self) -> StageResult {
        let manifest = self.require_build()?;
        if let Some(target) = &self.config.deploy {
            let plan = match target.kind {
                DeployKind::LocalDir => deployer::destination_manifest(Path::new(&target.destination))
                    .map_err(|e| e.to_string())?
                    .map(|old| plan_sync(&old, &manifest)),
                DeployKind::RemoteRsync => self.remote_state(&target.destination).map(|old| plan_sync(&old, &manifest)),
            };
            let report = deployer::deploy(self.out, target, plan.as_ref()).map_err(|e| e.to_string())?;
            if target.kind == DeployKind::RemoteRsync {
                self.save_remote_state(&target.destination, &manifest)?;
            }
            self.log.line(&format!(
                "deploy: {:?} to {} wrote {} and deleted {}",
                report.mode, report.destination, report.written, report.deleted
            ));
            self.report.deploy = Some(report);
        }
        if let Some(c) = &self.config.container {
            let base = c
                .base_image_ref
                .clone()
                .or_else(|| self.inputs.container_image.as_ref().map(|p| p.to_string_lossy().into_owned()))
                .ok_or("container configured without base_image_ref or input container-image.sif")?;
            let def = deployer::write_container_definition(self.out, &base).map_err(|e| e.to_string())?;
            self.log.line(&format!("deploy: wrote {}", def.display()));
            if c.embed {
                match &c.build_command {
                    Some(cmd) => {
                        deployer::run_container_build(self.out, &def, cmd).map_err(|e| format!("container build: {e}"))?;
                    }
                    None => self.warn("embed requested without build_command; only the definition was written".into()),
                }
            }
        }
        Ok(true)
    }

    fn remote_state(&self, destination: &str) -> Option<SubsetManifest> {
        let dest = fs::read_to_string(self.out.join(REMOTE_STATE_DEST)).ok()?;
        if dest != destination {
            return None;
        }
        SubsetManifest::parse(&fs::read(self.out.join(REMOTE_STATE)).ok()?).ok()
    }

    fn save_remote_state(&self, destination: &str, m: &SubsetManifest) -> Result<(), String> {
        let w = |name: &str, bytes: &[u8]| {
            let p = self.out.join(name);
            fsutil::atomic_write(&p, bytes).map_err(|e| format!("{}: {e}", p.display()))
        };
        w(REMOTE_STATE, m.to_text().as_bytes())?;
        w(REMOTE_STATE_DEST, destination.as_bytes())
    }
}

/// Runs the configured stages in order. Stage failures end up in the report
/// (and `report.json`), not in the error; the error covers problems that
/// prevent any stage from running.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    let config = config.clone().validated()?;
    let out = config.out_root()?.to_path_buf();
    let inputs = discover_inputs(config.input_dir()?)?;
    fs::create_dir_all(&out).map_err(io_failure(&out))?;
    let lock_path = out.join(LOCK_FILE);
    let _lock = match fsutil::LockFile::acquire(&lock_path) {
        Ok(l) => l,
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(PipelineError::Locked(lock_path)),
        Err(e) => return Err(io_failure(&lock_path)(e)),
    };

    let mut run = Run {
        config: &config,
        inputs: &inputs,
        out: &out,
        log: Log::open(&out)?,
        report: PipelineReport {
            status: "passed".into(),
            stages: Vec::new(),
            stats: None,
            root_hash: None,
            revision: None,
            warnings: Vec::new(),
            test: None,
            deploy: None,
        },
    };
    let stages = config.effective_stages();
    run.log.line(&format!("run: stages {}", stages.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")));

    // Set once a stage fails or the gate closes; later stages are then
    // recorded as skipped or blocked.
    let mut halted: Option<StageStatus> = None;
    for stage in stages {
        if let Some(status) = halted {
            run.report.stages.push(StageReport { name: stage, status, duration_secs: 0.0, message: None });
            continue;
        }
        let start = Instant::now();
        let result = match stage {
            Stage::Trace => run.trace(),
            Stage::Build => run.build(),
            Stage::Test => run.test(),
            Stage::Deploy => run.deploy(),
        };
        let duration_secs = start.elapsed().as_secs_f64();
        let (status, message) = match result {
            Ok(true) => (StageStatus::Passed, None),
            Ok(false) => {
                run.report.status = format!("blocked-at-{stage}");
                halted = Some(StageStatus::Blocked);
                (StageStatus::Failed, Some("test gate closed".to_string()))
            }
            Err(msg) => {
                run.report.status = format!("failed-at-{stage}");
                halted = Some(StageStatus::Skipped);
                (StageStatus::Failed, Some(msg))
            }
        };
        run.log.line(&format!(
            "{stage}: {status:?} in {duration_secs:.3}s{}",
            message.as_deref().map(|m| format!(": {m}")).unwrap_or_default()
        ));
        run.report.stages.push(StageReport { name: stage, status, duration_secs, message });
    }

    if let Ok(Some(m)) = builder::load_manifest(&out) {
        run.report.root_hash = Some(m.root_hash());
        run.report.revision = Some(m.revision());
        run.report.stats = builder::compute_stats(&out).ok();
    }
    run.log.line(&format!("run: {}", run.report.status));
    let report = run.report;
    let p = out.join(REPORT_FILE);
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    fsutil::atomic_write(&p, &json).map_err(io_failure(&p))?;
    Ok(report)
}

/// Config for running on `input_dir`: its own `pipeline-config.json` when
/// present (or defaults), overridden by explicit directories.
pub fn config_for(input_dir: &Path, out_root: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    let input_dir = std::path::absolute(input_dir).map_err(io_failure(input_dir))?;
    let cfg = input_dir.join(CONFIG_FILE);
    let mut c = if cfg.is_file() { PipelineConfig::load(&cfg)? } else { PipelineConfig::default() };
    c.input_dir = Some(input_dir);
    if let Some(o) = out_root {
        c.out_root = Some(std::path::absolute(o).map_err(io_failure(o))?);
    }
    Ok(c)
}
