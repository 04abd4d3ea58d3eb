use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subcvmfs::builder::{self, BuildOptions, MissingPolicy};
use subcvmfs::config::{PipelineConfig, Stage};
use subcvmfs::core::{parse_spec, plan_sync, write_native_log, SubsetManifest};
use subcvmfs::deployer::{self, DeployTarget};
use subcvmfs::export::{self, ExportFormat};
use subcvmfs::fixture::{self, FixtureParams};
use subcvmfs::pipeline::{self, PipelineError, PipelineReport};
use subcvmfs::tracer::{self, TraceSpec, TracerError};

const EXIT_GATE: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_USAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "subcvmfs", version, about = "Trace, build, test and deploy software repository subsets")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration's out_root).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input directory (defaults to the configuration's input_dir).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Trace the configured apps, or a single command given after `--`.
    Trace(TraceArgs),
    /// Build the subset from the configuration, or from spec files.
    Build(BuildArgs),
    /// Run the test stage against the current build.
    Test,
    /// Deploy the current build per the configuration, or to --dest.
    Deploy {
        /// Local destination directory.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run all configured stages.
    Run,
    /// Print space accounting of a build as JSON.
    Stats,
    /// Print the sync plan between two manifests as JSON.
    Plan { old: PathBuf, new: PathBuf },
    /// Generate a synthetic repository.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct TraceArgs {
    /// Write every event in native log format to this file and exit with
    /// the command's status.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Repository prefix to keep (repeatable; default /cvmfs).
    #[arg(long = "prefix")]
    prefixes: Vec<String>,
    /// Write the dependency namelist here instead of stdout.
    #[arg(long)]
    namelist: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(last = true)]
    command: Vec<String>,
}

#[derive(Args)]
struct BuildArgs {
    /// Spec file named `<repo>.spec` (repeatable).
    #[arg(long = "spec")]
    specs: Vec<PathBuf>,
    /// Source tree of a repository as REPO=PATH (repeatable).
    #[arg(long = "source")]
    sources: Vec<String>,
    #[arg(long, default_value = "/cvmfs")]
    mount: String,
    /// Fail when a spec entry is missing from its repository.
    #[arg(long)]
    strict: bool,
    /// Also export the build: `directory` or `tar`.
    #[arg(long)]
    export: Option<String>,
}

#[derive(Args)]
struct FixtureArgs {
    dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    files: usize,
    #[arg(long, default_value_t = 10)]
    dirs: usize,
    #[arg(long, default_value_t = 5)]
    duplicate_groups: usize,
    #[arg(long, default_value_t = 4096)]
    max_size: usize,
    /// Write the ground truth JSON here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

/// An error and the exit code it maps to.
struct Failure(u8, String);

impl Failure {
    fn usage(msg: impl ToString) -> Self {
        Failure(EXIT_USAGE, msg.to_string())
    }

    fn stage(msg: impl ToString) -> Self {
        Failure(EXIT_STAGE, msg.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::usage(e),
            _ => Failure::stage(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("subcvmfs: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8, Failure> {
    match &cli.command {
        Verb::Trace(a) if !a.command.is_empty() => trace_command(a),
        Verb::Trace(_) => run_stages(cli, Some(Stage::Trace)),
        Verb::Build(a) if !a.specs.is_empty() => build_direct(cli, a),
        Verb::Build(a) => {
            let code = run_stages(cli, Some(Stage::Build))?;
            if let (0, Some(f)) = (code, &a.export) {
                export_build(&pipeline_config(cli)?.out_root.expect("validated"), f)?;
            }
            Ok(code)
        }
        Verb::Test => run_stages(cli, Some(Stage::Test)),
        Verb::Deploy { dest: Some(dest) } => {
            let out = cli.out.as_deref().ok_or_else(|| Failure::usage("deploy --dest needs --out"))?;
            let target = DeployTarget::local(std::path::absolute(dest).map_err(Failure::usage)?.to_string_lossy());
            let plan = match deployer::destination_manifest(Path::new(&target.destination)).map_err(Failure::stage)? {
                Some(old) => {
                    let new = builder::load_manifest(out).map_err(Failure::stage)?.ok_or_else(|| Failure::stage("no build output"))?;
                    Some(plan_sync(&old, &new))
                }
                None => None,
            };
            let r = deployer::deploy(out, &target, plan.as_ref()).map_err(Failure::stage)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            Ok(0)
        }
        Verb::Deploy { dest: None } => run_stages(cli, Some(Stage::Deploy)),
        Verb::Run => run_stages(cli, None),
        Verb::Stats => {
            let out = match &cli.out {
                Some(o) => o.clone(),
                None => pipeline_config(cli)?.out_root.expect("validated"),
            };
            let s = builder::compute_stats(&out).map_err(Failure::stage)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            Ok(0)
        }
        Verb::Plan { old, new } => {
            let load = |p: &Path| -> Result<SubsetManifest, Failure> {
                let b = fs::read(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                SubsetManifest::parse(&b).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
            };
            let plan = plan_sync(&load(old)?, &load(new)?);
            println!("{}", serde_json::to_string_pretty(&plan).expect("plan serializes"));
            Ok(0)
        }
        Verb::Fixture(a) => {
            let params = FixtureParams {
                files: a.files,
                dirs: a.dirs,
                duplicate_groups: a.duplicate_groups,
                max_size: a.max_size,
            };
            let truth = fixture::generate_fixture_repo(&a.dir, a.seed, params).map_err(|e| match e {
                fixture::FixtureError::InvalidParams(_) => Failure::usage(e),
                _ => Failure::stage(e),
            })?;
            let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
            match &a.truth {
                Some(p) => fs::write(p, json).map_err(|e| Failure::stage(format!("{}: {e}", p.display())))?,
                None => println!("{json}"),
            }
            Ok(0)
        }
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut c = match (&cli.config, &cli.input) {
        (Some(file), _) => PipelineConfig::load(file).map_err(Failure::usage)?,
        (None, Some(input)) => pipeline::config_for(input, None)?,
        (None, None) => return Err(Failure::usage("need --config or --input")),
    };
    if let Some(i) = &cli.input {
        c.input_dir = Some(std::path::absolute(i).map_err(Failure::usage)?);
    }
    if let Some(o) = &cli.out {
        c.out_root = Some(std::path::absolute(o).map_err(Failure::usage)?);
    }
    c.validated().map_err(Failure::usage)
}

fn run_stages(cli: &Cli, only: Option<Stage>) -> Result<u8, Failure> {
    let mut config = pipeline_config(cli)?;
    if let Some(s) = only {
        config.stages = Some(vec![s]);
    }
    let report = pipeline::run_pipeline(&config)?;
    print_report(&report);
    Ok(if report.passed() {
        0
    } else if report.blocked() {
        EXIT_GATE
    } else {
        EXIT_STAGE
    })
}

fn print_report(r: &PipelineReport) {
    for s in &r.stages {
        match &s.message {
            Some(m) => println!("{:<7} {:?} ({:.3}s): {m}", s.name.as_str(), s.status, s.duration_secs),
            None => println!("{:<7} {:?} ({:.3}s)", s.name.as_str(), s.status, s.duration_secs),
        }
    }
    if let Some(h) = &r.root_hash {
        println!("root    {h}");
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    println!("status  {}", r.status);
}

fn trace_command(a: &TraceArgs) -> Result<u8, Failure> {
    let prefixes: Vec<&str> = if a.prefixes.is_empty() { vec!["/cvmfs"] } else { a.prefixes.iter().map(String::as_str).collect() };
    let workdir = match &a.workdir {
        Some(w) => w.clone(),
        None => std::env::current_dir().map_err(Failure::stage)?,
    };
    let mut spec = TraceSpec::new(a.command.clone(), workdir, &prefixes).map_err(Failure::usage)?;
    if let Some(path) = std::env::var_os("PATH") {
        spec = spec.with_env("PATH", &path.to_string_lossy());
    }
    let (status, run) = match tracer::run_traced(&spec) {
        Ok(run) => (0, Some(run)),
        Err(TracerError::ApplicationFailed { status, events }) => {
            let run = tracer::TraceRun { exit_status: status, events, warnings: Vec::new() };
            (status, Some(run))
        }
        Err(e) => return Err(Failure::stage(e)),
    };
    let run = run.expect("set on every non-error path");
    if let Some(log) = &a.log {
        fs::write(log, write_native_log(&run.events)).map_err(|e| Failure::stage(format!("{}: {e}", log.display())))?;
        // Behaves like the traced command so it can serve as an external
        // tracer.
        return Ok(u8::try_from(status.clamp(0, 255)).unwrap_or(1));
    }
    if status != 0 {
        return Err(Failure::stage(format!("application failed with exit status {status}")));
    }
    let text = run.dependencies(&spec.repo_prefixes).to_string();
    match &a.namelist {
        Some(p) => fs::write(p, text).map_err(|e| Failure::stage(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn build_direct(cli: &Cli, a: &BuildArgs) -> Result<u8, Failure> {
    let out = cli.out.as_deref().ok_or_else(|| Failure::usage("build --spec needs --out"))?;
    let mut sources = BTreeMap::new();
    for s in &a.sources {
        let (repo, p) = s.split_once('=').ok_or_else(|| Failure::usage(format!("--source {s}: expected REPO=PATH")))?;
        sources.insert(repo.to_string(), PathBuf::from(p));
    }
    let mut specs = Vec::new();
    for p in &a.specs {
        let repo = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".spec"))
            .ok_or_else(|| Failure::usage(format!("{}: spec files are named <repo>.spec", p.display())))?;
        let bytes = fs::read(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        specs.push(parse_spec(&bytes, repo).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?);
        sources.entry(repo.to_string()).or_insert_with(|| Path::new(&a.mount).join(repo));
    }
    let options = BuildOptions {
        mount_prefix: a.mount.clone(),
        missing_policy: if a.strict { MissingPolicy::Strict } else { MissingPolicy::DropWarn },
    };
    let prev = builder::load_manifest(out).map_err(Failure::stage)?;
    let built = builder::build_subset(&specs, &sources, out, prev.as_ref(), &options).map_err(Failure::stage)?;
    for m in &built.missing {
        eprintln!("warning: spec target missing: {m}");
    }
    println!("revision {} root {}", built.manifest.revision(), built.manifest.root_hash());
    println!("{}", serde_json::to_string_pretty(&built.stats).expect("stats serialize"));
    if let Some(f) = &a.export {
        export_build(out, f)?;
    }
    Ok(0)
}

fn export_build(out: &Path, format: &str) -> Result<(), Failure> {
    let f: ExportFormat = format.parse().map_err(Failure::usage)?;
    let p = export::export(out, f).map_err(Failure::stage)?;
    println!("exported {}", p.display());
    Ok(())
}
