//! `pipeline-config.json`: one JSON document, snake_case keys, everything
//! optional except `input_dir` and `out_root`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use subcvmfs_core::path;

use crate::builder::MissingPolicy;
use crate::deployer::DeployTarget;
use crate::tester::{Adapter, TestCase};
use crate::tracer::TraceBackend;

pub const CONFIG_FILE: &str = "pipeline-config.json";
pub const DEFAULT_MOUNT_PREFIX: &str = "/cvmfs";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed configuration {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trace,
    Build,
    Test,
    Deploy,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Trace, Stage::Build, Stage::Test, Stage::Deploy];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Trace => "trace",
            Stage::Build => "build",
            Stage::Test => "test",
            Stage::Deploy => "deploy",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown stage `{s}`")))
    }
}

fn default_parallel() -> usize {
    1
}

fn default_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    #[serde(default)]
    pub adapter: Adapter,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    /// Timeout for the cases derived from `apps/`.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub command_prefix: Option<String>,
    /// Explicit cases; when absent every app becomes a case running its
    /// `command.sh` against the subset.
    #[serde(default)]
    pub cases: Option<Vec<TestCase>>,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            adapter: Adapter::Env,
            parallel: default_parallel(),
            timeout_secs: default_timeout(),
            command_prefix: None,
            cases: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerConfig {
    /// Defaults to the input directory's `container-image.sif`.
    #[serde(default)]
    pub base_image_ref: Option<String>,
    #[serde(default)]
    pub embed: bool,
    /// Opaque image build command run when `embed` is set; knows
    /// `{definition}` and `{out}`.
    #[serde(default)]
    pub build_command: Option<String>,
}

fn default_mount() -> String {
    DEFAULT_MOUNT_PREFIX.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub input_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_root: Option<PathBuf>,
    #[serde(default = "default_mount")]
    pub mount_prefix: String,
    /// Repository name to source tree; unlisted repositories are read from
    /// `<mount_prefix>/<repo>`.
    #[serde(default)]
    pub repo_source_roots: BTreeMap<String, PathBuf>,
    /// Defaults to trace, build, test, plus deploy when a deploy target or
    /// container is configured.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
    #[serde(default)]
    pub missing_path_policy: MissingPolicy,
    #[serde(default)]
    pub tracer: TraceBackend,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default)]
    pub deploy: Option<DeployTarget>,
    #[serde(default)]
    pub container: Option<ContainerConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input_dir: None,
            out_root: None,
            mount_prefix: default_mount(),
            repo_source_roots: BTreeMap::new(),
            stages: None,
            missing_path_policy: MissingPolicy::DropWarn,
            tracer: TraceBackend::Wrapper,
            test: TestConfig::default(),
            deploy: None,
            container: None,
        }
    }
}

fn absolutize(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8], origin: &Path) -> Result<Self, ConfigError> {
        serde_json::from_slice(bytes).map_err(|source| ConfigError::Parse { path: origin.to_path_buf(), source })
    }

    /// Loads a config file, resolving relative paths against its directory.
    pub fn load(file: &Path) -> Result<Self, ConfigError> {
        let bytes = fs::read(file).map_err(|source| ConfigError::Read { path: file.to_path_buf(), source })?;
        let mut c = PipelineConfig::from_json(&bytes, file)?;
        let base = std::path::absolute(file.parent().unwrap_or(Path::new(".")))
            .map_err(|source| ConfigError::Read { path: file.to_path_buf(), source })?;
        c.resolve_relative(&base);
        Ok(c)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.input_dir, &mut self.out_root].into_iter().flatten() {
            absolutize(p, base);
        }
        for p in self.repo_source_roots.values_mut() {
            absolutize(p, base);
        }
        if let Some(d) = &mut self.deploy {
            if d.kind == crate::deployer::DeployKind::LocalDir && Path::new(&d.destination).is_relative() {
                d.destination = base.join(&d.destination).to_string_lossy().into_owned();
            }
        }
    }

    pub fn input_dir(&self) -> Result<&Path, ConfigError> {
        self.input_dir.as_deref().ok_or_else(|| ConfigError::Invalid("input_dir is required".into()))
    }

    pub fn out_root(&self) -> Result<&Path, ConfigError> {
        self.out_root.as_deref().ok_or_else(|| ConfigError::Invalid("out_root is required".into()))
    }

    pub fn effective_stages(&self) -> Vec<Stage> {
        match &self.stages {
            Some(s) => s.clone(),
            None => {
                let mut s = vec![Stage::Trace, Stage::Build, Stage::Test];
                if self.deploy.is_some() || self.container.is_some() {
                    s.push(Stage::Deploy);
                }
                s
            }
        }
    }

    /// Checks invariants and normalizes the mount prefix.
    pub fn validated(mut self) -> Result<Self, ConfigError> {
        for (name, p) in [("input_dir", self.input_dir()?), ("out_root", self.out_root()?)] {
            if p.is_relative() {
                return Err(ConfigError::Invalid(format!("{name} must be absolute")));
            }
        }
        self.mount_prefix = path::normalize(&self.mount_prefix).map_err(|e| ConfigError::Invalid(format!("mount_prefix: {e}")))?;
        if self.mount_prefix == "/" {
            return Err(ConfigError::Invalid("mount_prefix must not be the filesystem root".into()));
        }
        let stages = self.effective_stages();
        if stages.is_empty() {
            return Err(ConfigError::Invalid("stages is empty".into()));
        }
        if stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid("stages must be unique and in trace, build, test, deploy order".into()));
        }
        if let Some(d) = &self.deploy {
            d.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if stages.contains(&Stage::Deploy) && self.deploy.is_none() && self.container.is_none() {
            return Err(ConfigError::Invalid("deploy stage requested without a deploy target".into()));
        }
        if self.test.parallel == 0 {
            return Err(ConfigError::Invalid("test.parallel must be at least 1".into()));
        }
        for (repo, root) in &self.repo_source_roots {
            if repo.is_empty() || repo.contains('/') {
                return Err(ConfigError::Invalid(format!("bad repository name `{repo}`")));
            }
            if root.is_relative() {
                return Err(ConfigError::Invalid(format!("source root of {repo} must be absolute")));
            }
        }
        Ok(self)
    }

    /// Source tree of every repository in `repos`.
    pub fn source_roots<'a>(&self, repos: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, PathBuf> {
        repos
            .into_iter()
            .map(|r| {
                let root = self
                    .repo_source_roots
                    .get(r)
                    .cloned()
                    .unwrap_or_else(|| PathBuf::from(path::join(&self.mount_prefix, r)));
                (r.to_string(), root)
            })
            .collect()
    }
}
