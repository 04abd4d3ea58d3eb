//! Pure core of the software-repository subset builder.
//!
//! Everything here works on in-memory values: absolute path strings, trace
//! logs, namelists, per-repository spec files, subset manifests and the sync
//! plans computed between two manifests. Filesystem access, process
//! execution and the CLI live in the `subcvmfs` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod container;
pub mod hash;
pub mod manifest;
pub mod namelist;
pub mod path;
pub mod plan;
pub mod stats;
pub mod trace;

pub use container::{emit_container_definition, ContainerError};
pub use hash::{ContentHash, ContentHasher, HashParseError};
pub use manifest::{root_hash_of, EntryKind, FileRecord, ManifestError, SubsetManifest, MANIFEST_MAGIC};
pub use namelist::{
    merge, parse_namelist, parse_spec, split_by_repository, validate, write_spec, Namelist,
    NamelistError, SpecEntry, SpecError, SpecFile, SpecMode,
};
pub use path::PathError;
pub use plan::{plan_sync, SyncPlan};
pub use stats::DedupStats;
pub use trace::{
    filter_dependencies, parse_trace_log, write_native_log, DependencySet, LogFormat, LogWarning,
    Origin, Outcome, ParsedLog, TraceError, TraceEvent, TraceOp,
};
