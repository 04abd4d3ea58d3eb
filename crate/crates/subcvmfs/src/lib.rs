//! Trace applications, build a deduplicated subset of the repositories they
//! use, validate it, and deploy it to disconnected targets.
//!
//! Layer one is the set of stage modules ([`tracer`], [`builder`],
//! [`tester`], [`deployer`]), each usable on its own; [`pipeline`] chains
//! them and backs the `subcvmfs` command line.

pub mod builder;
pub mod config;
pub mod deployer;
pub mod export;
pub mod fixture;
pub mod fsutil;
pub mod pipeline;
pub mod store;
pub mod tester;
pub mod template;
pub mod tracer;

pub use subcvmfs_core as core;
