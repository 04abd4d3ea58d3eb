mod common;

use std::fs;
use std::process::Command;

use common::{sample_input, tree_digest};
use subcvmfs::config::{PipelineConfig, Stage};
use subcvmfs::pipeline::{config_for, run_pipeline, PipelineError, StageStatus, LOCK_FILE, REPORT_FILE};

fn load(f: &common::SampleInput) -> PipelineConfig {
    config_for(&f.input, None).unwrap()
}

#[test]
fn full_run_deploys_identical_tree() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let report = run_pipeline(&load(&f)).unwrap();
    assert_eq!(report.status, "passed", "{report:#?}");
    for s in Stage::ALL {
        assert_eq!(report.stage(s).unwrap().status, StageStatus::Passed);
    }
    assert_eq!(tree_digest(&f.out.join("tree")), tree_digest(&f.dest.join("tree")));
    assert_eq!(fs::read(f.out.join("manifest.tsv")).unwrap(), fs::read(f.dest.join("manifest.tsv")).unwrap());
    assert!(f.out.join("container.def").is_file());
    assert!(!f.out.join(LOCK_FILE).exists());

    // Traced dependencies of appC1, recorded verbatim.
    let nl = fs::read_to_string(f.out.join("trace/appC1/namelist.txt")).unwrap();
    assert_eq!(nl.lines().collect::<Vec<_>>(), f.reads["appC1"].iter().map(String::as_str).collect::<Vec<_>>());

    // The missing namelist entry is dropped with a warning.
    assert!(report.warnings.iter().any(|w| w.contains("repoB/missing")));
    let spec_b = fs::read_to_string(f.out.join("specs/repoB.spec")).unwrap();
    assert!(!spec_b.contains("missing"));
    assert!(spec_b.contains("/path/to/another/file\n"));

    let unused = fs::symlink_metadata(f.out.join("tree").join(f.mount.trim_start_matches('/')).join("repoA/unused"));
    assert!(unused.is_err());

    let json: serde_json::Value = serde_json::from_slice(&fs::read(f.out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(json["status"], "passed");
    assert_eq!(json["stages"].as_array().unwrap().len(), 4);
    assert_eq!(json["root_hash"].as_str().unwrap(), report.root_hash.unwrap().to_string());
    // libx.so and dup.txt share one blob.
    let stats = report.stats.unwrap();
    assert_eq!(stats.file_count, 7);
    assert_eq!(stats.unique_blob_count, 6);
}

#[test]
fn second_run_is_incremental_noop() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let c = load(&f);
    let first = run_pipeline(&c).unwrap();
    let second = run_pipeline(&c).unwrap();
    assert!(first.passed() && second.passed());
    assert_eq!(first.root_hash, second.root_hash);
    assert_eq!(second.revision, Some(2));
    let d = second.deploy.unwrap();
    assert_eq!(d.mode, subcvmfs::deployer::DeployMode::Noop);
    assert_eq!(fs::read_to_string(f.out.join("deploy.log")).unwrap().lines().count(), 2);
}

#[test]
fn build_only_with_namelists() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    fs::remove_dir_all(f.input.join("apps")).unwrap();
    let mut c = load(&f);
    c.stages = Some(vec![Stage::Build]);
    let r = run_pipeline(&c).unwrap();
    assert!(r.passed());
    assert_eq!(r.stages.len(), 1);
    assert!(!f.out.join("trace").exists());
    assert!(!f.out.join("tests").exists());
    assert!(!f.dest.exists());
    let spec_a = fs::read_to_string(f.out.join("specs/repoA.spec")).unwrap();
    assert_eq!(spec_a, "/path/to/file\n");
}

#[test]
fn failing_case_blocks_deploy() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let mut c = load(&f);
    c.stages = Some(vec![Stage::Trace, Stage::Build]);
    assert!(run_pipeline(&c).unwrap().passed());
    // Break the subset behind appC2's back.
    let tree_lib = f.out.join("tree").join(f.mount.trim_start_matches('/')).join("repoA/lib/libx.so");
    fs::remove_file(tree_lib).unwrap();
    c.stages = Some(vec![Stage::Test, Stage::Deploy]);
    let r = run_pipeline(&c).unwrap();
    assert_eq!(r.status, "blocked-at-test");
    assert_eq!(r.stage(Stage::Deploy).unwrap().status, StageStatus::Blocked);
    let t = r.test.unwrap();
    let failed: Vec<&str> = t.failed().map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["appC2"]);
    assert!(!f.dest.exists());
    assert!(!f.out.join("container.def").exists());
}

#[test]
fn application_failure_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    common::write_exec(&f.input.join("apps/appC3/command.sh"), "#!/bin/sh\nexit 5\n");
    let r = run_pipeline(&load(&f)).unwrap();
    assert_eq!(r.status, "failed-at-trace");
    assert!(r.stage(Stage::Trace).unwrap().message.as_ref().unwrap().contains("appC3"));
    for s in [Stage::Build, Stage::Test, Stage::Deploy] {
        assert_eq!(r.stage(s).unwrap().status, StageStatus::Skipped);
    }
    assert!(!f.out.join("manifest.tsv").exists());
}

#[test]
fn strict_policy_fails_on_missing_paths() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let mut c = load(&f);
    c.missing_path_policy = subcvmfs::builder::MissingPolicy::Strict;
    let r = run_pipeline(&c).unwrap();
    assert_eq!(r.status, "failed-at-build");
}

#[test]
fn single_flight_lock() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    fs::create_dir_all(&f.out).unwrap();
    fs::write(f.out.join(LOCK_FILE), "1").unwrap();
    assert!(matches!(run_pipeline(&load(&f)), Err(PipelineError::Locked(_))));
}

#[test]
fn test_without_build_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let mut c = load(&f);
    c.stages = Some(vec![Stage::Test]);
    assert_eq!(run_pipeline(&c).unwrap().status, "failed-at-test");
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subcvmfs"))
}

#[test]
fn cli_stages_match_pipeline_run() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let cfg = f.input.join("pipeline-config.json");
    for verb in ["trace", "build", "test", "deploy"] {
        let o = cli().arg(verb).arg("--config").arg(&cfg).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let staged_root = fs::read_to_string(f.out.join("manifest.tsv")).unwrap();

    let other = dir.path().join("out2");
    let o = cli().arg("run").arg("--config").arg(&cfg).arg("--out").arg(&other).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let body = |s: &str| s.split_once('\n').unwrap().1.to_string();
    assert_eq!(body(&staged_root), body(&fs::read_to_string(other.join("manifest.tsv")).unwrap()));

    let o = cli().arg("stats").arg("--out").arg(&f.out).output().unwrap();
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["unique_blob_count"], 6);

    let o = cli().arg("plan").arg(f.out.join("manifest.tsv")).arg(other.join("manifest.tsv")).output().unwrap();
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(plan["add"].as_array().unwrap().is_empty());
    assert!(plan["delete"].as_array().unwrap().is_empty());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let cfg = f.input.join("pipeline-config.json");
    assert_eq!(cli().arg("run").output().unwrap().status.code(), Some(4));
    assert_eq!(cli().arg("nope").output().unwrap().status.code(), Some(4));
    assert_eq!(cli().arg("--help").output().unwrap().status.code(), Some(0));

    let dup = f.out.join("tree").join(f.mount.trim_start_matches('/')).join("repoB/share/dup.txt");
    assert_eq!(cli().args(["run", "--config"]).arg(&cfg).status().unwrap().code(), Some(0));
    fs::remove_file(&dup).unwrap();
    let o = cli().args(["test", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stdout));
    // A full run rebuilds the tree, so the gate opens again.
    assert_eq!(cli().args(["run", "--config"]).arg(&cfg).status().unwrap().code(), Some(0));
    assert!(dup.is_file());

    common::write_exec(&f.input.join("apps/appC1/command.sh"), "#!/bin/sh\nexit 1\n");
    let o = cli().args(["trace", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn cli_direct_build_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_input(dir.path());
    let spec = dir.path().join("repoA.spec");
    fs::write(&spec, "/path/to/file\n/lib/*\n").unwrap();
    let out = dir.path().join("direct");
    let o = cli()
        .args(["build", "--spec"])
        .arg(&spec)
        .arg("--mount")
        .arg(&f.mount)
        .arg("--out")
        .arg(&out)
        .args(["--export", "tar"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("subset.tar").is_file());
    let m = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(m.contains("/repoA/lib/libx.so\t"));
}
