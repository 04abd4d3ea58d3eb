//! Test-side oracles that deliberately avoid the crate's own hashing and
//! tree-walking code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use subcvmfs::core::{EntryKind, FileRecord, SubsetManifest};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Node {
    Dir,
    Link(String),
    File { sha256: String, size: u64, exec: bool },
}

/// Every entry below `root`, keyed by `/`-prefixed relative path.
pub fn scan(root: &Path) -> BTreeMap<String, Node> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            let rel = format!("/{}", p.strip_prefix(root).unwrap().to_str().unwrap());
            let m = fs::symlink_metadata(&p).unwrap();
            let node = if m.file_type().is_symlink() {
                Node::Link(fs::read_link(&p).unwrap().to_str().unwrap().to_string())
            } else if m.is_dir() {
                stack.push(p.clone());
                Node::Dir
            } else {
                let bytes = fs::read(&p).unwrap();
                Node::File {
                    sha256: sha256_hex(&bytes),
                    size: bytes.len() as u64,
                    exec: m.permissions().mode() & 0o111 != 0,
                }
            };
            out.insert(rel, node);
        }
    }
    out
}

/// Manifest records in the oracle's vocabulary.
pub fn manifest_nodes(m: &SubsetManifest) -> BTreeMap<String, Node> {
    record_nodes(m.records())
}

pub fn record_nodes(records: &[FileRecord]) -> BTreeMap<String, Node> {
    records
        .iter()
        .map(|r| {
            let n = match &r.kind {
                EntryKind::Directory => Node::Dir,
                EntryKind::Symlink { target } => Node::Link(target.clone()),
                EntryKind::Regular { hash, size, exec } => Node::File {
                    sha256: hash.to_string(),
                    size: *size,
                    exec: *exec,
                },
            };
            (r.logical_path.clone(), n)
        })
        .collect()
}

/// Digest of an entire directory tree: names, kinds, contents, exec bits
/// and symlink targets.
pub fn tree_digest(root: &Path) -> String {
    let mut h = Sha256::new();
    for (p, n) in scan(root) {
        h.update(format!("{p}\0{n:?}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write(p: &Path, body: &[u8]) {
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    fs::write(p, body).unwrap();
}

pub fn write_exec(p: &Path, body: &str) {
    write(p, body.as_bytes());
    fs::set_permissions(p, fs::Permissions::from_mode(0o755)).unwrap();
}

pub fn symlink(target: &str, at: &Path) {
    fs::create_dir_all(at.parent().unwrap()).unwrap();
    std::os::unix::fs::symlink(target, at).unwrap();
}

/// A sample input directory (apps, namelists, container image) over two small repositories.
pub struct SampleInput {
    pub base: PathBuf,
    pub mount: String,
    pub input: PathBuf,
    pub out: PathBuf,
    pub dest: PathBuf,
    /// Files (absolute, under the mount, sorted) each app reads.
    pub reads: BTreeMap<String, Vec<String>>,
}

const APP_HEAD: &str = "#!/bin/sh\nset -e\nR=\"${SUBCVMFS_ROOT}${SUBCVMFS_MOUNT}\"\n";

pub fn sample_input(base: &Path) -> SampleInput {
    let mount_dir = base.join("cvmfs");
    let mount = mount_dir.to_str().unwrap().to_string();
    let a = mount_dir.join("repoA");
    let b = mount_dir.join("repoB");
    write(&a.join("path/to/file"), b"repoA file\n");
    write_exec(&a.join("v1/bin/tool"), "#!/bin/sh\necho tool\n");
    symlink("v1", &a.join("current"));
    write(&a.join("lib/libx.so"), b"shared library bytes");
    write(&a.join("unused/big.dat"), &vec![7u8; 64 * 1024]);
    write(&b.join("path/to/another/file"), b"another\n");
    write(&b.join("path/to/yet/another/file"), b"yet another\n");
    write(&b.join("share/data.txt"), b"data\n");
    write(&b.join("share/dup.txt"), b"shared library bytes");
    write(&b.join("share/unused.txt"), b"never read\n");

    let input = base.join("inputs");
    let mut reads = BTreeMap::new();
    let apps: [(&str, &[&str], &str); 3] = [
        ("appC1", &["repoA/path/to/file", "repoA/current/bin/tool"], "cat command-input1.conf > /dev/null\n"),
        ("appC2", &["repoB/share/data.txt", "repoA/lib/libx.so"], ". ./command-input2.sh\ncat command-input1.json > /dev/null\n"),
        ("appC3", &["repoB/share/dup.txt"], "[ -e \"$R/repoA/not/there\" ] || true\n"),
    ];
    for (name, files, extra) in apps {
        let mut script = APP_HEAD.to_string();
        for f in files {
            script.push_str(&format!("cat \"$R/{f}\" > /dev/null\n"));
        }
        script.push_str(extra);
        write_exec(&input.join("apps").join(name).join("command.sh"), &script);
        let mut r: Vec<String> = files.iter().map(|f| format!("{mount}/{f}")).collect();
        r.sort();
        reads.insert(name.to_string(), r);
    }
    write(&input.join("apps/appC1/command-input1.conf"), b"k=v\n");
    write(&input.join("apps/appC2/command-input1.json"), b"{}\n");
    write(&input.join("apps/appC2/command-input2.sh"), b"true\n");
    write(
        &input.join("namelists/appA.txt"),
        format!("{mount}/repoA/path/to/file\n{mount}/repoB/path/to/another/file\n").as_bytes(),
    );
    write(
        &input.join("namelists/appB.txt"),
        format!("# curated\n{mount}/repoA/path/to/file\n{mount}/repoB/path/to/yet/another/file\n{mount}/repoB/missing\n").as_bytes(),
    );
    write(&input.join("container-image.sif"), b"not really an image");

    let out = base.join("out");
    let dest = base.join("deployed");
    let config = serde_json::json!({
        "input_dir": input,
        "out_root": out,
        "mount_prefix": mount,
        "deploy": {"kind": "local_dir", "destination": dest},
        "container": {"embed": false},
        "test": {"parallel": 2, "timeout_secs": 30.0}
    });
    write(&input.join("pipeline-config.json"), serde_json::to_string_pretty(&config).unwrap().as_bytes());
    SampleInput { base: base.into(), mount, input, out, dest, reads }
}
