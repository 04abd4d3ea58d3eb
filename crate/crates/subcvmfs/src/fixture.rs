//! Deterministic synthetic repositories with a ground-truth listing, for
//! oracle checks at desk scale.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureParams {
    pub files: usize,
    pub dirs: usize,
    /// Number of groups of two or more files sharing identical content.
    pub duplicate_groups: usize,
    /// Upper bound on a file's size in bytes.
    pub max_size: usize,
}

/// Every file starts with a 16-byte tag (content id + seed) so distinct
/// content ids always give distinct bytes.
const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthFile {
    /// Repository-relative path with a leading separator.
    pub path: String,
    pub size: u64,
    pub sha256: String,
    pub exec: bool,
    /// Index of the duplicate group, if the file belongs to one.
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub params: FixtureParams,
    pub dirs: Vec<String>,
    pub files: Vec<TruthFile>,
    pub total_bytes: u64,
    pub distinct_contents: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid fixture parameters: {0}")]
    InvalidParams(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> FixtureError + '_ {
    move |source| FixtureError::IoFailure { path: path.to_path_buf(), source }
}

fn content(rng: &mut ChaCha8Rng, id: u64, seed: u64, max_size: usize) -> Vec<u8> {
    let size = rng.random_range(TAG_LEN..=max_size.max(TAG_LEN));
    let mut buf = vec![0u8; size];
    buf[..8].copy_from_slice(&id.to_le_bytes());
    buf[8..16].copy_from_slice(&seed.to_le_bytes());
    rng.fill_bytes(&mut buf[TAG_LEN..]);
    buf
}

/// Writes a pseudo-random repository under `root` (created if needed; must
/// not already contain files) and returns its ground truth.
pub fn generate_fixture_repo(root: &Path, seed: u64, params: FixtureParams) -> Result<GroundTruth, FixtureError> {
    if params.max_size == 0 {
        return Err(FixtureError::InvalidParams("max_size must be positive".into()));
    }
    if params.duplicate_groups * 2 > params.files {
        return Err(FixtureError::InvalidParams(format!(
            "{} duplicate groups need at least {} files",
            params.duplicate_groups,
            params.duplicate_groups * 2
        )));
    }
    fs::create_dir_all(root).map_err(io_failure(root))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dirs: Vec<String> = Vec::with_capacity(params.dirs);
    for i in 0..params.dirs {
        let parent = if dirs.is_empty() || rng.random_bool(0.3) {
            "".to_string()
        } else {
            dirs[rng.random_range(0..dirs.len())].clone()
        };
        let d = format!("{parent}/d{i:03}");
        let p = fsutil::under(root, &d);
        fs::create_dir_all(&p).map_err(io_failure(&p))?;
        dirs.push(d);
    }

    // Group sizes: two each, plus a share of at most a third of the
    // remaining files.
    let mut group_sizes = vec![2usize; params.duplicate_groups];
    if !group_sizes.is_empty() {
        for _ in 0..(params.files - 2 * params.duplicate_groups) / 3 {
            let g = rng.random_range(0..group_sizes.len());
            group_sizes[g] += 1;
        }
    }
    let mut order: Vec<usize> = (0..params.files).collect();
    order.shuffle(&mut rng);
    let mut group_of = vec![None; params.files];
    let mut it = order.into_iter();
    for (g, size) in group_sizes.iter().enumerate() {
        for idx in it.by_ref().take(*size) {
            group_of[idx] = Some(g);
        }
    }
    let group_contents: Vec<Vec<u8>> = (0..params.duplicate_groups)
        .map(|g| content(&mut rng, (params.files + g) as u64, seed, params.max_size))
        .collect();

    let mut files = Vec::with_capacity(params.files);
    for (j, group) in group_of.iter().enumerate() {
        let dir = if dirs.is_empty() || rng.random_bool(0.1) {
            String::new()
        } else {
            dirs[rng.random_range(0..dirs.len())].clone()
        };
        let rel = format!("{dir}/f{j:04}.dat");
        let bytes = match group {
            Some(g) => group_contents[*g].clone(),
            None => content(&mut rng, j as u64, seed, params.max_size),
        };
        let exec = rng.random_bool(0.1);
        let p = fsutil::under(root, &rel);
        fs::write(&p, &bytes).map_err(io_failure(&p))?;
        fsutil::set_mode(&p, if exec { 0o755 } else { 0o644 }).map_err(io_failure(&p))?;
        files.push(TruthFile {
            path: rel,
            size: bytes.len() as u64,
            sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            exec,
            group: *group,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    dirs.sort();

    let total_bytes = files.iter().map(|f| f.size).sum();
    Ok(GroundTruth {
        seed,
        params,
        dirs,
        total_bytes,
        distinct_contents: params.files - group_sizes.iter().sum::<usize>() + params.duplicate_groups,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn params(files: usize, groups: usize) -> FixtureParams {
        FixtureParams { files, dirs: 4, duplicate_groups: groups, max_size: 512 }
    }

    fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        walkdir::WalkDir::new(root)
            .into_iter()
            .map(|e| e.unwrap())
            .map(|e| {
                let data = if e.file_type().is_file() { fs::read(e.path()).unwrap() } else { Vec::new() };
                (e.path().strip_prefix(root).unwrap().to_path_buf(), data)
            })
            .collect()
    }

    #[test]
    fn ten_files_two_groups() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_fixture_repo(dir.path(), 1, params(10, 2)).unwrap();
        assert_eq!(truth.files.len(), 10);
        let groups: BTreeSet<usize> = truth.files.iter().filter_map(|f| f.group).collect();
        assert_eq!(groups.len(), 2);
        // Independent check straight from the bytes on disk.
        let contents: BTreeSet<Vec<u8>> = truth
            .files
            .iter()
            .map(|f| fs::read(fsutil::under(dir.path(), &f.path)).unwrap())
            .collect();
        assert_eq!(contents.len(), truth.distinct_contents);
        for g in groups {
            let members: BTreeSet<&str> = truth.files.iter().filter(|f| f.group == Some(g)).map(|f| f.sha256.as_str()).collect();
            assert_eq!(members.len(), 1);
        }
    }

    #[test]
    fn same_seed_same_tree() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ta = generate_fixture_repo(a.path(), 7, params(25, 3)).unwrap();
        let tb = generate_fixture_repo(b.path(), 7, params(25, 3)).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(snapshot(a.path()), snapshot(b.path()));
        let c = tempfile::tempdir().unwrap();
        let tc = generate_fixture_repo(c.path(), 8, params(25, 3)).unwrap();
        assert_ne!(ta.files, tc.files);
    }

    #[test]
    fn zero_files() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_fixture_repo(dir.path(), 1, FixtureParams { files: 0, dirs: 0, duplicate_groups: 0, max_size: 1 }).unwrap();
        assert!(truth.files.is_empty());
        assert_eq!(truth.total_bytes, 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rejects_infeasible_groups() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_fixture_repo(dir.path(), 1, params(3, 2)),
            Err(FixtureError::InvalidParams(_))
        ));
    }
}
