use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::manifest::{FileRecord, ManifestError, SubsetManifest};

/// Changes that turn the records of one manifest into those of another.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyncPlan {
    /// New or changed records, sorted by logical path.
    pub add: Vec<FileRecord>,
    /// Logical paths present only in the old manifest, sorted.
    pub delete: Vec<String>,
    pub unchanged_count: usize,
}

impl SyncPlan {
    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.delete.is_empty()
    }

    /// Applies the plan to a record set; the result is what the new
    /// manifest lists.
    pub fn apply(&self, old: &[FileRecord]) -> Vec<FileRecord> {
        let mut map: BTreeMap<&str, &FileRecord> =
            old.iter().map(|r| (r.logical_path.as_str(), r)).collect();
        for d in &self.delete {
            map.remove(d.as_str());
        }
        for a in &self.add {
            map.insert(a.logical_path.as_str(), a);
        }
        map.into_values().cloned().collect()
    }

    pub fn apply_to(&self, old: &SubsetManifest, revision: u64) -> Result<SubsetManifest, ManifestError> {
        SubsetManifest::new(revision, self.apply(old.records()))
    }
}

/// Diffs two manifests by logical path. A record counts as changed when its
/// kind, hash, size, symlink target or exec flag differs.
pub fn plan_sync(old: &SubsetManifest, new: &SubsetManifest) -> SyncPlan {
    let mut plan = SyncPlan::default();
    let (a, b) = (old.records(), new.records());
    let (mut i, mut j) = (0, 0);
    // Both sides are sorted by raw bytes; merge-walk them.
    while i < a.len() || j < b.len() {
        let ord = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.logical_path.as_bytes().cmp(y.logical_path.as_bytes()),
            (Some(_), None) => core::cmp::Ordering::Less,
            (None, _) => core::cmp::Ordering::Greater,
        };
        match ord {
            core::cmp::Ordering::Less => {
                plan.delete.push(a[i].logical_path.clone());
                i += 1;
            }
            core::cmp::Ordering::Greater => {
                plan.add.push(b[j].clone());
                j += 1;
            }
            core::cmp::Ordering::Equal => {
                if a[i].kind == b[j].kind {
                    plan.unchanged_count += 1;
                } else {
                    plan.add.push(b[j].clone());
                }
                i += 1;
                j += 1;
            }
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::ContentHash;
    use alloc::vec;

    fn m(records: Vec<FileRecord>) -> SubsetManifest {
        SubsetManifest::new(1, records).unwrap()
    }

    fn base() -> Vec<FileRecord> {
        vec![
            FileRecord::directory("/r"),
            FileRecord::regular("/r/a", ContentHash::digest(b"a"), 1, false),
            FileRecord::regular("/r/b", ContentHash::digest(b"b"), 1, false),
            FileRecord::regular("/r/c", ContentHash::digest(b"c"), 1, false),
        ]
    }

    #[test]
    fn identical_manifests_give_empty_plan() {
        let p = plan_sync(&m(base()), &m(base()));
        assert!(p.is_empty());
        assert_eq!(p.unchanged_count, 4);
    }

    #[test]
    fn add_modify_delete() {
        let mut new = base();
        new.retain(|r| r.logical_path != "/r/c");
        new[1] = FileRecord::regular("/r/a", ContentHash::digest(b"A"), 1, false);
        new.push(FileRecord::regular("/r/d", ContentHash::digest(b"d"), 1, false));
        let (old, new) = (m(base()), m(new));
        let p = plan_sync(&old, &new);
        assert_eq!(p.add.len(), 2);
        assert_eq!(p.delete, vec![String::from("/r/c")]);
        assert_eq!(p.unchanged_count, 2);
        assert_eq!(p.apply_to(&old, 1).unwrap(), new);
    }

    #[test]
    fn exec_and_kind_changes_count() {
        let mut new = base();
        new[2] = FileRecord::regular("/r/b", ContentHash::digest(b"b"), 1, true);
        new[3] = FileRecord::symlink("/r/c", "a");
        let p = plan_sync(&m(base()), &m(new));
        assert_eq!(p.add.len(), 2);
        assert!(p.delete.is_empty());
    }

    #[test]
    fn from_empty_adds_everything() {
        let new = m(base());
        let p = plan_sync(&SubsetManifest::empty(0), &new);
        assert_eq!(p.add, new.records());
        assert!(p.delete.is_empty());
        assert_eq!(p.unchanged_count, 0);
    }
}
