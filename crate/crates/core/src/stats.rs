use crate::manifest::SubsetManifest;

/// Space accounting for a built subset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DedupStats {
    /// Sum of regular-file sizes as seen through the tree.
    pub logical_bytes: u64,
    /// Sum of sizes of the distinct blobs actually stored.
    pub physical_bytes: u64,
    pub file_count: u64,
    pub unique_blob_count: u64,
    /// Manifest record lines plus the store index.
    pub metadata_bytes: u64,
}

impl DedupStats {
    /// Stats implied by a manifest alone; `metadata_bytes` is supplied by
    /// the caller since it depends on what is on disk.
    pub fn from_manifest(manifest: &SubsetManifest, metadata_bytes: u64) -> Self {
        let mut stats = DedupStats {
            metadata_bytes,
            ..DedupStats::default()
        };
        for (_, _, size) in manifest.regular_files() {
            stats.logical_bytes += size;
            stats.file_count += 1;
        }
        for (_, size) in manifest.blobs() {
            stats.physical_bytes += size;
            stats.unique_blob_count += 1;
        }
        stats
    }

    /// Bytes saved by sharing blobs.
    pub fn saved_bytes(&self) -> u64 {
        self.logical_bytes - self.physical_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::ContentHash;
    use crate::manifest::FileRecord;
    use alloc::vec;

    #[test]
    fn two_identical_files() {
        let h = ContentHash::digest(&[7u8; 1024]);
        let m = SubsetManifest::new(
            1,
            vec![
                FileRecord::directory("/r"),
                FileRecord::regular("/r/a", h, 1024, false),
                FileRecord::regular("/r/b", h, 1024, false),
            ],
        )
        .unwrap();
        let s = DedupStats::from_manifest(&m, 0);
        assert_eq!(s.logical_bytes, 2048);
        assert_eq!(s.physical_bytes, 1024);
        assert_eq!(s.file_count, 2);
        assert_eq!(s.unique_blob_count, 1);
        assert_eq!(s.saved_bytes(), 1024);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(DedupStats::from_manifest(&SubsetManifest::empty(1), 0), DedupStats::default());
    }
}
