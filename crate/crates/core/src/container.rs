//! Container definition text for images that carry the subset.

use alloc::format;
use alloc::string::String;

use crate::path;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("base image reference is empty")]
    EmptyBaseImage,
    #[error(transparent)]
    Path(#[from] path::PathError),
}

/// Renders a Singularity/Apptainer definition that bootstraps from a local
/// image and copies `<subset_tree><mount_prefix>` to `<mount_prefix>`.
pub fn emit_container_definition(
    subset_tree: &str,
    base_image_ref: &str,
    mount_prefix: &str,
) -> Result<String, ContainerError> {
    let base = base_image_ref.trim();
    if base.is_empty() {
        return Err(ContainerError::EmptyBaseImage);
    }
    let tree = path::normalize(subset_tree)?;
    let prefix = path::normalize(mount_prefix)?;
    let source = path::join(&tree, &prefix);
    Ok(format!(
        "Bootstrap: localimage\nFrom: {base}\n\n%files\n    {source} {prefix}\n\n%environment\n    export SUBCVMFS_ROOT=\n"
    ))
}
