//! Absolute, slash-separated path strings.
//!
//! Paths are handled as UTF-8 strings rather than `std::path` values so that
//! ordering and prefix tests are byte-exact and identical on every platform.

use alloc::string::String;
use alloc::vec::Vec;

pub const SEPARATOR: char = '/';

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("path is empty")]
    Empty,
    #[error("path is not absolute: {0}")]
    Relative(String),
}

/// Normalizes an absolute path: collapses repeated separators, drops `.`
/// components and resolves `..` lexically (`..` at the root stays at the
/// root). The result never has a trailing separator except for `/` itself.
pub fn normalize(path: &str) -> Result<String, PathError> {
    if path.is_empty() {
        return Err(PathError::Empty);
    }
    if !path.starts_with(SEPARATOR) {
        return Err(PathError::Relative(path.into()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for component in path.split(SEPARATOR) {
        match component {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    Ok(from_components(&parts))
}

/// Joins `path` onto `base` when it is relative, then normalizes.
pub fn resolve(base: &str, path: &str) -> Result<String, PathError> {
    if path.starts_with(SEPARATOR) {
        normalize(path)
    } else {
        let mut joined = String::with_capacity(base.len() + path.len() + 1);
        joined.push_str(base);
        joined.push(SEPARATOR);
        joined.push_str(path);
        normalize(&joined)
    }
}

pub fn is_normalized(path: &str) -> bool {
    matches!(normalize(path), Ok(ref n) if n == path)
}

/// Iterates the non-empty components of a path.
pub fn components(path: &str) -> impl Iterator<Item = &str> {
    path.split(SEPARATOR).filter(|c| !c.is_empty())
}

fn from_components(parts: &[&str]) -> String {
    if parts.is_empty() {
        return String::from("/");
    }
    let mut out = String::new();
    for p in parts {
        out.push(SEPARATOR);
        out.push_str(p);
    }
    out
}

/// Component-wise prefix test on normalized paths: `/cvmfs2` is not under
/// `/cvmfs`, while `/cvmfs` itself is.
pub fn has_component_prefix(path: &str, prefix: &str) -> bool {
    strip_component_prefix(path, prefix).is_some()
}

/// Returns the remainder of `path` below `prefix`: `""` when they are equal,
/// otherwise a string starting with a separator.
pub fn strip_component_prefix<'a>(path: &'a str, prefix: &str) -> Option<&'a str> {
    if prefix == "/" {
        return Some(if path == "/" { "" } else { path });
    }
    let rest = path.strip_prefix(prefix)?;
    if rest.is_empty() || rest.starts_with(SEPARATOR) {
        Some(rest)
    } else {
        None
    }
}

/// Parent of a normalized absolute path; `None` for the root.
pub fn parent(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind(SEPARATOR) {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

/// Last component of a normalized path (`""` for the root).
pub fn file_name(path: &str) -> &str {
    path.rsplit(SEPARATOR).next().unwrap_or("")
}

/// All proper ancestors of a normalized path, excluding the root, from the
/// shallowest down.
pub fn ancestors(path: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut cur = parent(path);
    while let Some(p) = cur {
        if p == "/" {
            break;
        }
        out.push(p);
        cur = parent(p);
    }
    out.reverse();
    out
}

/// Appends a relative tail (with or without leading separator) to a
/// normalized base.
pub fn join(base: &str, tail: &str) -> String {
    let tail = tail.trim_start_matches(SEPARATOR);
    if tail.is_empty() {
        return base.into();
    }
    let mut out = String::from(base.trim_end_matches(SEPARATOR));
    out.push(SEPARATOR);
    out.push_str(tail);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalizes_dots_and_separators() {
        assert_eq!(normalize("/a//b/./c/").unwrap(), "/a/b/c");
        assert_eq!(normalize("/a/b/../c").unwrap(), "/a/c");
        assert_eq!(normalize("/../..").unwrap(), "/");
        assert_eq!(normalize("/").unwrap(), "/");
        assert_eq!(normalize("a/b"), Err(PathError::Relative("a/b".into())));
        assert_eq!(normalize(""), Err(PathError::Empty));
    }

    #[test]
    fn prefix_is_component_wise() {
        assert!(has_component_prefix("/cvmfs/repoA/f", "/cvmfs"));
        assert!(has_component_prefix("/cvmfs", "/cvmfs"));
        assert!(!has_component_prefix("/cvmfs2/f", "/cvmfs"));
        assert!(has_component_prefix("/anything", "/"));
        assert_eq!(strip_component_prefix("/cvmfs/repoA", "/cvmfs"), Some("/repoA"));
        assert_eq!(strip_component_prefix("/cvmfs", "/cvmfs"), Some(""));
    }

    #[test]
    fn resolves_relative_against_base() {
        assert_eq!(resolve("/w/d", "../x").unwrap(), "/w/x");
        assert_eq!(resolve("/w/d", "/abs").unwrap(), "/abs");
    }

    #[test]
    fn ancestors_and_parent() {
        assert_eq!(ancestors("/a/b/c"), vec!["/a", "/a/b"]);
        assert!(ancestors("/a").is_empty());
        assert_eq!(parent("/a"), Some("/"));
        assert_eq!(parent("/"), None);
        assert_eq!(file_name("/a/b"), "b");
        assert_eq!(join("/a/", "/b/c"), "/a/b/c");
        assert_eq!(join("/", "b"), "/b");
    }
}
