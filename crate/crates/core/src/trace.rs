//! Trace events and the log formats that carry them.
//!
//! The native log is one event per line, `<op>\t<outcome>\t<path>`. The
//! strace-compatible reader understands the path-resolving syscalls only
//! (open/openat, the stat family, execve, access and readlink); every other
//! syscall line is skipped.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TraceOp {
    Open,
    Stat,
    Readlink,
    Exec,
    Access,
}

impl TraceOp {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceOp::Open => "open",
            TraceOp::Stat => "stat",
            TraceOp::Readlink => "readlink",
            TraceOp::Exec => "exec",
            TraceOp::Access => "access",
        }
    }

    /// Maps a Linux syscall name onto the operation it performs on a path.
    pub fn from_syscall(name: &str) -> Option<TraceOp> {
        Some(match name {
            "open" | "openat" | "openat2" | "creat" => TraceOp::Open,
            "stat" | "lstat" | "stat64" | "lstat64" | "newfstatat" | "fstatat64" | "statx" => {
                TraceOp::Stat
            }
            "readlink" | "readlinkat" => TraceOp::Readlink,
            "execve" | "execveat" => TraceOp::Exec,
            "access" | "faccessat" | "faccessat2" => TraceOp::Access,
            _ => return None,
        })
    }
}

impl FromStr for TraceOp {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "open" => TraceOp::Open,
            "stat" => TraceOp::Stat,
            "readlink" => TraceOp::Readlink,
            "exec" => TraceOp::Exec,
            "access" => TraceOp::Access,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Outcome {
    Hit,
    Miss,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Hit => "hit",
            Outcome::Miss => "miss",
        }
    }
}

/// One intercepted path-resolving call. The path is always absolute and
/// normalized.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceEvent {
    pub op: TraceOp,
    pub path: String,
    pub outcome: Outcome,
}

impl TraceEvent {
    pub fn new(op: TraceOp, path: &str, outcome: Outcome) -> Result<Self, path::PathError> {
        Ok(TraceEvent {
            op,
            path: path::normalize(path)?,
            outcome,
        })
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.op.as_str(), self.outcome.as_str(), self.path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LogFormat {
    Native,
    StraceCompatible,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("unknown trace log format `{0}`")]
    UnknownFormat(String),
}

impl FromStr for LogFormat {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, TraceError> {
        match s {
            "native" => Ok(LogFormat::Native),
            "strace" | "strace_compatible" => Ok(LogFormat::StraceCompatible),
            other => Err(TraceError::UnknownFormat(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WarningKind {
    Malformed,
    UnknownOp,
    NonUtf8,
    UnresolvedRelativePath,
    Unfinished,
}

/// A log line that could not be turned into an event.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogWarning {
    /// 1-based line number.
    pub line: usize,
    pub kind: WarningKind,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub events: Vec<TraceEvent>,
    pub warnings: Vec<LogWarning>,
}

/// Parses a trace log into events in input order. Lines that cannot be
/// interpreted are reported as warnings rather than failing the parse.
pub fn parse_trace_log(log: &[u8], format: LogFormat) -> ParsedLog {
    match format {
        LogFormat::Native => parse_native(log),
        LogFormat::StraceCompatible => parse_strace(log),
    }
}

/// Renders events in the native log format, LF terminated.
pub fn write_native_log(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        if e.path.contains('\n') {
            continue;
        }
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

fn lines(log: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    let body = log.strip_suffix(b"\n").unwrap_or(log);
    let empty = log.is_empty();
    body.split(|&b| b == b'\n')
        .enumerate()
        .filter(move |_| !empty)
        .map(|(i, l)| (i + 1, l.strip_suffix(b"\r").unwrap_or(l)))
}

fn parse_native(log: &[u8]) -> ParsedLog {
    let mut out = ParsedLog::default();
    for (lineno, raw) in lines(log) {
        if raw.is_empty() {
            continue;
        }
        let warn = |kind, text: &str| LogWarning {
            line: lineno,
            kind,
            text: text.into(),
        };
        let Ok(line) = core::str::from_utf8(raw) else {
            out.warnings.push(warn(WarningKind::NonUtf8, &String::from_utf8_lossy(raw)));
            continue;
        };
        let mut fields = line.splitn(3, '\t');
        let (Some(op), Some(outcome), Some(p)) = (fields.next(), fields.next(), fields.next())
        else {
            out.warnings.push(warn(WarningKind::Malformed, line));
            continue;
        };
        let Ok(op) = op.parse::<TraceOp>() else {
            out.warnings.push(warn(WarningKind::UnknownOp, line));
            continue;
        };
        let outcome = match outcome {
            "hit" => Outcome::Hit,
            "miss" => Outcome::Miss,
            _ => {
                out.warnings.push(warn(WarningKind::Malformed, line));
                continue;
            }
        };
        match TraceEvent::new(op, p, outcome) {
            Ok(e) => out.events.push(e),
            Err(_) => out.warnings.push(warn(WarningKind::Malformed, line)),
        }
    }
    out
}

/// A syscall line split into its pieces.
struct SyscallLine<'a> {
    pid: &'a str,
    name: &'a str,
    /// Text after the opening parenthesis.
    rest: &'a str,
    resumed: bool,
}

fn split_syscall_line(line: &str) -> Option<SyscallLine<'_>> {
    let mut s = line.trim_start();
    let mut pid = "";
    if let Some(r) = s.strip_prefix("[pid") {
        let r = r.trim_start();
        let end = r.find(']')?;
        pid = r[..end].trim();
        s = r[end + 1..].trim_start();
    }
    // Leading pid and timestamp columns (`-f`, `-t`, `-tt`, `-r`).
    loop {
        let tok_end = s.find(' ').unwrap_or(s.len());
        let tok = &s[..tok_end];
        if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit() || b == b'.' || b == b':') {
            if pid.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
                pid = tok;
            }
            s = s[tok_end..].trim_start();
        } else {
            break;
        }
    }
    if let Some(r) = s.strip_prefix("<... ") {
        let end = r.find(' ')?;
        let name = &r[..end];
        let rest = r[end..].strip_prefix(" resumed>")?;
        return Some(SyscallLine {
            pid,
            name,
            rest,
            resumed: true,
        });
    }
    let open = s.find('(')?;
    let name = &s[..open];
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
        return None;
    }
    Some(SyscallLine {
        pid,
        name,
        rest: &s[open + 1..],
        resumed: false,
    })
}

/// Decodes the first C-style quoted string in `s`; returns the bytes and the
/// offset just past the closing quote.
fn first_quoted(s: &str) -> Option<(Vec<u8>, usize)> {
    let bytes = s.as_bytes();
    let start = s.find('"')?;
    let mut out = Vec::new();
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => return Some((out, i + 1)),
            b'\\' => {
                let c = *bytes.get(i + 1)?;
                i += 2;
                match c {
                    b'n' => out.push(b'\n'),
                    b't' => out.push(b'\t'),
                    b'r' => out.push(b'\r'),
                    b'v' => out.push(0x0b),
                    b'f' => out.push(0x0c),
                    b'x' => {
                        let hex = s.get(i..i + 2)?;
                        out.push(u8::from_str_radix(hex, 16).ok()?);
                        i += 2;
                    }
                    b'0'..=b'7' => {
                        let mut v = u32::from(c - b'0');
                        let mut n = 1;
                        while n < 3 && i < bytes.len() && (b'0'..=b'7').contains(&bytes[i]) {
                            v = v * 8 + u32::from(bytes[i] - b'0');
                            i += 1;
                            n += 1;
                        }
                        out.push(u8::try_from(v).ok()?);
                    }
                    other => out.push(other),
                }
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    None
}

/// `= 3` and `= 0` are hits; `= -1 ENOENT (...)` is a miss. `None` when no
/// return value is present on the line.
fn syscall_outcome(tail: &str) -> Option<Outcome> {
    let idx = tail.rfind(") = ")?;
    let ret = tail[idx + 4..].trim_start();
    let ret = ret.split(' ').next().unwrap_or("");
    if ret.starts_with('-') {
        Some(Outcome::Miss)
    } else if ret.is_empty() {
        None
    } else {
        Some(Outcome::Hit)
    }
}

/// Directory given as `3</some/dir>` by `strace -y`.
fn annotated_dirfd(args: &str) -> Option<&str> {
    let first = args.split(',').next()?.trim();
    let open = first.find('<')?;
    first[open + 1..].strip_suffix('>')
}

fn parse_strace(log: &[u8]) -> ParsedLog {
    let mut out = ParsedLog::default();
    // pid -> (line, op, path) awaiting a `resumed` line
    let mut pending: BTreeMap<String, (usize, TraceOp, String, String)> = BTreeMap::new();

    for (lineno, raw) in lines(log) {
        let warn = |kind, text: &str| LogWarning {
            line: lineno,
            kind,
            text: text.into(),
        };
        let Ok(line) = core::str::from_utf8(raw) else {
            // Only care if it looks like a file syscall.
            let lossy = String::from_utf8_lossy(raw);
            if split_syscall_line(&lossy)
                .and_then(|s| TraceOp::from_syscall(s.name))
                .is_some()
            {
                out.warnings.push(warn(WarningKind::NonUtf8, &lossy));
            }
            continue;
        };
        let Some(call) = split_syscall_line(line) else {
            continue;
        };
        let Some(op) = TraceOp::from_syscall(call.name) else {
            continue;
        };

        if call.resumed {
            let Some((_, pop, p, text)) = pending.remove(call.pid) else {
                out.warnings.push(warn(WarningKind::Malformed, line));
                continue;
            };
            if pop != op {
                out.warnings.push(warn(WarningKind::Malformed, &text));
                continue;
            }
            match syscall_outcome(call.rest) {
                Some(outcome) => out.events.push(TraceEvent { op, path: p, outcome }),
                None => out.warnings.push(warn(WarningKind::Malformed, line)),
            }
            continue;
        }

        let Some((raw_path, after)) = first_quoted(call.rest) else {
            out.warnings.push(warn(WarningKind::Malformed, line));
            continue;
        };
        let Ok(p) = String::from_utf8(raw_path) else {
            out.warnings.push(warn(WarningKind::NonUtf8, line));
            continue;
        };
        let resolved = if p.starts_with('/') {
            path::normalize(&p).ok()
        } else {
            annotated_dirfd(call.rest).and_then(|base| path::resolve(base, &p).ok())
        };
        let Some(resolved) = resolved else {
            out.warnings.push(warn(WarningKind::UnresolvedRelativePath, line));
            continue;
        };
        let tail = &call.rest[after..];
        if tail.trim_end().ends_with("<unfinished ...>") {
            pending.insert(call.pid.into(), (lineno, op, resolved, line.into()));
            continue;
        }
        match syscall_outcome(tail) {
            Some(outcome) => out.events.push(TraceEvent {
                op,
                path: resolved,
                outcome,
            }),
            None => out.warnings.push(warn(WarningKind::Malformed, line)),
        }
    }
    for (_, (lineno, _, _, text)) in pending {
        out.warnings.push(LogWarning {
            line: lineno,
            kind: WarningKind::Unfinished,
            text,
        });
    }
    out.warnings.sort_by_key(|w| w.line);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Origin {
    Trace,
    File,
    Merged,
}

/// Sorted, duplicate-free set of absolute paths.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DependencySet {
    paths: Vec<String>,
    pub origin: Origin,
}

impl DependencySet {
    pub fn from_paths<I: IntoIterator<Item = String>>(paths: I, origin: Origin) -> Self {
        let set: BTreeSet<String> = paths.into_iter().collect();
        DependencySet {
            paths: set.into_iter().collect(),
            origin,
        }
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn into_paths(self) -> Vec<String> {
        self.paths
    }

    /// Re-expresses the set as `open`/`hit` events.
    pub fn to_events(&self) -> Vec<TraceEvent> {
        self.paths
            .iter()
            .map(|p| TraceEvent {
                op: TraceOp::Open,
                path: p.clone(),
                outcome: Outcome::Hit,
            })
            .collect()
    }

    pub fn union(&self, other: &DependencySet) -> DependencySet {
        DependencySet::from_paths(
            self.paths.iter().chain(other.paths.iter()).cloned(),
            Origin::Merged,
        )
    }
}

/// Keeps successful events whose path lies under one of the (normalized)
/// repository prefixes, compared component by component.
pub fn filter_dependencies(events: &[TraceEvent], repo_prefixes: &[String]) -> DependencySet {
    DependencySet::from_paths(
        events
            .iter()
            .filter(|e| e.outcome == Outcome::Hit)
            .filter(|e| repo_prefixes.iter().any(|p| path::has_component_prefix(&e.path, p)))
            .map(|e| e.path.clone()),
        Origin::Trace,
    )
}

impl fmt::Display for DependencySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.paths {
            writeln!(f, "{p}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ev(op: TraceOp, p: &str, outcome: Outcome) -> TraceEvent {
        TraceEvent::new(op, p, outcome).unwrap()
    }

    #[test]
    fn native_single_line() {
        let parsed = parse_trace_log(b"open\thit\t/cvmfs/repoA/path/to/file", LogFormat::Native);
        assert_eq!(
            parsed.events,
            vec![ev(TraceOp::Open, "/cvmfs/repoA/path/to/file", Outcome::Hit)]
        );
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn native_empty_stream() {
        let parsed = parse_trace_log(b"", LogFormat::Native);
        assert!(parsed.events.is_empty());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn native_malformed_line_is_reported() {
        let log = b"open\thit\t/cvmfs/a\nthis is not an event\nstat\tmiss\t/cvmfs/b\n";
        let parsed = parse_trace_log(log, LogFormat::Native);
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.warnings[0].line, 2);
        assert_eq!(parsed.warnings[0].kind, WarningKind::Malformed);
    }

    #[test]
    fn native_unknown_op_and_relative_path() {
        let log = b"unlink\thit\t/cvmfs/a\nopen\thit\trelative/p\nopen\thit\t/cvmfs/./x/../y\n";
        let parsed = parse_trace_log(log, LogFormat::Native);
        assert_eq!(parsed.events, vec![ev(TraceOp::Open, "/cvmfs/y", Outcome::Hit)]);
        assert_eq!(parsed.warnings[0].kind, WarningKind::UnknownOp);
        assert_eq!(parsed.warnings[1].kind, WarningKind::Malformed);
    }

    #[test]
    fn native_round_trip() {
        let events = vec![
            ev(TraceOp::Exec, "/bin/sh", Outcome::Hit),
            ev(TraceOp::Readlink, "/cvmfs/r/l", Outcome::Miss),
        ];
        let text = write_native_log(&events);
        assert_eq!(parse_trace_log(text.as_bytes(), LogFormat::Native).events, events);
    }

    #[test]
    fn unknown_format_name() {
        assert_eq!(
            "parrot".parse::<LogFormat>(),
            Err(TraceError::UnknownFormat("parrot".into()))
        );
        assert_eq!("native".parse::<LogFormat>(), Ok(LogFormat::Native));
    }

    #[test]
    fn strace_lines() {
        let log = br#"execve("/usr/bin/cat", ["cat", "/cvmfs/r/a"], 0x7ffd /* 10 vars */) = 0
openat(AT_FDCWD, "/etc/ld.so.cache", O_RDONLY|O_CLOEXEC) = 3
1234  openat(AT_FDCWD, "/cvmfs/r/a", O_RDONLY) = 3
[pid  1235] newfstatat(AT_FDCWD, "/cvmfs/r/missing", 0x7ffc, 0) = -1 ENOENT (No such file or directory)
12:01:02.345678 access("/cvmfs/r/b", R_OK) = 0
readlink("/cvmfs/r/link", "target", 4095) = 6
read(3, "abc", 4096) = 3
openat(5</cvmfs/r/dir>, "sub/file", O_RDONLY) = 4
openat(AT_FDCWD, "rel/file", O_RDONLY) = 4
--- SIGCHLD {si_signo=SIGCHLD} ---
+++ exited with 0 +++
"#;
        let parsed = parse_trace_log(log, LogFormat::StraceCompatible);
        let paths: Vec<(TraceOp, &str, Outcome)> = parsed
            .events
            .iter()
            .map(|e| (e.op, e.path.as_str(), e.outcome))
            .collect();
        assert_eq!(
            paths,
            vec![
                (TraceOp::Exec, "/usr/bin/cat", Outcome::Hit),
                (TraceOp::Open, "/etc/ld.so.cache", Outcome::Hit),
                (TraceOp::Open, "/cvmfs/r/a", Outcome::Hit),
                (TraceOp::Stat, "/cvmfs/r/missing", Outcome::Miss),
                (TraceOp::Access, "/cvmfs/r/b", Outcome::Hit),
                (TraceOp::Readlink, "/cvmfs/r/link", Outcome::Hit),
                (TraceOp::Open, "/cvmfs/r/dir/sub/file", Outcome::Hit),
            ]
        );
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.warnings[0].kind, WarningKind::UnresolvedRelativePath);
        assert_eq!(parsed.warnings[0].line, 9);
    }

    #[test]
    fn strace_unfinished_and_resumed() {
        let log = br#"100 openat(AT_FDCWD, "/cvmfs/r/x", O_RDONLY <unfinished ...>
101 stat("/cvmfs/r/y",  <unfinished ...>
100 <... openat resumed>) = 3
"#;
        let parsed = parse_trace_log(log, LogFormat::StraceCompatible);
        assert_eq!(parsed.events, vec![ev(TraceOp::Open, "/cvmfs/r/x", Outcome::Hit)]);
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.warnings[0].kind, WarningKind::Unfinished);
        assert_eq!(parsed.warnings[0].line, 2);
    }

    #[test]
    fn strace_escaped_path() {
        let log = b"open(\"/cvmfs/r/caf\\303\\251 \\\"q\\\"\", O_RDONLY) = 3\n";
        let parsed = parse_trace_log(log, LogFormat::StraceCompatible);
        assert_eq!(parsed.events[0].path, "/cvmfs/r/caf\u{e9} \"q\"");
    }

    #[test]
    fn filter_keeps_hits_under_prefix() {
        let events = vec![
            ev(TraceOp::Open, "/cvmfs/repoA/f", Outcome::Hit),
            ev(TraceOp::Open, "/usr/lib/x", Outcome::Hit),
            ev(TraceOp::Open, "/cvmfs/repoA/f", Outcome::Hit),
            ev(TraceOp::Stat, "/cvmfs/repoA/g", Outcome::Miss),
            ev(TraceOp::Open, "/cvmfs2/repoA/h", Outcome::Hit),
        ];
        let deps = filter_dependencies(&events, &["/cvmfs".into()]);
        assert_eq!(deps.paths(), &["/cvmfs/repoA/f".to_string()]);
        assert_eq!(deps.origin, Origin::Trace);
    }

    #[test]
    fn filter_miss_events_brute_force() {
        // Every combination of (path, outcome) over a small alphabet; the
        // expected set is computed by direct enumeration.
        let paths = ["/cvmfs/repoA/g", "/cvmfs/repoA/h", "/opt/g"];
        for mask in 0u32..(1 << 6) {
            let mut events = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                if mask & (1 << (2 * i)) != 0 {
                    events.push(ev(TraceOp::Open, p, Outcome::Hit));
                }
                if mask & (1 << (2 * i + 1)) != 0 {
                    events.push(ev(TraceOp::Stat, p, Outcome::Miss));
                }
            }
            let mut expected: Vec<String> = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                if mask & (1 << (2 * i)) != 0 && p.starts_with("/cvmfs/") {
                    expected.push((*p).into());
                }
            }
            let got = filter_dependencies(&events, &["/cvmfs".into()]);
            assert_eq!(got.paths(), expected.as_slice(), "mask {mask:#b}");
        }
    }
}
