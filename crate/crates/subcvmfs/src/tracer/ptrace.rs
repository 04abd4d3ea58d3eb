//! Built-in tracer for Linux x86_64: follows a process tree with ptrace and
//! records path-resolving syscalls.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::Command;

use subcvmfs_core::path;
use subcvmfs_core::{Outcome, TraceEvent, TraceOp};

const AT_FDCWD: i64 = -100;
const OPTIONS: libc::c_int = libc::PTRACE_O_TRACESYSGOOD
    | libc::PTRACE_O_TRACEFORK
    | libc::PTRACE_O_TRACEVFORK
    | libc::PTRACE_O_TRACECLONE
    | libc::PTRACE_O_TRACEEXEC
    | libc::PTRACE_O_EXITKILL;

/// Where the path argument of a syscall lives.
enum PathArg {
    /// First argument, relative to the cwd.
    First,
    /// Second argument, relative to the dirfd in the first.
    AtSecond,
}

fn classify(nr: u64) -> Option<(TraceOp, PathArg)> {
    use PathArg::*;
    Some(match nr {
        2 | 85 => (TraceOp::Open, First),        // open, creat
        257 | 437 => (TraceOp::Open, AtSecond),  // openat, openat2
        4 | 6 => (TraceOp::Stat, First),         // stat, lstat
        262 | 332 => (TraceOp::Stat, AtSecond),  // newfstatat, statx
        21 => (TraceOp::Access, First),          // access
        269 | 439 => (TraceOp::Access, AtSecond), // faccessat, faccessat2
        59 => (TraceOp::Exec, First),            // execve
        322 => (TraceOp::Exec, AtSecond),        // execveat
        89 => (TraceOp::Readlink, First),        // readlink
        267 => (TraceOp::Readlink, AtSecond),    // readlinkat
        _ => return None,
    })
}

#[derive(Default)]
struct Tracee {
    in_syscall: bool,
    seen_first_stop: bool,
    pending: Option<(TraceOp, String)>,
}

fn errno() -> i32 {
    io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

fn resume(pid: libc::pid_t, sig: libc::c_int) {
    unsafe {
        libc::ptrace(libc::PTRACE_SYSCALL, pid, std::ptr::null_mut::<libc::c_void>(), sig as usize as *mut libc::c_void);
    }
}

fn regs(pid: libc::pid_t) -> Option<libc::user_regs_struct> {
    let mut r: libc::user_regs_struct = unsafe { std::mem::zeroed() };
    let rc = unsafe {
        libc::ptrace(
            libc::PTRACE_GETREGS,
            pid,
            std::ptr::null_mut::<libc::c_void>(),
            &mut r as *mut _ as *mut libc::c_void,
        )
    };
    (rc != -1).then_some(r)
}

/// Reads a NUL-terminated string from the tracee.
fn read_cstring(pid: libc::pid_t, addr: u64) -> Option<Vec<u8>> {
    const LIMIT: usize = 8192;
    let mut out = Vec::new();
    let mut addr = addr;
    while out.len() < LIMIT {
        // Stay within one page per read.
        let to_page_end = 4096 - (addr as usize % 4096);
        let mut buf = vec![0u8; to_page_end.min(256)];
        let local = libc::iovec {
            iov_base: buf.as_mut_ptr() as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let remote = libc::iovec {
            iov_base: addr as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let n = unsafe { libc::process_vm_readv(pid, &local, 1, &remote, 1, 0) };
        if n <= 0 {
            return peek_cstring(pid, addr, out);
        }
        let chunk = &buf[..n as usize];
        if let Some(nul) = chunk.iter().position(|&b| b == 0) {
            out.extend_from_slice(&chunk[..nul]);
            return Some(out);
        }
        out.extend_from_slice(chunk);
        addr += n as u64;
    }
    None
}

fn peek_cstring(pid: libc::pid_t, mut addr: u64, mut out: Vec<u8>) -> Option<Vec<u8>> {
    loop {
        unsafe { *libc::__errno_location() = 0 };
        let word = unsafe {
            libc::ptrace(libc::PTRACE_PEEKDATA, pid, addr as *mut libc::c_void, std::ptr::null_mut::<libc::c_void>())
        };
        if word == -1 && errno() != 0 {
            return None;
        }
        for b in word.to_ne_bytes() {
            if b == 0 {
                return Some(out);
            }
            out.push(b);
        }
        if out.len() > 8192 {
            return None;
        }
        addr += 8;
    }
}

fn proc_link(pid: libc::pid_t, what: &str) -> Option<String> {
    std::fs::read_link(format!("/proc/{pid}/{what}"))
        .ok()
        .and_then(|p| p.into_os_string().into_string().ok())
}

fn syscall_path(pid: libc::pid_t, r: &libc::user_regs_struct, arg: PathArg) -> Option<String> {
    let (dirfd, addr) = match arg {
        PathArg::First => (AT_FDCWD, r.rdi),
        PathArg::AtSecond => (r.rdi as i32 as i64, r.rsi),
    };
    if addr == 0 {
        return None;
    }
    let raw = read_cstring(pid, addr)?;
    if raw.is_empty() {
        return None; // AT_EMPTY_PATH on a descriptor
    }
    let p = String::from_utf8(raw).ok()?;
    if p.starts_with('/') {
        return path::normalize(&p).ok();
    }
    let base = if dirfd == AT_FDCWD {
        proc_link(pid, "cwd")?
    } else {
        proc_link(pid, &format!("fd/{dirfd}"))?
    };
    path::resolve(&base, &p).ok()
}

fn exit_code(status: libc::c_int) -> i32 {
    if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else {
        128 + libc::WTERMSIG(status)
    }
}

/// Resolves the program the command will run, the way `execvp` does.
fn program_path(program: &str, workdir: &Path, search: Option<OsString>) -> Option<String> {
    if program.contains('/') {
        let base = workdir.to_str()?;
        return path::resolve(base, program).ok();
    }
    let search = search.or_else(|| std::env::var_os("PATH"))?;
    for dir in std::env::split_paths(&search) {
        let candidate = dir.join(program);
        if candidate.is_file() {
            return candidate.to_str().and_then(|c| path::resolve(workdir.to_str()?, c).ok());
        }
    }
    None
}

/// Runs `cmd` under ptrace and returns its exit code with every recorded
/// event. The command is put in its own process group so that waiting never
/// reaps children that belong to other parts of this process.
pub enum TraceFailure {
    Spawn(io::Error),
    Ptrace(io::Error),
}

impl From<io::Error> for TraceFailure {
    fn from(e: io::Error) -> Self {
        TraceFailure::Ptrace(e)
    }
}

pub fn trace_command(
    mut cmd: Command,
    program: &str,
    workdir: &Path,
    search: Option<OsString>,
) -> Result<(i32, Vec<TraceEvent>), TraceFailure> {
    unsafe {
        cmd.pre_exec(|| {
            if libc::ptrace(
                libc::PTRACE_TRACEME,
                0,
                std::ptr::null_mut::<libc::c_void>(),
                std::ptr::null_mut::<libc::c_void>(),
            ) == -1
            {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
    cmd.process_group(0);
    let child = cmd.spawn().map_err(TraceFailure::Spawn)?;
    let root = child.id() as libc::pid_t;
    drop(child);

    let mut events = Vec::new();
    if let Some(p) = program_path(program, workdir, search) {
        events.push(TraceEvent { op: TraceOp::Exec, path: p, outcome: Outcome::Hit });
    }

    let mut status: libc::c_int = 0;
    if unsafe { libc::waitpid(root, &mut status, libc::__WALL) } == -1 {
        return Err(io::Error::last_os_error().into());
    }
    if !libc::WIFSTOPPED(status) {
        return Ok((exit_code(status), events));
    }
    if unsafe { libc::ptrace(libc::PTRACE_SETOPTIONS, root, std::ptr::null_mut::<libc::c_void>(), OPTIONS as usize as *mut libc::c_void) } == -1 {
        let err = io::Error::last_os_error();
        unsafe { libc::kill(root, libc::SIGKILL) };
        unsafe { libc::waitpid(root, &mut status, libc::__WALL) };
        return Err(err.into());
    }
    let mut tracees: HashMap<libc::pid_t, Tracee> = HashMap::new();
    tracees.insert(root, Tracee { seen_first_stop: true, ..Tracee::default() });
    resume(root, 0);

    let mut root_status = None;
    while !tracees.is_empty() {
        let pid = unsafe { libc::waitpid(-root, &mut status, libc::__WALL) };
        let pid = if pid == -1 {
            match errno() {
                libc::EINTR => continue,
                libc::ECHILD => match poll_known(&tracees, &mut status) {
                    Some(pid) => pid,
                    None => {
                        std::thread::sleep(std::time::Duration::from_millis(1));
                        continue;
                    }
                },
                _ => return Err(io::Error::last_os_error().into()),
            }
        } else {
            pid
        };

        if libc::WIFEXITED(status) || libc::WIFSIGNALED(status) {
            tracees.remove(&pid);
            if pid == root {
                root_status = Some(exit_code(status));
            }
            continue;
        }
        if !libc::WIFSTOPPED(status) {
            continue;
        }
        let sig = libc::WSTOPSIG(status);
        let event = (status >> 16) & 0xff;
        let t = tracees.entry(pid).or_default();

        if sig == (libc::SIGTRAP | 0x80) {
            t.seen_first_stop = true;
            on_syscall_stop(pid, t, &mut events);
            resume(pid, 0);
        } else if sig == libc::SIGTRAP && event != 0 {
            if matches!(event, libc::PTRACE_EVENT_FORK | libc::PTRACE_EVENT_VFORK | libc::PTRACE_EVENT_CLONE) {
                let mut msg: libc::c_ulong = 0;
                unsafe {
                    libc::ptrace(libc::PTRACE_GETEVENTMSG, pid, std::ptr::null_mut::<libc::c_void>(), &mut msg as *mut _ as *mut libc::c_void);
                }
                tracees.entry(msg as libc::pid_t).or_default();
            }
            resume(pid, 0);
        } else if sig == libc::SIGSTOP && !t.seen_first_stop {
            t.seen_first_stop = true;
            resume(pid, 0);
        } else {
            t.seen_first_stop = true;
            resume(pid, sig);
        }
    }
    Ok((root_status.unwrap_or(0), events))
}

fn poll_known(tracees: &HashMap<libc::pid_t, Tracee>, status: &mut libc::c_int) -> Option<libc::pid_t> {
    for &pid in tracees.keys() {
        let r = unsafe { libc::waitpid(pid, status, libc::__WALL | libc::WNOHANG) };
        if r > 0 {
            return Some(r);
        }
    }
    None
}

fn on_syscall_stop(pid: libc::pid_t, t: &mut Tracee, events: &mut Vec<TraceEvent>) {
    let Some(r) = regs(pid) else {
        t.in_syscall = !t.in_syscall;
        return;
    };
    if !t.in_syscall {
        t.in_syscall = true;
        t.pending = classify(r.orig_rax).and_then(|(op, arg)| Some((op, syscall_path(pid, &r, arg)?)));
    } else {
        t.in_syscall = false;
        if let Some((op, p)) = t.pending.take() {
            let ret = r.rax as i64;
            let outcome = if (-4095..0).contains(&ret) { Outcome::Miss } else { Outcome::Hit };
            events.push(TraceEvent { op, path: p, outcome });
        }
    }
}
