//! Subprocess execution with a wall-clock deadline and process-group cleanup.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const POLL: Duration = Duration::from_millis(5);
/// How long to wait for output pipes to close after the group was killed.
const DRAIN_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct ProcessOutcome {
    /// Exit code, `None` when killed by a signal.
    pub status: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub timed_out: bool,
    pub elapsed: Duration,
}

impl ProcessOutcome {
    pub fn success(&self) -> bool {
        !self.timed_out && self.status == Some(0)
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub env: Vec<(String, String)>,
}

/// Returns the `unshare` binary if unprivileged network namespaces work here.
pub fn network_isolation() -> Option<&'static Path> {
    static PROBE: OnceLock<Option<PathBuf>> = OnceLock::new();
    PROBE
        .get_or_init(|| {
            let bin = which("unshare")?;
            let ok = Command::new(&bin)
                .args(["--net", "--map-root-user", "true"])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .map(|s| s.success())
                .unwrap_or(false);
            if !ok {
                log::warn!("network namespaces unavailable; sandboxed renders keep network access");
            }
            ok.then_some(bin)
        })
        .as_deref()
}

/// Looks a program up on PATH (absolute or relative paths are checked as-is).
pub fn which(program: &str) -> Option<PathBuf> {
    let candidate = Path::new(program);
    if candidate.components().count() > 1 {
        return is_executable(candidate).then(|| candidate.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| is_executable(p))
    })
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    p.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

/// Runs `inv` in its own process group. At `deadline` the whole group is
/// killed; it is also killed after a normal exit so no stray descendants
/// outlive the call.
pub fn run(
    inv: &Invocation,
    deadline: Instant,
    max_output_bytes: usize,
    isolate_network: bool,
) -> std::io::Result<ProcessOutcome> {
    if let Some(unshare) = isolate_network.then(network_isolation).flatten() {
        let mut c = Command::new(unshare);
        c.args(["--net", "--map-root-user", "--"]).arg(&inv.program);
        let out = run_command(c, inv, deadline, max_output_bytes)?;
        // unshare could not exec the program inside the namespace (typically
        // a path the mapped user cannot reach); the program never started.
        let exec_failed =
            matches!(out.status, Some(126 | 127)) && out.stderr.starts_with(b"unshare: ");
        if !exec_failed {
            return Ok(out);
        }
        static WARNED: AtomicBool = AtomicBool::new(false);
        let level = if WARNED.swap(true, Ordering::Relaxed) {
            log::Level::Debug
        } else {
            log::Level::Warn
        };
        log::log!(
            level,
            "cannot isolate {} from the network: {}",
            inv.program.display(),
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    run_command(Command::new(&inv.program), inv, deadline, max_output_bytes)
}

fn run_command(
    mut cmd: Command,
    inv: &Invocation,
    deadline: Instant,
    max_output_bytes: usize,
) -> std::io::Result<ProcessOutcome> {
    let started = Instant::now();
    cmd.args(&inv.args)
        .current_dir(&inv.cwd)
        .envs(inv.env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let mut child = cmd.spawn()?;
    let pgid = child.id() as libc::pid_t;

    let (tx, rx) = mpsc::channel();
    let readers = [
        child
            .stdout
            .take()
            .map(|s| Box::new(s) as Box<dyn Read + Send>),
        child
            .stderr
            .take()
            .map(|s| Box::new(s) as Box<dyn Read + Send>),
    ];
    for (idx, pipe) in readers.into_iter().enumerate() {
        if let Some(pipe) = pipe {
            let tx = tx.clone();
            std::thread::spawn(move || {
                let _ = tx.send((idx, read_capped(pipe, max_output_bytes)));
            });
        }
    }
    drop(tx);

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(pgid);
            break child.wait()?;
        }
        std::thread::sleep(POLL.min(deadline.saturating_duration_since(Instant::now())));
    };
    kill_group(pgid);

    let mut outputs = [Vec::new(), Vec::new()];
    let drain_until = Instant::now() + DRAIN_GRACE;
    for _ in 0..2 {
        match rx.recv_timeout(drain_until.saturating_duration_since(Instant::now())) {
            Ok((idx, buf)) => outputs[idx] = buf,
            Err(_) => break,
        }
    }
    let [stdout, stderr] = outputs;
    Ok(ProcessOutcome {
        status: status.code(),
        stdout,
        stderr,
        timed_out,
        elapsed: started.elapsed(),
    })
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: plain syscall; ESRCH (group already gone) is expected and ignored.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn read_capped(mut pipe: impl Read, cap: usize) -> Vec<u8> {
    let mut kept = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        match pipe.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
    kept
}
