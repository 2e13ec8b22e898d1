use std::collections::VecDeque;
use std::io::Read;
use std::os::unix::process::ExitStatusExt;
use std::process::{Child, ExitStatus};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use nix::sys::signal::{kill, Signal};
use nix::unistd::Pid;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

/// Bytes of stdout and stderr kept per child.
pub const OUTPUT_RING_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum ProcState {
    Running,
    Exited { code: i32 },
    /// Terminated by a signal.
    Killed { signal: i32 },
}

impl ProcState {
    pub fn is_running(self) -> bool {
        self == ProcState::Running
    }

    fn from_status(status: ExitStatus) -> ProcState {
        match (status.code(), status.signal()) {
            (Some(code), _) => ProcState::Exited { code },
            (None, Some(signal)) => ProcState::Killed { signal },
            (None, None) => ProcState::Exited { code: -1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInfo {
    pub id: u64,
    pub pid: u32,
    pub name: String,
    pub package: String,
    pub node: String,
    #[serde(flatten)]
    pub state: ProcState,
}

#[derive(Default)]
struct Ring {
    bytes: VecDeque<u8>,
}

impl Ring {
    fn push(&mut self, chunk: &[u8]) {
        self.bytes.extend(chunk);
        let excess = self.bytes.len().saturating_sub(OUTPUT_RING_BYTES);
        self.bytes.drain(..excess);
    }

    fn text(&self) -> String {
        let (a, b) = self.bytes.as_slices();
        String::from_utf8_lossy(&[a, b].concat()).into_owned()
    }
}

pub(super) struct ProcInner {
    pub(super) id: u64,
    pub(super) pid: u32,
    pub(super) name: String,
    pub(super) package: String,
    pub(super) node: String,
    state: Mutex<ProcState>,
    changed: Condvar,
    stop_lock: Mutex<()>,
    stdout: Mutex<Ring>,
    stderr: Mutex<Ring>,
}

/// A spawned child. Cheap to clone; every clone observes the same state.
#[derive(Clone)]
pub struct ProcessHandle {
    pub(super) inner: Arc<ProcInner>,
}

impl std::fmt::Debug for ProcessHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessHandle").field("name", &self.inner.name).field("pid", &self.inner.pid).finish()
    }
}

fn pump(mut from: impl Read, inner: Arc<ProcInner>, stderr: bool) {
    let mut buf = [0u8; 4096];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let ring = if stderr { &inner.stderr } else { &inner.stdout };
                ring.lock().push(&buf[..n]);
            }
        }
    }
}

impl ProcessHandle {
    /// Take ownership of `child` and start watching it. `on_exit` runs
    /// on the monitor thread once the child has been reaped.
    pub(super) fn watch(
        mut child: Child,
        id: u64,
        name: &str,
        package: &str,
        node: &str,
        on_exit: impl FnOnce(&ProcessHandle) + Send + 'static,
    ) -> ProcessHandle {
        let inner = Arc::new(ProcInner {
            id,
            pid: child.id(),
            name: name.to_string(),
            package: package.to_string(),
            node: node.to_string(),
            state: Mutex::new(ProcState::Running),
            changed: Condvar::new(),
            stop_lock: Mutex::new(()),
            stdout: Mutex::default(),
            stderr: Mutex::default(),
        });
        let mut pumps = Vec::new();
        if let Some(out) = child.stdout.take() {
            let i = inner.clone();
            pumps.push(thread::spawn(move || pump(out, i, false)));
        }
        if let Some(err) = child.stderr.take() {
            let i = inner.clone();
            pumps.push(thread::spawn(move || pump(err, i, true)));
        }
        let handle = ProcessHandle { inner };
        let h = handle.clone();
        let monitor = thread::Builder::new().name(format!("nw-proc-{id}")).spawn(move || {
            let state = match child.wait() {
                Ok(status) => ProcState::from_status(status),
                Err(_) => ProcState::Exited { code: -1 },
            };
            // Let the pumps finish reading what the child wrote last, but
            // do not wait on grandchildren that inherited the pipes.
            let deadline = Instant::now() + Duration::from_millis(200);
            for p in pumps {
                while !p.is_finished() && Instant::now() < deadline {
                    thread::sleep(Duration::from_millis(5));
                }
            }
            *h.inner.state.lock() = state;
            h.inner.changed.notify_all();
            on_exit(&h);
        });
        if let Err(e) = monitor {
            log::error!("cannot start process monitor: {e}");
        }
        handle
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn pid(&self) -> u32 {
        self.inner.pid
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn package(&self) -> &str {
        &self.inner.package
    }

    pub fn node(&self) -> &str {
        &self.inner.node
    }

    pub fn state(&self) -> ProcState {
        *self.inner.state.lock()
    }

    pub fn info(&self) -> ProcessInfo {
        ProcessInfo {
            id: self.inner.id,
            pid: self.inner.pid,
            name: self.inner.name.clone(),
            package: self.inner.package.clone(),
            node: self.inner.node.clone(),
            state: self.state(),
        }
    }

    pub fn stdout(&self) -> String {
        self.inner.stdout.lock().text()
    }

    pub fn stderr(&self) -> String {
        self.inner.stderr.lock().text()
    }

    /// Wait until the child is no longer running; `None` on timeout.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<ProcState> {
        let deadline = Instant::now() + timeout;
        let mut state = self.inner.state.lock();
        while state.is_running() {
            if self.inner.changed.wait_until(&mut state, deadline).timed_out() {
                return (!state.is_running()).then_some(*state);
            }
        }
        Some(*state)
    }

    fn signal(&self, sig: Signal) {
        let state = self.inner.state.lock();
        if state.is_running() {
            let _ = kill(Pid::from_raw(self.inner.pid as i32), sig);
        }
    }

    /// SIGTERM, then SIGKILL once `grace` has passed. Stopping a child
    /// that already ended returns its recorded state.
    pub fn stop(&self, grace: Duration) -> ProcState {
        let _serial = self.inner.stop_lock.lock();
        if let Some(s) = self.wait_timeout(Duration::ZERO) {
            return s;
        }
        self.signal(Signal::SIGTERM);
        if let Some(s) = self.wait_timeout(grace) {
            return s;
        }
        self.signal(Signal::SIGKILL);
        self.wait_timeout(Duration::from_secs(5)).unwrap_or_else(|| self.state())
    }
}
