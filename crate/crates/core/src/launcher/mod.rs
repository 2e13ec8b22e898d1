//! Package lookup and supervision of spawned node processes.

mod process;
mod registry;

use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

pub use process::{ProcState, ProcessHandle, ProcessInfo, OUTPUT_RING_BYTES};
pub use registry::{parse_manifest, Package, PackageRegistry, MANIFEST_FILE, PACKAGE_PATH_ENV};

use crate::bus::{Client, TopicName, BROKER_URI_ENV};

pub const NODE_NAME_ENV: &str = "NW_NODE_NAME";
pub const HELLO_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LaunchError {
    #[error("no package `{0}` on the package path")]
    NoSuchPackage(String),
    #[error("no node `{0}`")]
    NoSuchNode(String),
    #[error("cannot spawn: {0}")]
    SpawnFailure(String),
    #[error("launch failed: {0}")]
    LaunchFailure(String),
}

/// What to start and how to wire it.
#[derive(Debug, Clone)]
pub struct SpawnRequest {
    pub path: PathBuf,
    /// Name the child registers under.
    pub name: String,
    pub package: String,
    pub node: String,
    pub aliases: Vec<(TopicName, TopicName)>,
    pub broker_uri: String,
    pub args: Vec<String>,
    /// Extra environment on top of the inherited one.
    pub env: Vec<(String, String)>,
}

type SpawnJob = (Command, mpsc::Sender<std::io::Result<Child>>);

/// All children are forked from one long-lived thread: the parent-death
/// signal fires when the forking *thread* exits, so forking from short
/// lived request threads would kill children early.
fn spawn_on_keeper(cmd: Command) -> std::io::Result<Child> {
    static KEEPER: OnceLock<Mutex<mpsc::Sender<SpawnJob>>> = OnceLock::new();
    let tx = KEEPER.get_or_init(|| {
        let (tx, rx) = mpsc::channel::<SpawnJob>();
        thread::Builder::new()
            .name("nw-spawner".into())
            .spawn(move || {
                for (mut cmd, reply) in rx {
                    let _ = reply.send(cmd.spawn());
                }
            })
            .expect("spawner thread");
        Mutex::new(tx)
    });
    let (reply_tx, reply_rx) = mpsc::channel();
    tx.lock().send((cmd, reply_tx)).map_err(|_| std::io::Error::other("spawner thread is gone"))?;
    reply_rx.recv().map_err(|_| std::io::Error::other("spawner thread is gone"))?
}

type ExitListener = Arc<dyn Fn(&ProcessInfo) + Send + Sync>;

struct LauncherInner {
    registry: RwLock<PackageRegistry>,
    children: Mutex<Vec<ProcessHandle>>,
    listeners: RwLock<Vec<ExitListener>>,
    next_id: AtomicU64,
    hello_timeout: Duration,
}

/// Spawns and tracks node processes. Dropping the last clone stops every
/// child it started.
#[derive(Clone)]
pub struct Launcher {
    inner: Arc<LauncherInner>,
}

impl Launcher {
    pub fn new(registry: PackageRegistry) -> Launcher {
        Launcher::with_hello_timeout(registry, HELLO_TIMEOUT)
    }

    pub fn with_hello_timeout(registry: PackageRegistry, hello_timeout: Duration) -> Launcher {
        Launcher {
            inner: Arc::new(LauncherInner {
                registry: RwLock::new(registry),
                children: Mutex::default(),
                listeners: RwLock::default(),
                next_id: AtomicU64::new(1),
                hello_timeout,
            }),
        }
    }

    pub fn from_env() -> Launcher {
        Launcher::new(PackageRegistry::from_env())
    }

    pub fn registry(&self) -> PackageRegistry {
        self.inner.registry.read().clone()
    }

    /// Resolve against the registry, rescanning the roots once on a miss
    /// so packages installed after startup are found.
    pub fn resolve(&self, package: &str, node: &str) -> Result<PathBuf, LaunchError> {
        if let Ok(p) = self.inner.registry.read().resolve(package, node) {
            return Ok(p);
        }
        let fresh = self.inner.registry.read().rescan();
        let r = fresh.resolve(package, node);
        *self.inner.registry.write() = fresh;
        r
    }

    /// Call `f` whenever a child ends, however it ends.
    pub fn on_exit(&self, f: impl Fn(&ProcessInfo) + Send + Sync + 'static) {
        self.inner.listeners.write().push(Arc::new(f));
    }

    /// Start a child and wait until `observer` sees it in the graph.
    pub fn spawn(&self, req: &SpawnRequest, observer: &Client) -> Result<ProcessHandle, LaunchError> {
        let handle = self.spawn_unchecked(req)?;
        match wait_for_hello(&handle, observer, self.inner.hello_timeout) {
            Ok(()) => Ok(handle),
            Err(e) => {
                handle.stop(Duration::ZERO);
                Err(e)
            }
        }
    }

    /// Start a child without waiting for it to join the broker.
    pub fn spawn_unchecked(&self, req: &SpawnRequest) -> Result<ProcessHandle, LaunchError> {
        let mut cmd = Command::new(&req.path);
        for (ext, int) in &req.aliases {
            cmd.arg("--alias").arg(format!("{ext}={int}"));
        }
        cmd.args(&req.args)
            .env(BROKER_URI_ENV, &req.broker_uri)
            .env(NODE_NAME_ENV, &req.name)
            .envs(req.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: the closure only calls prctl, which is async-signal-safe.
        unsafe {
            cmd.pre_exec(|| {
                nix::sys::prctl::set_pdeathsig(nix::sys::signal::Signal::SIGKILL).map_err(std::io::Error::from)
            });
        }
        let child = spawn_on_keeper(cmd).map_err(|e| spawn_failure(&req.path, e))?;
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let weak = Arc::downgrade(&self.inner);
        let handle = ProcessHandle::watch(child, id, &req.name, &req.package, &req.node, move |h| {
            let info = h.info();
            match info.state {
                ProcState::Exited { code: 0 } => log::info!("process {} (pid {}) exited", info.name, info.pid),
                _ => log::warn!("process {} (pid {}) ended: {:?}", info.name, info.pid, info.state),
            }
            if let Some(inner) = weak.upgrade() {
                let listeners = inner.listeners.read().clone();
                for l in listeners {
                    l(&info);
                }
            }
        });
        self.inner.children.lock().push(handle.clone());
        Ok(handle)
    }

    pub fn processes(&self) -> Vec<ProcessHandle> {
        self.inner.children.lock().clone()
    }

    /// Most recent process registered under `name`.
    pub fn find(&self, name: &str) -> Option<ProcessHandle> {
        self.inner.children.lock().iter().rev().find(|h| h.name() == name).cloned()
    }

    /// Stop every child that is still running.
    pub fn shutdown(&self) {
        let children = self.processes();
        let stoppers: Vec<_> = children
            .into_iter()
            .filter(|h| h.state().is_running())
            .map(|h| thread::spawn(move || h.stop(DEFAULT_GRACE)))
            .collect();
        for s in stoppers {
            let _ = s.join();
        }
    }
}

impl Drop for LauncherInner {
    fn drop(&mut self) {
        for h in self.children.get_mut().iter() {
            h.stop(DEFAULT_GRACE);
        }
    }
}

fn spawn_failure(path: &Path, e: std::io::Error) -> LaunchError {
    LaunchError::SpawnFailure(format!("{}: {e}", path.display()))
}

fn wait_for_hello(handle: &ProcessHandle, observer: &Client, timeout: Duration) -> Result<(), LaunchError> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(state) = handle.wait_timeout(Duration::ZERO) {
            let tail: String = {
                let err = handle.stderr();
                let start = err.len().saturating_sub(400);
                err.get(start..).unwrap_or("").trim().to_string()
            };
            return Err(LaunchError::LaunchFailure(format!("{} ended before joining the broker ({state:?}): {tail}", handle.name())));
        }
        if let Ok(snap) = observer.snapshot() {
            if snap.node(handle.name()).is_some_and(|n| n.pid.is_none_or(|p| p == handle.pid())) {
                return Ok(());
            }
        }
        if Instant::now() >= deadline {
            return Err(LaunchError::LaunchFailure(format!(
                "{} did not join the broker within {:.1} s",
                handle.name(),
                timeout.as_secs_f64()
            )));
        }
        thread::sleep(Duration::from_millis(20));
    }
}
