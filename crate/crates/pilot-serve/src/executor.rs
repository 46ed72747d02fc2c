//! Turns placements into local OS processes: sandboxes, staging, bootstrap
//! bookkeeping and reaping.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use pilot_serve_core::{Endpoint, LifecycleState, Nanos, Placement, ServiceDescription, TaskDescription, TaskPayload};
use thiserror::Error;

use crate::env;
use crate::registry::{BootedInfo, Registry, RegistryError};

pub const DEFAULT_BOOT_TIMEOUT: Duration = Duration::from_secs(30);
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot spawn {uid}: {reason}")]
    SpawnFailure { uid: String, reason: String },
    #[error("{uid} did not boot within {after:?}")]
    BootTimeout { uid: String, after: Duration },
    #[error("{uid} exited before booting ({status})")]
    EarlyExit { uid: String, status: String },
    #[error("stage-in source {path} is missing or unreadable")]
    StagingError { path: PathBuf },
    #[error("{0} already has a process")]
    AlreadyLaunched(String),
    #[error("no process for {0}")]
    UnknownUid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    /// Parent directory of all sandboxes.
    pub sandbox_root: PathBuf,
    /// Executable started for services and client-workload tasks.
    pub program: PathBuf,
    pub boot_timeout: Duration,
    /// Synthetic delay before every service spawn, emulating launcher cost.
    pub launch_delay: Duration,
    /// Extra environment for every child.
    pub extra_env: Vec<(String, String)>,
}

impl ExecutorConfig {
    pub fn new(sandbox_root: impl Into<PathBuf>, program: impl Into<PathBuf>) -> Self {
        Self {
            sandbox_root: sandbox_root.into(),
            program: program.into(),
            boot_timeout: DEFAULT_BOOT_TIMEOUT,
            launch_delay: Duration::ZERO,
            extra_env: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxSpec {
    pub root: PathBuf,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
    pub staged: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ServiceLaunch {
    pub uid: String,
    pub pid: u32,
    pub t_spawn: Nanos,
    pub booted: BootedInfo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitRecord {
    pub uid: String,
    pub code: Option<i32>,
    pub signal: Option<i32>,
    pub state: LifecycleState,
}

impl ExitRecord {
    fn from_status(uid: &str, status: ExitStatus) -> Self {
        Self {
            uid: uid.to_string(),
            code: status.code(),
            signal: status.signal(),
            state: if status.success() {
                LifecycleState::Done
            } else {
                LifecycleState::Failed
            },
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct StageOutReport {
    pub copied: Vec<PathBuf>,
    pub missing: Vec<PathBuf>,
}

#[derive(Default)]
struct State {
    running: HashMap<String, Child>,
    sandboxes: HashMap<String, SandboxSpec>,
    /// Collected but not yet handed out by [`Executor::reap`].
    exited: Vec<ExitRecord>,
}

pub struct Executor {
    config: ExecutorConfig,
    registry: Arc<Registry>,
    registry_addr: String,
    state: Mutex<State>,
}

impl Executor {
    pub fn new(config: ExecutorConfig, registry: Arc<Registry>, registry_addr: impl Into<String>) -> Self {
        Self {
            config,
            registry,
            registry_addr: registry_addr.into(),
            state: Mutex::new(State::default()),
        }
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn sandbox(&self, uid: &str) -> Option<SandboxSpec> {
        self.lock().sandboxes.get(uid).cloned()
    }

    fn create_sandbox(&self, uid: &str) -> Result<SandboxSpec, ExecError> {
        let mut state = self.lock();
        if state.running.contains_key(uid) {
            return Err(ExecError::AlreadyLaunched(uid.to_string()));
        }
        let root = self.config.sandbox_root.join(uid);
        fs::create_dir_all(&root)?;
        let spec = SandboxSpec {
            stdout: root.join("stdout"),
            stderr: root.join("stderr"),
            root,
            staged: Vec::new(),
        };
        state.sandboxes.insert(uid.to_string(), spec.clone());
        Ok(spec)
    }

    fn base_command(&self, program: &Path, uid: &str, sandbox: &SandboxSpec) -> Result<Command, ExecError> {
        let mut cmd = Command::new(program);
        cmd.current_dir(&sandbox.root)
            .stdin(Stdio::null())
            .stdout(File::create(&sandbox.stdout)?)
            .stderr(File::create(&sandbox.stderr)?)
            .env(env::UID, uid)
            .env(env::REGISTRY, &self.registry_addr);
        for (k, v) in &self.config.extra_env {
            cmd.env(k, v);
        }
        Ok(cmd)
    }

    fn spawn(&self, uid: &str, mut cmd: Command) -> Result<u32, ExecError> {
        let child = cmd.spawn().map_err(|e| ExecError::SpawnFailure {
            uid: uid.to_string(),
            reason: e.to_string(),
        })?;
        let pid = child.id();
        self.lock().running.insert(uid.to_string(), child);
        Ok(pid)
    }

    /// Spawns the service process and blocks until it reports `booted`.
    pub fn launch_service(&self, placement: &Placement, desc: &ServiceDescription) -> Result<ServiceLaunch, ExecError> {
        let uid = desc.uid.as_str();
        let sandbox = self.create_sandbox(uid)?;
        let backend = serde_json::to_string(&desc.backend).map_err(|e| ExecError::SpawnFailure {
            uid: uid.to_string(),
            reason: e.to_string(),
        })?;
        let gpus = join_indices(&placement.gpu_indices);
        let mut cmd = self.base_command(&self.config.program, uid, &sandbox)?;
        cmd.arg("service").env(env::BACKEND, backend).env(env::GPUS, &gpus);

        self.registry.expect(uid);
        if !self.config.launch_delay.is_zero() {
            thread::sleep(self.config.launch_delay);
        }
        let t_spawn = self.registry.now();
        self.registry.note_spawn(uid, t_spawn);
        let pid = self.spawn(uid, cmd)?;
        debug!("spawned {uid} as pid {pid}");
        let booted = self.await_booted(uid)?;
        Ok(ServiceLaunch {
            uid: uid.to_string(),
            pid,
            t_spawn,
            booted,
        })
    }

    fn await_booted(&self, uid: &str) -> Result<BootedInfo, ExecError> {
        let deadline = Instant::now() + self.config.boot_timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                let _ = self.kill(uid);
                return Err(ExecError::BootTimeout {
                    uid: uid.to_string(),
                    after: self.config.boot_timeout,
                });
            }
            match self.registry.wait_booted(uid, (deadline - now).min(Duration::from_millis(100))) {
                Ok(info) => return Ok(info),
                Err(RegistryError::Timeout(_)) => {}
                Err(e) => {
                    return Err(ExecError::SpawnFailure {
                        uid: uid.to_string(),
                        reason: e.to_string(),
                    })
                }
            }
            if let Some(rec) = self.try_collect(uid)? {
                let status = match (rec.code, rec.signal) {
                    (Some(c), _) => format!("exit {c}"),
                    (None, Some(s)) => format!("signal {s}"),
                    _ => "unknown".into(),
                };
                return Err(ExecError::EarlyExit {
                    uid: uid.to_string(),
                    status,
                });
            }
        }
    }

    /// Stages inputs, then spawns the task with the endpoint map in its
    /// environment. Nothing is spawned if staging fails.
    pub fn launch_task(
        &self,
        placement: &Placement,
        desc: &TaskDescription,
        endpoints: &BTreeMap<String, Endpoint>,
    ) -> Result<u32, ExecError> {
        let uid = desc.uid.as_str();
        for s in &desc.stage_in {
            let src = Path::new(&s.source);
            if !src.is_file() {
                return Err(ExecError::StagingError { path: src.to_path_buf() });
            }
        }
        let mut sandbox = self.create_sandbox(uid)?;
        for s in &desc.stage_in {
            let dst = sandbox.root.join(&s.target);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::copy(&s.source, &dst).map_err(|_| ExecError::StagingError {
                path: PathBuf::from(&s.source),
            })?;
            sandbox.staged.push(dst);
        }
        self.lock().sandboxes.insert(uid.to_string(), sandbox.clone());

        let endpoints_json = serde_json::to_string(endpoints).map_err(|e| ExecError::SpawnFailure {
            uid: uid.to_string(),
            reason: e.to_string(),
        })?;
        let mut cmd = match &desc.payload {
            TaskPayload::Exec { program, args } => {
                let mut cmd = self.base_command(Path::new(program), uid, &sandbox)?;
                cmd.args(args);
                cmd
            }
            TaskPayload::ClientWorkload {
                requests,
                payload,
                max_in_flight,
            } => {
                let mut cmd = self.base_command(&self.config.program, uid, &sandbox)?;
                cmd.arg("client")
                    .args(["--requests", &requests.to_string()])
                    .args(["--payload", payload])
                    .args(["--max-in-flight", &max_in_flight.to_string()]);
                cmd
            }
        };
        cmd.env(env::GPUS, join_indices(&placement.gpu_indices))
            .env(env::ENDPOINTS, endpoints_json);
        self.spawn(uid, cmd)
    }

    /// Copies declared outputs out of the sandbox; destinations are
    /// overwritten. Missing outputs are listed, not fatal.
    pub fn stage_out(&self, uid: &str, desc: &TaskDescription) -> StageOutReport {
        let root = self
            .sandbox(uid)
            .map_or_else(|| self.config.sandbox_root.join(uid), |s| s.root);
        let mut report = StageOutReport::default();
        for s in &desc.stage_out {
            let src = root.join(&s.source);
            let dst = PathBuf::from(&s.destination);
            let copied = src.is_file()
                && dst.parent().map_or(Ok(()), |p| {
                    if p.as_os_str().is_empty() {
                        Ok(())
                    } else {
                        fs::create_dir_all(p)
                    }
                })
                .and_then(|()| fs::copy(&src, &dst))
                .is_ok();
            if copied {
                report.copied.push(dst);
            } else {
                report.missing.push(src);
            }
        }
        report
    }

    fn try_collect(&self, uid: &str) -> io::Result<Option<ExitRecord>> {
        let mut state = self.lock();
        let Some(child) = state.running.get_mut(uid) else {
            return Ok(state.exited.iter().find(|r| r.uid == uid).cloned());
        };
        match child.try_wait()? {
            Some(status) => {
                state.running.remove(uid);
                let rec = ExitRecord::from_status(uid, status);
                state.exited.push(rec.clone());
                Ok(Some(rec))
            }
            None => Ok(None),
        }
    }

    /// Collects every child that has exited since the last call. Each exit is
    /// returned exactly once.
    pub fn reap(&self) -> Vec<ExitRecord> {
        let mut state = self.lock();
        let mut finished = Vec::new();
        for (uid, child) in state.running.iter_mut() {
            match child.try_wait() {
                Ok(Some(status)) => finished.push(ExitRecord::from_status(uid, status)),
                Ok(None) => {}
                Err(e) => warn!("wait on {uid} failed: {e}"),
            }
        }
        for rec in &finished {
            state.running.remove(&rec.uid);
        }
        let mut out = std::mem::take(&mut state.exited);
        out.extend(finished);
        out
    }

    /// Blocks until `uid` exits or `timeout` passes; the exit is still
    /// reported by the next [`reap`](Self::reap).
    pub fn wait(&self, uid: &str, timeout: Duration) -> Result<Option<ExitRecord>, ExecError> {
        let deadline = Instant::now() + timeout;
        loop {
            {
                let state = self.lock();
                if !state.running.contains_key(uid) && !state.exited.iter().any(|r| r.uid == uid) {
                    return Err(ExecError::UnknownUid(uid.to_string()));
                }
            }
            if let Some(rec) = self.try_collect(uid)? {
                return Ok(Some(rec));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            thread::sleep(POLL);
        }
    }

    pub fn pid(&self, uid: &str) -> Option<u32> {
        self.lock().running.get(uid).map(Child::id)
    }

    pub fn running(&self) -> Vec<String> {
        let mut uids: Vec<String> = self.lock().running.keys().cloned().collect();
        uids.sort();
        uids
    }

    pub fn kill(&self, uid: &str) -> Result<(), ExecError> {
        let mut state = self.lock();
        let child = state
            .running
            .get_mut(uid)
            .ok_or_else(|| ExecError::UnknownUid(uid.to_string()))?;
        match child.kill() {
            Ok(()) => Ok(()),
            // Already exited; the next wait collects it.
            Err(e) if e.kind() == io::ErrorKind::InvalidInput => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Kills whatever is still running and waits for every child, so no
    /// zombies outlive the executor.
    pub fn close(&self) -> Vec<ExitRecord> {
        let mut state = self.lock();
        let mut out = std::mem::take(&mut state.exited);
        for (uid, mut child) in state.running.drain() {
            let _ = child.kill();
            match child.wait() {
                Ok(status) => out.push(ExitRecord::from_status(&uid, status)),
                Err(e) => warn!("wait on {uid} failed: {e}"),
            }
        }
        out
    }

    /// Removes the sandbox directory of `uid`.
    pub fn cleanup(&self, uid: &str) -> io::Result<()> {
        let spec = self.lock().sandboxes.remove(uid);
        match spec {
            Some(s) => fs::remove_dir_all(s.root),
            None => Ok(()),
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.close();
    }
}

fn join_indices(indices: &[u32]) -> String {
    indices.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}
