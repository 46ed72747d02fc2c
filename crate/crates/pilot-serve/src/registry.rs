//! Endpoint registry: publishing, lookup, readiness waits, heartbeat
//! liveness, bootstrap instants and control-command dispatch.
//!
//! One registry lives in the managing process. Services reach it over the
//! same framed protocol they serve inference on (see [`RegistryServer`]);
//! in-process callers use [`Registry`] directly. All state sits behind one
//! mutex, so every operation is linearizable.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use pilot_serve_core::wire::{ControlCommand, ErrorCode, Message};
use pilot_serve_core::{BootstrapRecord, Endpoint, Nanos};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, MonotonicClock};
use crate::net::{self, WireIoError};

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub heartbeat_interval: Duration,
    /// Missed intervals after which a service is declared dead.
    pub miss_threshold: u32,
    pub control_timeout: Duration,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_secs(1),
            miss_threshold: 3,
            control_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LivenessStatus {
    Alive,
    Suspect,
    Dead,
}

impl LivenessStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Alive => "alive",
            Self::Suspect => "suspect",
            Self::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessRecord {
    pub service_uid: String,
    pub last_heartbeat_at: Nanos,
    pub missed: u32,
    pub status: LivenessStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadinessReport {
    pub ready: Vec<String>,
    pub pending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootedInfo {
    pub t_booted: Nanos,
    /// GPU indices as echoed back by the child.
    pub gpus: String,
    pub pid: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlResult {
    pub cmd: ControlCommand,
    /// Service clock at acknowledgment.
    pub t_svc: Nanos,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("no endpoint registered for {0}")]
    NotFound(String),
    #[error("service {0} missed too many heartbeats")]
    ServiceDead(String),
    #[error("timed out; still pending: {:?}", .0.pending)]
    Timeout(ReadinessReport),
    #[error("invalid endpoint for {uid}: {reason}")]
    InvalidEndpoint { uid: String, reason: String },
    #[error("control channel to {uid} failed: {reason}")]
    Unreachable { uid: String, reason: String },
    #[error("service {uid} rejected control: {reason}")]
    Rejected { uid: String, reason: String },
}

impl RegistryError {
    pub fn timeout_for(uid: &str) -> Self {
        Self::Timeout(ReadinessReport {
            ready: Vec::new(),
            pending: vec![uid.to_string()],
        })
    }
}

#[derive(Debug, Default)]
struct Entry {
    endpoint: Option<Endpoint>,
    last_heartbeat_at: Nanos,
    last_seq: u64,
    dead: bool,
    t_spawn: Option<Nanos>,
    booted: Option<BootedInfo>,
    t_initialized: Option<Nanos>,
    t_published: Option<Nanos>,
}

pub struct Registry {
    config: RegistryConfig,
    clock: Arc<dyn Clock>,
    entries: Mutex<HashMap<String, Entry>>,
    changed: Condvar,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Self::with_clock(config, Arc::new(MonotonicClock))
    }

    pub fn with_clock(config: RegistryConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            clock,
            entries: Mutex::new(HashMap::new()),
            changed: Condvar::new(),
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    fn lock(&self) -> MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Declares `uid` as submitted to this session; only expected services
    /// may register.
    pub fn expect(&self, uid: &str) {
        self.lock().entry(uid.to_string()).or_default();
    }

    pub fn is_expected(&self, uid: &str) -> bool {
        self.lock().contains_key(uid)
    }

    fn missed(&self, entry: &mut Entry, now: Nanos) -> u32 {
        let interval = self.config.heartbeat_interval.as_nanos().max(1) as u64;
        let missed = (now.saturating_sub(entry.last_heartbeat_at) / interval).min(u64::from(u32::MAX)) as u32;
        if missed >= self.config.miss_threshold {
            entry.dead = true;
        }
        if entry.dead {
            missed.max(self.config.miss_threshold)
        } else {
            missed
        }
    }

    fn status(&self, entry: &mut Entry, now: Nanos) -> (u32, LivenessStatus) {
        let missed = self.missed(entry, now);
        let status = if entry.dead {
            LivenessStatus::Dead
        } else if missed == 0 {
            LivenessStatus::Alive
        } else {
            LivenessStatus::Suspect
        };
        (missed, status)
    }

    /// Publishes (or replaces) an endpoint and releases readiness waiters.
    pub fn register(&self, mut ep: Endpoint) -> Result<Endpoint, RegistryError> {
        ep.validate().map_err(|e| RegistryError::InvalidEndpoint {
            uid: ep.service_uid.clone(),
            reason: e.to_string(),
        })?;
        let mut entries = self.lock();
        let entry = entries
            .get_mut(&ep.service_uid)
            .ok_or_else(|| RegistryError::UnknownService(ep.service_uid.clone()))?;
        let now = self.clock.now();
        ep.registered_at = now;
        entry.endpoint = Some(ep.clone());
        entry.last_heartbeat_at = now;
        entry.last_seq = 0;
        entry.dead = false;
        entry.t_published = Some(self.clock.now());
        self.changed.notify_all();
        debug!("registered {} at {}", ep.service_uid, ep.address());
        Ok(ep)
    }

    pub fn lookup(&self, uid: &str) -> Result<Endpoint, RegistryError> {
        let mut entries = self.lock();
        let now = self.clock.now();
        let entry = entries
            .get_mut(uid)
            .filter(|e| e.endpoint.is_some())
            .ok_or_else(|| RegistryError::NotFound(uid.to_string()))?;
        if self.status(entry, now).1 == LivenessStatus::Dead {
            return Err(RegistryError::ServiceDead(uid.to_string()));
        }
        Ok(entry.endpoint.clone().expect("filtered above"))
    }

    /// Registered endpoints, live or not, ordered by uid.
    pub fn endpoints(&self) -> Vec<Endpoint> {
        let mut eps: Vec<Endpoint> = self.lock().values().filter_map(|e| e.endpoint.clone()).collect();
        eps.sort_by(|a, b| a.service_uid.cmp(&b.service_uid));
        eps
    }

    /// Blocks until every uid has an endpoint or `timeout` elapses.
    pub fn wait_ready(&self, uids: &[String], timeout: Duration) -> Result<ReadinessReport, RegistryError> {
        let deadline = Instant::now() + timeout;
        let mut entries = self.lock();
        if let Some(unknown) = uids.iter().find(|u| !entries.contains_key(*u)) {
            return Err(RegistryError::UnknownService(unknown.clone()));
        }
        loop {
            let (ready, pending): (Vec<String>, Vec<String>) = uids
                .iter()
                .cloned()
                .partition(|u| entries.get(u).is_some_and(|e| e.endpoint.is_some()));
            let report = ReadinessReport { ready, pending };
            if report.pending.is_empty() {
                return Ok(report);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(RegistryError::Timeout(report));
            }
            entries = self
                .changed
                .wait_timeout(entries, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Stale sequence numbers are ignored. A dead service stays dead until it
    /// registers again.
    pub fn heartbeat(&self, uid: &str, seq: u64) -> Result<LivenessStatus, RegistryError> {
        let mut entries = self.lock();
        let now = self.clock.now();
        let entry = entries
            .get_mut(uid)
            .filter(|e| e.endpoint.is_some())
            .ok_or_else(|| RegistryError::UnknownService(uid.to_string()))?;
        let (_, status) = self.status(entry, now);
        if status == LivenessStatus::Dead || seq <= entry.last_seq {
            return Ok(status);
        }
        entry.last_seq = seq;
        entry.last_heartbeat_at = now;
        Ok(LivenessStatus::Alive)
    }

    pub fn liveness(&self, uid: &str) -> Option<LivenessRecord> {
        let mut entries = self.lock();
        let now = self.clock.now();
        let entry = entries.get_mut(uid).filter(|e| e.endpoint.is_some())?;
        let (missed, status) = self.status(entry, now);
        Some(LivenessRecord {
            service_uid: uid.to_string(),
            last_heartbeat_at: entry.last_heartbeat_at,
            missed,
            status,
        })
    }

    pub fn note_spawn(&self, uid: &str, t_spawn: Nanos) {
        self.lock().entry(uid.to_string()).or_default().t_spawn = Some(t_spawn);
    }

    pub fn note_booted(&self, uid: &str, gpus: String, pid: u32) -> Result<(), RegistryError> {
        let mut entries = self.lock();
        let entry = entries
            .get_mut(uid)
            .ok_or_else(|| RegistryError::UnknownService(uid.to_string()))?;
        entry.booted = Some(BootedInfo {
            t_booted: self.clock.now(),
            gpus,
            pid,
        });
        self.changed.notify_all();
        Ok(())
    }

    pub fn note_initialized(&self, uid: &str) -> Result<(), RegistryError> {
        let mut entries = self.lock();
        let entry = entries
            .get_mut(uid)
            .ok_or_else(|| RegistryError::UnknownService(uid.to_string()))?;
        entry.t_initialized = Some(self.clock.now());
        Ok(())
    }

    pub fn wait_booted(&self, uid: &str, timeout: Duration) -> Result<BootedInfo, RegistryError> {
        let deadline = Instant::now() + timeout;
        let mut entries = self.lock();
        loop {
            match entries.get(uid) {
                None => return Err(RegistryError::UnknownService(uid.to_string())),
                Some(Entry { booted: Some(b), .. }) => return Ok(b.clone()),
                Some(_) => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(RegistryError::timeout_for(uid));
            }
            entries = self
                .changed
                .wait_timeout(entries, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Complete record once spawn, boot, init and publish were all observed.
    pub fn bootstrap_record(&self, uid: &str) -> Option<BootstrapRecord> {
        let entries = self.lock();
        let e = entries.get(uid)?;
        Some(BootstrapRecord {
            service_uid: uid.to_string(),
            t_spawn: e.t_spawn?,
            t_booted: e.booted.as_ref()?.t_booted,
            t_initialized: e.t_initialized?,
            t_published: e.t_published?,
        })
    }

    /// Sends `cmd` to the service's own port and waits for its acknowledgment.
    pub fn send_control(
        &self,
        uid: &str,
        cmd: ControlCommand,
        grace: Option<Duration>,
    ) -> Result<ControlResult, RegistryError> {
        let ep = self.lookup(uid)?;
        let unreachable = |reason: String| RegistryError::Unreachable {
            uid: uid.to_string(),
            reason,
        };
        let timeout = self.config.control_timeout;
        let mut stream = net::connect(&ep.address(), timeout).map_err(|e| unreachable(e.to_string()))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| unreachable(e.to_string()))?;
        let msg = Message::Control {
            uid: uid.to_string(),
            cmd,
            grace_ms: grace.map(|g| g.as_millis() as u64),
        };
        match net::call(&mut stream, &msg) {
            Ok(Message::ControlAck { cmd, t_svc, .. }) => Ok(ControlResult { cmd, t_svc }),
            Ok(Message::Error { message, .. }) => Err(RegistryError::Rejected {
                uid: uid.to_string(),
                reason: message,
            }),
            Ok(other) => Err(unreachable(format!("unexpected reply {other:?}"))),
            Err(e) if e.is_timeout() => Err(RegistryError::timeout_for(uid)),
            Err(e) => Err(unreachable(e.to_string())),
        }
    }

    /// Answers one wire message addressed to the registry.
    pub fn handle(&self, msg: Message) -> Message {
        let result = match msg {
            Message::Booted { uid, gpus, pid } => self.note_booted(&uid, gpus, pid).map(|_| ack(uid, None)),
            Message::Initialized { uid } => self.note_initialized(&uid).map(|_| ack(uid, None)),
            Message::Register { uid, host, port, pv } => {
                let ep = Endpoint {
                    service_uid: uid.clone(),
                    host,
                    port,
                    protocol_version: pv,
                    registered_at: 0,
                };
                self.register(ep).map(|_| ack(uid, None))
            }
            Message::Heartbeat { uid, seq } => self
                .heartbeat(&uid, seq)
                .map(|status| ack(uid, Some(status.as_str().to_string()))),
            Message::Lookup { uid } => self.lookup(&uid).map(|ep| Message::Endpoint {
                uid: ep.service_uid,
                host: ep.host,
                port: ep.port,
                pv: ep.protocol_version,
                registered_at: ep.registered_at,
            }),
            Message::Control { uid, cmd, grace_ms } => self
                .send_control(&uid, cmd, grace_ms.map(Duration::from_millis))
                .map(|r| Message::ControlAck {
                    uid,
                    cmd: r.cmd,
                    t_svc: r.t_svc,
                }),
            other => {
                return Message::error(ErrorCode::Protocol, format!("registry cannot handle {other:?}"));
            }
        };
        result.unwrap_or_else(|e| Message::error(error_code(&e), e.to_string()))
    }
}

fn ack(uid: String, status: Option<String>) -> Message {
    Message::Ack { uid, status }
}

fn error_code(e: &RegistryError) -> ErrorCode {
    match e {
        RegistryError::UnknownService(_) => ErrorCode::UnknownService,
        RegistryError::NotFound(_) => ErrorCode::NotFound,
        RegistryError::ServiceDead(_) => ErrorCode::ServiceDead,
        RegistryError::Timeout(_) => ErrorCode::Timeout,
        RegistryError::InvalidEndpoint { .. } => ErrorCode::Protocol,
        RegistryError::Unreachable { .. } | RegistryError::Rejected { .. } => ErrorCode::Internal,
    }
}

/// TCP front end for a [`Registry`]; one thread per connection.
pub struct RegistryServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl RegistryServer {
    pub fn start(registry: Arc<Registry>, bind: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let accept = thread::Builder::new()
            .name("registry-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let registry = Arc::clone(&registry);
                            let _ = thread::Builder::new()
                                .name("registry-conn".into())
                                .spawn(move || serve_connection(&registry, stream));
                        }
                        Err(e) => warn!("registry accept failed: {e}"),
                    }
                }
            })?;
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` form handed to children.
    pub fn address(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(registry: &Registry, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    loop {
        let reply = match net::read_message(&mut stream) {
            Ok(msg) => registry.handle(msg),
            Err(WireIoError::Closed) => return,
            Err(WireIoError::Malformed(m)) => Message::error(ErrorCode::Protocol, m),
            Err(e) => {
                let _ = net::write_message(&mut stream, &Message::error(ErrorCode::Protocol, e.to_string()));
                return;
            }
        };
        if net::write_message(&mut stream, &reply).is_err() {
            return;
        }
    }
}
