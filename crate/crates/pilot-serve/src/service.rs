//! The service process: boots, initializes its backend, publishes its
//! endpoint and then serves inference requests.
//!
//! Frames are accepted concurrently (one reader thread per connection) but
//! executed by a single worker in strict arrival order. Arrival is stamped
//! while holding the queue lock, so queue order always equals `t_svc_recv`
//! order. Control frames (`ping`, `stop`) bypass the queue.

use std::collections::VecDeque;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use pilot_serve_core::frame::FrameError;
use pilot_serve_core::wire::{
    self, encode_reply_frame, ControlCommand, ErrorCode, Message, ReplyHead, ReplyStatus,
    PROTOCOL_VERSION,
};
use pilot_serve_core::{BackendSpec, Nanos};
use thiserror::Error;

use crate::backend::{self, Backend};
use crate::clock::{now_ns, tighten_timer_slack};
use crate::env;
use crate::net::{self, WireIoError};

pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;
pub const DEFAULT_STOP_GRACE: Duration = Duration::from_secs(5);
const REGISTRY_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("bad {name}: {reason}")]
    BadEnv { name: &'static str, reason: String },
    #[error("registration failed: {0}")]
    RegistrationFailure(String),
    #[error("backend init failed: {0}")]
    InitFailure(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServiceError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingEnv(_) | Self::BadEnv { .. } => 64,
            Self::RegistrationFailure(_) => 2,
            Self::InitFailure(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Drained and stopped within the grace period.
    Clean,
    /// The worker was still busy when the grace period ran out.
    Forced,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Clean => 0,
            Self::Forced => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub uid: String,
    pub backend: BackendSpec,
    /// Registry `host:port`.
    pub registry: String,
    /// Comma-separated GPU indices assigned by the scheduler.
    pub gpus: String,
    pub heartbeat_interval: Duration,
    pub queue_capacity: usize,
    /// Interface to bind and advertise.
    pub host: String,
}

impl ServiceConfig {
    pub fn new(uid: impl Into<String>, backend: BackendSpec, registry: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            backend,
            registry: registry.into(),
            gpus: String::new(),
            heartbeat_interval: Duration::from_secs(1),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            host: "127.0.0.1".into(),
        }
    }

    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let need = |k: &'static str| get(k).ok_or(ServiceError::MissingEnv(k));
        let backend: BackendSpec = serde_json::from_str(&need(env::BACKEND)?).map_err(|e| ServiceError::BadEnv {
            name: env::BACKEND,
            reason: e.to_string(),
        })?;
        backend.validate().map_err(|e| ServiceError::BadEnv {
            name: env::BACKEND,
            reason: e.to_string(),
        })?;
        let mut cfg = Self::new(need(env::UID)?, backend, need(env::REGISTRY)?);
        cfg.gpus = get(env::GPUS).unwrap_or_default();
        if let Some(ms) = get(env::HEARTBEAT_MS) {
            let ms: u64 = ms.parse().map_err(|_| ServiceError::BadEnv {
                name: env::HEARTBEAT_MS,
                reason: format!("{ms:?} is not an integer"),
            })?;
            cfg.heartbeat_interval = Duration::from_millis(ms.max(1));
        }
        if let Some(cap) = get(env::QUEUE_CAP) {
            cfg.queue_capacity = cap.parse().map_err(|_| ServiceError::BadEnv {
                name: env::QUEUE_CAP,
                reason: format!("{cap:?} is not an integer"),
            })?;
        }
        if let Some(host) = get(env::HOST) {
            cfg.host = host;
        }
        Ok(cfg)
    }
}

/// One accepted inference request.
#[derive(Debug)]
pub struct RequestRecord {
    pub req_id: String,
    pub client_id: String,
    pub payload: String,
    pub t_svc_recv: Nanos,
    pub queue_position: usize,
}

struct Job {
    record: RequestRecord,
    conn: Arc<ConnWriter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Queued { position: usize },
    Overflow,
    Stopping,
}

struct QueueState<T> {
    items: VecDeque<T>,
    stopping: bool,
    /// Consumers blocked in [`RequestQueue::next`].
    sleepers: usize,
}

/// Bounded FIFO shared by the readers and the single worker.
pub struct RequestQueue<T> {
    state: Mutex<QueueState<T>>,
    ready: Condvar,
    capacity: usize,
}

/// Holds the queue lock. A sleeping consumer is woken only after the lock is
/// released, so it does not wake up just to block on the mutex.
pub struct QueueGuard<'a, T> {
    queue: &'a RequestQueue<T>,
    state: Option<MutexGuard<'a, QueueState<T>>>,
    wake: bool,
}

impl<T> QueueGuard<'_, T> {
    pub fn admit(&mut self, item: impl FnOnce(usize) -> T) -> Admission {
        let state = self.state.as_mut().expect("held until drop");
        if state.stopping {
            return Admission::Stopping;
        }
        let position = state.items.len();
        if position >= self.queue.capacity {
            return Admission::Overflow;
        }
        state.items.push_back(item(position));
        self.wake |= state.sleepers > 0;
        Admission::Queued { position }
    }
}

impl<T> Drop for QueueGuard<'_, T> {
    fn drop(&mut self) {
        drop(self.state.take());
        if self.wake {
            self.queue.ready.notify_one();
        }
    }
}

impl<T> RequestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(QueueState {
                items: VecDeque::new(),
                stopping: false,
                sleepers: 0,
            }),
            ready: Condvar::new(),
            capacity,
        }
    }

    pub fn lock(&self) -> QueueGuard<'_, T> {
        QueueGuard {
            queue: self,
            state: Some(self.state.lock().unwrap_or_else(|e| e.into_inner())),
            wake: false,
        }
    }

    /// Blocks for the next item; `None` once stopped and empty.
    pub fn next(&self) -> Option<T> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(item) = state.items.pop_front() {
                return Some(item);
            }
            if state.stopping {
                return None;
            }
            state.sleepers += 1;
            state = self.ready.wait(state).unwrap_or_else(|e| e.into_inner());
            state.sleepers -= 1;
        }
    }

    /// Refuses further admissions and hands back everything still queued.
    pub fn stop(&self) -> Vec<T> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        state.stopping = true;
        let drained = state.items.drain(..).collect();
        self.ready.notify_all();
        drained
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write half of a client connection; replies come from readers and the
/// worker, so writes are serialized.
struct ConnWriter(Mutex<TcpStream>);

impl ConnWriter {
    fn send(&self, bytes: &[u8]) -> io::Result<()> {
        use std::io::Write;
        self.0.lock().unwrap_or_else(|e| e.into_inner()).write_all(bytes)
    }

    fn send_message(&self, msg: &Message) {
        if let Ok(bytes) = wire::encode_message(msg) {
            let _ = self.send(&bytes);
        }
    }

    /// Reply that never reached the worker: all service stamps collapse onto
    /// the arrival instant.
    fn send_unexecuted(&self, req_id: &str, status: ReplyStatus, payload: &str, t_svc_recv: Nanos) {
        let head = ReplyHead {
            req_id,
            status,
            payload,
            t_svc_recv,
            t_exec_start: t_svc_recv,
            t_exec_end: t_svc_recv,
        };
        if let Ok(frame) = encode_reply_frame(&head, now_ns) {
            let _ = self.send(&frame);
        }
    }
}

struct Shared {
    uid: String,
    queue: RequestQueue<Job>,
    stop_tx: Mutex<mpsc::Sender<Duration>>,
}

fn serve_connection(shared: Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let writer = match stream.try_clone() {
        Ok(s) => Arc::new(ConnWriter(Mutex::new(s))),
        Err(_) => return,
    };
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    loop {
        let body = match net::read_frame(&mut reader) {
            Ok(body) => body,
            Err(WireIoError::Frame(FrameError::TooLarge(n))) => {
                writer.send_message(&Message::error(
                    ErrorCode::Protocol,
                    format!("frame of {n} bytes exceeds limit"),
                ));
                let _ = reader.get_ref().shutdown(Shutdown::Both);
                return;
            }
            Err(_) => return,
        };

        let mut guard = shared.queue.lock();
        let t_svc_recv = now_ns();
        let msg = match wire::from_json(&body) {
            Ok(m) => m,
            Err(e) => {
                drop(guard);
                writer.send_message(&Message::error(ErrorCode::Protocol, e.to_string()));
                let _ = reader.get_ref().shutdown(Shutdown::Both);
                return;
            }
        };
        match msg {
            Message::Infer {
                req_id,
                client_id,
                payload,
            } => {
                let mut rejected = None;
                let admission = guard.admit(|queue_position| Job {
                    record: RequestRecord {
                        req_id: req_id.clone(),
                        client_id,
                        payload,
                        t_svc_recv,
                        queue_position,
                    },
                    conn: Arc::clone(&writer),
                });
                drop(guard);
                match admission {
                    Admission::Queued { .. } => {}
                    Admission::Overflow => {
                        rejected = Some((
                            ReplyStatus::Error,
                            format!("QueueOverflow: {} requests already queued", shared.queue.capacity),
                        ))
                    }
                    Admission::Stopping => rejected = Some((ReplyStatus::Stopping, "ServiceStopping".to_string())),
                }
                if let Some((status, text)) = rejected {
                    writer.send_unexecuted(&req_id, status, &text, t_svc_recv);
                }
            }
            Message::Control { uid, cmd, grace_ms } => {
                drop(guard);
                if uid != shared.uid {
                    writer.send_message(&Message::error(
                        ErrorCode::UnknownService,
                        format!("this is {}, not {uid}", shared.uid),
                    ));
                    continue;
                }
                writer.send_message(&Message::ControlAck {
                    uid,
                    cmd,
                    t_svc: now_ns(),
                });
                if cmd == ControlCommand::Stop {
                    let grace = grace_ms.map_or(DEFAULT_STOP_GRACE, Duration::from_millis);
                    let _ = shared.stop_tx.lock().unwrap_or_else(|e| e.into_inner()).send(grace);
                }
            }
            other => {
                drop(guard);
                writer.send_message(&Message::error(
                    ErrorCode::Protocol,
                    format!("services do not handle {other:?}"),
                ));
            }
        }
    }
}

fn worker_loop(shared: Arc<Shared>, mut backend: Box<dyn Backend>, done: mpsc::Sender<()>) {
    tighten_timer_slack();
    while let Some(job) = shared.queue.next() {
        let t_exec_start = now_ns();
        let result = backend.infer(&job.record.payload);
        let t_exec_end = now_ns();
        let (status, payload) = match result {
            Ok(p) => (ReplyStatus::Ok, p),
            Err(e) => (ReplyStatus::Error, format!("BackendError: {e}")),
        };
        let head = ReplyHead {
            req_id: &job.record.req_id,
            status,
            payload: &payload,
            t_svc_recv: job.record.t_svc_recv,
            t_exec_start,
            t_exec_end,
        };
        match encode_reply_frame(&head, now_ns) {
            Ok(frame) => {
                let _ = job.conn.send(&frame);
            }
            Err(e) => job.conn.send_unexecuted(
                &job.record.req_id,
                ReplyStatus::Error,
                &e.to_string(),
                job.record.t_svc_recv,
            ),
        }
    }
    let _ = done.send(());
}

struct RegistryLink {
    stream: TcpStream,
}

impl RegistryLink {
    fn connect(addr: &str) -> Result<Self, ServiceError> {
        let stream = net::connect(addr, REGISTRY_CONNECT_TIMEOUT)
            .map_err(|e| ServiceError::RegistrationFailure(format!("registry {addr} unreachable: {e}")))?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(Self { stream })
    }

    fn expect_ack(&mut self, msg: &Message) -> Result<Message, ServiceError> {
        match net::call(&mut self.stream, msg) {
            Ok(reply @ Message::Ack { .. }) => Ok(reply),
            Ok(Message::Error { message, .. }) => Err(ServiceError::RegistrationFailure(message)),
            Ok(other) => Err(ServiceError::RegistrationFailure(format!("unexpected reply {other:?}"))),
            Err(e) => Err(ServiceError::RegistrationFailure(e.to_string())),
        }
    }
}

fn heartbeat_loop(uid: String, registry: String, link: RegistryLink, interval: Duration, stop: Arc<AtomicBool>) {
    let mut link = Some(link);
    let mut seq = 0u64;
    loop {
        thread::sleep(interval);
        if stop.load(Ordering::SeqCst) {
            return;
        }
        seq += 1;
        if link.is_none() {
            link = RegistryLink::connect(&registry).ok();
        }
        if let Some(l) = link.as_mut() {
            match l.expect_ack(&Message::Heartbeat { uid: uid.clone(), seq }) {
                Ok(Message::Ack { status: Some(s), .. }) if s == "dead" => {
                    warn!("{uid}: registry considers this service dead");
                }
                Ok(_) => {}
                Err(e) => {
                    debug!("{uid}: heartbeat {seq} failed: {e}");
                    link = None;
                }
            }
        }
    }
}

/// A booted, initialized and published service, not yet serving.
pub struct ReadyService {
    config: ServiceConfig,
    listener: TcpListener,
    link: RegistryLink,
    backend: Box<dyn Backend>,
}

impl ReadyService {
    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }
}

/// Runs the three bootstrap phases: report `booted`, initialize the backend,
/// register the endpoint. Connections are not accepted until registration
/// succeeded.
pub fn boot_sequence(config: ServiceConfig) -> Result<ReadyService, ServiceError> {
    let mut link = RegistryLink::connect(&config.registry)?;
    link.expect_ack(&Message::Booted {
        uid: config.uid.clone(),
        gpus: config.gpus.clone(),
        pid: std::process::id(),
    })?;

    let mut backend = backend::build(&config.backend);
    backend.init().map_err(|e| ServiceError::InitFailure(e.to_string()))?;
    link.expect_ack(&Message::Initialized { uid: config.uid.clone() })?;

    let listener = TcpListener::bind((config.host.as_str(), 0))?;
    let port = listener.local_addr()?.port();
    link.expect_ack(&Message::Register {
        uid: config.uid.clone(),
        host: config.host.clone(),
        port,
        pv: PROTOCOL_VERSION,
    })?;
    info!("{} ready on {}:{}", config.uid, config.host, port);
    Ok(ReadyService {
        config,
        listener,
        link,
        backend,
    })
}

impl ReadyService {
    /// Serves until a `stop` control arrives, then drains and returns.
    pub fn serve(self) -> Result<Outcome, ServiceError> {
        let Self {
            config,
            listener,
            link,
            backend,
        } = self;
        let addr = listener.local_addr()?;
        let (stop_tx, stop_rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            uid: config.uid.clone(),
            queue: RequestQueue::new(config.queue_capacity),
            stop_tx: Mutex::new(stop_tx),
        });
        let stopping = Arc::new(AtomicBool::new(false));

        let (done_tx, done_rx) = mpsc::channel();
        {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("worker".into())
                .spawn(move || worker_loop(shared, backend, done_tx))?;
        }
        {
            let (uid, registry, stop) = (config.uid.clone(), config.registry.clone(), Arc::clone(&stopping));
            let interval = config.heartbeat_interval;
            thread::Builder::new()
                .name("heartbeat".into())
                .spawn(move || heartbeat_loop(uid, registry, link, interval, stop))?;
        }
        {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stopping);
            thread::Builder::new().name("accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = conn {
                        let shared = Arc::clone(&shared);
                        let _ = thread::Builder::new()
                            .name("conn".into())
                            .spawn(move || serve_connection(shared, stream));
                    }
                }
            })?;
        }

        let grace = stop_rx.recv().unwrap_or(DEFAULT_STOP_GRACE);
        Ok(shutdown(&shared, &stopping, addr, grace, &done_rx))
    }
}

fn shutdown(
    shared: &Shared,
    stopping: &AtomicBool,
    addr: SocketAddr,
    grace: Duration,
    worker_done: &mpsc::Receiver<()>,
) -> Outcome {
    stopping.store(true, Ordering::SeqCst);
    // Wake the accept loop so it notices the flag and drops the listener.
    let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
    let drained = shared.queue.stop();
    info!("{}: stopping, {} queued requests refused", shared.uid, drained.len());
    for job in drained {
        job.conn.send_unexecuted(
            &job.record.req_id,
            ReplyStatus::Stopping,
            "ServiceStopping",
            job.record.t_svc_recv,
        );
    }
    match worker_done.recv_timeout(grace) {
        Ok(()) | Err(RecvTimeoutError::Disconnected) => Outcome::Clean,
        Err(RecvTimeoutError::Timeout) => {
            warn!("{}: worker still busy after {:?}, forcing exit", shared.uid, grace);
            Outcome::Forced
        }
    }
}

/// Full service lifetime: boot, serve, drain.
pub fn run(config: ServiceConfig) -> Result<Outcome, ServiceError> {
    boot_sequence(config)?.serve()
}
