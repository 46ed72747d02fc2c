//! Client sessions used by tasks and the benchmark harness.
//!
//! A session keeps one lazily opened connection per endpoint and picks the
//! target of each request round-robin. Several threads may share a session;
//! replies on a shared connection are matched by `req_id`, with whichever
//! waiter currently holds the read side stashing frames that belong to
//! others.
//!
//! With latency injection, the outbound delay is slept before the frame is
//! written. The inbound delay is not slept on arrival: the reply is stamped
//! with its emulated arrival time and the same thread's next send waits for
//! that instant instead, so each request costs one timer wakeup.

use std::cell::Cell;
use std::collections::HashMap;
use std::io::BufReader;
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use pilot_serve_core::wire::{self, Message, ReplyStatus};
use pilot_serve_core::{decompose_rt, Endpoint, Nanos, RtDecomposition, TimingEnvelope};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::clock::{now_ns, sleep_until_ns, tighten_timer_slack};
use crate::net::{self, WireIoError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

thread_local! {
    /// Emulated arrival of this thread's last reply.
    static NEXT_SEND_AT: Cell<Nanos> = const { Cell::new(0) };
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("a session needs at least one endpoint")]
    EmptyEndpoints,
    #[error("cannot reach {endpoint}: {reason}")]
    ConnectFailure { endpoint: String, reason: String },
    #[error("request {req_id} timed out")]
    Timeout { req_id: String },
    #[error("{service} failed request: {message}")]
    ServiceError { service: String, message: String },
    #[error("{service} is stopping")]
    ServiceStopping { service: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Emulated network delay added to every frame in each direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyInjection {
    pub delay: Duration,
    /// Standard deviation of the Gaussian jitter.
    pub jitter: Duration,
    pub seed: u64,
}

impl LatencyInjection {
    /// Jitter defaults to 10% of the delay.
    pub fn new(delay: Duration, seed: u64) -> Self {
        Self {
            delay,
            jitter: delay / 10,
            seed,
        }
    }
}

struct Jitter {
    rng: StdRng,
    dist: Normal<f64>,
}

impl Jitter {
    fn new(inj: &LatencyInjection) -> Self {
        let dist = Normal::new(inj.delay.as_nanos() as f64, inj.jitter.as_nanos() as f64)
            .expect("jitter sigma is finite and non-negative");
        Self {
            rng: StdRng::seed_from_u64(inj.seed),
            dist,
        }
    }

    fn sample(&mut self) -> Nanos {
        self.dist.sample(&mut self.rng).max(0.0) as Nanos
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: String,
    pub timeout: Duration,
    pub latency: Option<LatencyInjection>,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            timeout: DEFAULT_TIMEOUT,
            latency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub req_id: String,
    pub service_uid: String,
    pub payload: String,
    pub envelope: TimingEnvelope,
}

impl Reply {
    pub fn decompose(&self) -> RtDecomposition {
        decompose_rt(&self.envelope).expect("envelopes are checked on arrival")
    }
}

struct Arrived {
    msg: Message,
    /// Instant at which the frame counts as delivered, after injected delay.
    deliver_at: Nanos,
}

#[derive(Default)]
struct Inbox {
    stash: HashMap<String, Arrived>,
    reading: bool,
    broken: Option<String>,
    /// Threads blocked on `arrived`.
    waiters: usize,
}

impl Inbox {
    fn wake(&self, cv: &Condvar) {
        if self.waiters > 0 {
            cv.notify_all();
        }
    }
}

struct Conn {
    writer: Mutex<TcpStream>,
    reader: Mutex<BufReader<TcpStream>>,
    inbox: Mutex<Inbox>,
    arrived: Condvar,
}

impl Conn {
    fn open(ep: &Endpoint, timeout: Duration) -> Result<Self, ClientError> {
        let failure = |reason: String| ClientError::ConnectFailure {
            endpoint: ep.address(),
            reason,
        };
        let stream = net::connect(&ep.address(), CONNECT_TIMEOUT).map_err(|e| failure(e.to_string()))?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| failure(e.to_string()))?;
        let reader = stream.try_clone().map_err(|e| failure(e.to_string()))?;
        Ok(Self {
            writer: Mutex::new(stream),
            reader: Mutex::new(BufReader::with_capacity(64 * 1024, reader)),
            inbox: Mutex::new(Inbox::default()),
            arrived: Condvar::new(),
        })
    }

    fn inbox(&self) -> MutexGuard<'_, Inbox> {
        self.inbox.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn send(&self, bytes: &[u8]) -> Result<(), WireIoError> {
        use std::io::Write;
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(bytes)?;
        Ok(())
    }

    /// Waits for the reply to `req_id`, reading frames on behalf of other
    /// waiters while nobody else is.
    fn receive(&self, req_id: &str, deadline: Instant, delay: &dyn Fn() -> Nanos) -> Result<Arrived, ClientError> {
        let mut inbox = self.inbox();
        loop {
            if let Some(a) = inbox.stash.remove(req_id) {
                return Ok(a);
            }
            if let Some(reason) = &inbox.broken {
                return Err(ClientError::Protocol(reason.clone()));
            }
            if !inbox.reading {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ClientError::Timeout { req_id: req_id.into() });
            }
            inbox.waiters += 1;
            inbox = self
                .arrived
                .wait_timeout(inbox, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
            inbox.waiters -= 1;
        }
        inbox.reading = true;
        drop(inbox);

        loop {
            let read = net::read_message(&mut *self.reader.lock().unwrap_or_else(|e| e.into_inner()));
            let t_arrival = now_ns();
            let mut inbox = self.inbox();
            match read {
                Ok(msg) => {
                    let arrived = Arrived {
                        deliver_at: t_arrival + delay(),
                        msg,
                    };
                    let id = match &arrived.msg {
                        Message::Reply { req_id, .. } => req_id.clone(),
                        other => {
                            inbox.reading = false;
                            let reason = format!("unexpected frame {other:?}");
                            inbox.broken = Some(reason.clone());
                            inbox.wake(&self.arrived);
                            return Err(ClientError::Protocol(reason));
                        }
                    };
                    if id == req_id {
                        inbox.reading = false;
                        inbox.wake(&self.arrived);
                        return Ok(arrived);
                    }
                    inbox.stash.insert(id, arrived);
                    inbox.wake(&self.arrived);
                }
                Err(e) if e.is_timeout() => {
                    inbox.reading = false;
                    inbox.wake(&self.arrived);
                    return Err(ClientError::Timeout { req_id: req_id.into() });
                }
                Err(e) => {
                    inbox.reading = false;
                    inbox.broken = Some(e.to_string());
                    inbox.wake(&self.arrived);
                    return Err(ClientError::Protocol(e.to_string()));
                }
            }
            if Instant::now() >= deadline {
                inbox.reading = false;
                inbox.wake(&self.arrived);
                return Err(ClientError::Timeout { req_id: req_id.into() });
            }
        }
    }
}

pub struct ClientSession {
    config: ClientConfig,
    endpoints: Vec<Endpoint>,
    conns: Vec<Mutex<Option<Arc<Conn>>>>,
    cursor: AtomicUsize,
    counter: AtomicU64,
    jitter: Option<Mutex<Jitter>>,
}

impl ClientSession {
    /// No connection is opened until a request is routed to an endpoint.
    pub fn connect(endpoints: Vec<Endpoint>, config: ClientConfig) -> Result<Self, ClientError> {
        if endpoints.is_empty() {
            return Err(ClientError::EmptyEndpoints);
        }
        for ep in &endpoints {
            ep.validate().map_err(|e| ClientError::ConnectFailure {
                endpoint: ep.address(),
                reason: e.to_string(),
            })?;
        }
        Ok(Self {
            conns: endpoints.iter().map(|_| Mutex::new(None)).collect(),
            jitter: config.latency.as_ref().map(|l| Mutex::new(Jitter::new(l))),
            endpoints,
            config,
            cursor: AtomicUsize::new(0),
            counter: AtomicU64::new(0),
        })
    }

    pub fn client_id(&self) -> &str {
        &self.config.client_id
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    fn delay(&self) -> Nanos {
        self.jitter
            .as_ref()
            .map_or(0, |j| j.lock().unwrap_or_else(|e| e.into_inner()).sample())
    }

    fn conn(&self, idx: usize) -> Result<Arc<Conn>, ClientError> {
        let mut slot = self.conns[idx].lock().unwrap_or_else(|e| e.into_inner());
        if let Some(c) = slot.as_ref() {
            if c.inbox().broken.is_none() {
                return Ok(Arc::clone(c));
            }
        }
        let conn = Arc::new(Conn::open(&self.endpoints[idx], self.config.timeout)?);
        *slot = Some(Arc::clone(&conn));
        Ok(conn)
    }

    /// Opens every connection now instead of on first use.
    pub fn open_all(&self) -> Result<(), ClientError> {
        (0..self.endpoints.len()).try_for_each(|i| self.conn(i).map(drop))
    }

    fn next_req_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        format!("{}-{n}", self.config.client_id)
    }

    /// Sends one request to the next endpoint in round-robin order.
    pub fn infer(&self, payload: &str) -> Result<Reply, ClientError> {
        let idx = self.cursor.fetch_add(1, Ordering::Relaxed) % self.endpoints.len();
        let service = self.endpoints[idx].service_uid.clone();
        let conn = self.conn(idx)?;
        let req_id = self.next_req_id();
        let frame = wire::encode_message(&Message::Infer {
            req_id: req_id.clone(),
            client_id: self.config.client_id.clone(),
            payload: payload.to_string(),
        })
        .map_err(|e| ClientError::Protocol(e.to_string()))?;
        let deadline = Instant::now() + self.config.timeout;

        let injecting = self.jitter.is_some();
        let t_client_send = if injecting {
            let t = now_ns().max(NEXT_SEND_AT.get());
            sleep_until_ns(t + self.delay());
            t
        } else {
            now_ns()
        };
        if let Err(e) = conn.send(&frame) {
            conn.inbox().broken = Some(e.to_string());
            return Err(ClientError::ConnectFailure {
                endpoint: self.endpoints[idx].address(),
                reason: e.to_string(),
            });
        }
        let arrived = conn.receive(&req_id, deadline, &|| self.delay())?;
        let t_client_recv = arrived.deliver_at;
        if injecting {
            NEXT_SEND_AT.set(t_client_recv);
        }

        let Message::Reply {
            status,
            payload,
            t_svc_recv,
            t_exec_start,
            t_exec_end,
            t_reply_ready,
            ..
        } = arrived.msg
        else {
            unreachable!("receive only returns replies")
        };
        match status {
            ReplyStatus::Ok => {}
            ReplyStatus::Error => return Err(ClientError::ServiceError { service, message: payload }),
            ReplyStatus::Stopping => return Err(ClientError::ServiceStopping { service }),
        }
        let envelope = TimingEnvelope {
            t_client_send,
            t_client_recv,
            t_svc_recv,
            t_exec_start,
            t_exec_end,
            t_reply_ready,
        };
        envelope.check().map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(Reply {
            req_id,
            service_uid: service,
            payload,
            envelope,
        })
    }

    /// Issues all payloads with at most `max_in_flight` outstanding and
    /// returns per-item results in submission order.
    pub fn infer_many(&self, payloads: &[String], max_in_flight: usize) -> Vec<Result<Reply, ClientError>> {
        assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
        if max_in_flight == 1 || payloads.len() <= 1 {
            return payloads.iter().map(|p| self.infer(p)).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<Reply, ClientError>>>> =
            Mutex::new((0..payloads.len()).map(|_| None).collect());
        thread::scope(|s| {
            for _ in 0..max_in_flight.min(payloads.len()) {
                s.spawn(|| {
                    tighten_timer_slack();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(p) = payloads.get(i) else { break };
                        let r = self.infer(p);
                        results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                    }
                });
            }
        });
        results
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("every index is claimed once"))
            .collect()
    }
}
