//! Benchmark harness: bootstrap sweeps and response-time sweeps in local or
//! remote mode, aggregated into CSV/JSON reports.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Barrier;
use std::thread;
use std::time::Duration;

use log::{info, warn};
use pilot_serve_core::stats::{summarize, Summary};
use pilot_serve_core::sweep::{
    bootstrap_points, rt_points, ClientCount, SweepKind, SweepPoint, DEFAULT_REQUESTS_PER_CLIENT,
    DESK_BOOTSTRAP_SEQUENCE, FULL_BOOTSTRAP_SEQUENCE, RT_SERVICE_SEQUENCE, STRONG_SCALING_CLIENTS,
};
use pilot_serve_core::{decompose_bt, BackendSpec, Endpoint, ResourcePool, ServiceDescription};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientConfig, ClientSession, LatencyInjection};
use crate::clock::tighten_timer_slack;
use crate::session::{Session, SessionConfig, SessionError};

pub const CSV_HEADER: &str = "sweep,clients,services,component,mean_ns,std_ns,p50_ns,p95_ns,p99_ns";
pub const RT_COMPONENTS: [&str; 3] = ["communication", "service", "inference"];
pub const BT_COMPONENTS: [&str; 3] = ["launch", "init", "publish"];
/// A sweep point fails when more than this fraction of its requests fail.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("endpoints file line {line}: {reason}")]
    Endpoints { line: usize, reason: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Bootstrap,
    NoopRt,
    InferIt,
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bootstrap" => Ok(Self::Bootstrap),
            "noop-rt" => Ok(Self::NoopRt),
            "infer-it" => Ok(Self::InferIt),
            _ => Err(format!("unknown experiment {s:?}")),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bootstrap => "bootstrap",
            Self::NoopRt => "noop-rt",
            Self::InferIt => "infer-it",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Local,
    Remote,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Self::Local),
            "remote" => Ok(Self::Remote),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub mode: Mode,
    pub services: Vec<u32>,
    pub clients: ClientCount,
    pub requests_per_client: u32,
    pub backend: BackendSpec,
    pub max_in_flight: u32,
    /// One-way delay added by the client transport.
    pub inject_latency: Duration,
    /// Jitter sigma; 10% of the delay when unset.
    pub jitter: Option<Duration>,
    pub seed: u64,
    pub payload: String,
    /// Required in remote mode.
    pub endpoints: Option<PathBuf>,
    /// Executable that implements the `service` subcommand.
    pub program: PathBuf,
    pub launch_delay: Duration,
    pub boot_timeout: Duration,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn new(experiment: Experiment, program: impl Into<PathBuf>) -> Self {
        let (services, backend) = match experiment {
            Experiment::Bootstrap => (
                DESK_BOOTSTRAP_SEQUENCE.to_vec(),
                BackendSpec::scripted(Duration::from_secs(2), Duration::ZERO),
            ),
            Experiment::NoopRt => (RT_SERVICE_SEQUENCE.to_vec(), BackendSpec::Noop),
            Experiment::InferIt => (
                RT_SERVICE_SEQUENCE.to_vec(),
                BackendSpec::scripted(Duration::ZERO, Duration::from_millis(10)),
            ),
        };
        Self {
            experiment,
            mode: Mode::Local,
            services,
            clients: ClientCount::Fixed(STRONG_SCALING_CLIENTS),
            requests_per_client: DEFAULT_REQUESTS_PER_CLIENT,
            backend,
            max_in_flight: 1,
            inject_latency: Duration::ZERO,
            jitter: None,
            seed: 7,
            payload: "ping".into(),
            endpoints: None,
            program: program.into(),
            launch_delay: Duration::ZERO,
            boot_timeout: crate::executor::DEFAULT_BOOT_TIMEOUT,
        }
    }

    /// Switches a bootstrap sweep to the full-size instance sequence.
    pub fn full_scale(mut self) -> Self {
        if self.experiment == Experiment::Bootstrap {
            self.services = FULL_BOOTSTRAP_SEQUENCE.to_vec();
        }
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.services.is_empty() || self.services.contains(&0) {
            return bad("service counts must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("--max-in-flight must be at least 1");
        }
        if self.requests_per_client == 0 && self.experiment != Experiment::Bootstrap {
            return bad("--requests must be positive");
        }
        if self.experiment == Experiment::Bootstrap && self.mode == Mode::Remote {
            return bad("the bootstrap experiment needs local mode; remote services are not launched");
        }
        if self.mode == Mode::Remote && self.endpoints.is_none() {
            return bad("remote mode needs --endpoints");
        }
        self.backend.validate().map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        match self.experiment {
            Experiment::Bootstrap => bootstrap_points(&self.services),
            _ => rt_points(&self.services, self.clients),
        }
    }

    fn latency(&self, client: u32) -> Option<LatencyInjection> {
        if self.inject_latency.is_zero() {
            return None;
        }
        let mut l = LatencyInjection::new(self.inject_latency, self.seed.wrapping_add(u64::from(client)));
        if let Some(j) = self.jitter {
            l.jitter = j;
        }
        Some(l)
    }
}

/// Reads a newline-delimited `uid host port` file; blank lines and `#`
/// comments are skipped.
pub fn parse_endpoints(text: &str) -> Result<Vec<Endpoint>, BenchError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| BenchError::Endpoints {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [uid, host, port] = fields[..] else {
            return Err(err("expected `uid host port`"));
        };
        let port: u16 = port.parse().map_err(|_| err("port is not a number"))?;
        let ep = Endpoint::new(uid, host, port);
        ep.validate().map_err(|e| err(&e.to_string()))?;
        out.push(ep);
    }
    Ok(out)
}

pub fn format_endpoints(endpoints: &[Endpoint]) -> String {
    endpoints
        .iter()
        .map(|e| format!("{} {} {}\n", e.service_uid, e.host, e.port))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRow {
    pub service_uid: String,
    pub client_id: String,
    pub req_id: String,
    pub total: i64,
    pub communication: i64,
    pub service: i64,
    pub inference: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub uid: String,
    pub launch: u64,
    pub init: u64,
    pub publish: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub component: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub sweep: SweepKind,
    pub clients: u32,
    pub services: u32,
    /// Requests issued, or services launched for bootstrap points.
    pub attempted: u64,
    pub failures: u64,
    /// First distinct failure messages.
    pub errors: Vec<String>,
    pub makespan_ns: u64,
    pub throughput_rps: f64,
    pub components: Vec<ComponentStats>,
    /// Response time or bootstrap time.
    pub total: Option<Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<RequestRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bt_rows: Vec<BootstrapRow>,
}

impl PointReport {
    fn empty(point: SweepPoint) -> Self {
        Self {
            sweep: point.sweep,
            clients: point.clients,
            services: point.services,
            attempted: 0,
            failures: 0,
            errors: Vec::new(),
            makespan_ns: 0,
            throughput_rps: 0.0,
            components: Vec::new(),
            total: None,
            rows: Vec::new(),
            bt_rows: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}/{}", self.sweep, self.clients, self.services)
    }

    pub fn component(&self, name: &str) -> Option<&Summary> {
        self.components.iter().find(|c| c.component == name).map(|c| &c.summary)
    }

    pub fn failure_rate(&self) -> f64 {
        if self.attempted == 0 {
            return if self.failures == 0 { 0.0 } else { 1.0 };
        }
        self.failures as f64 / self.attempted as f64
    }

    pub fn passed(&self) -> bool {
        self.failure_rate() <= MAX_FAILURE_RATE
    }

    fn note_error(&mut self, msg: String) {
        self.failures += 1;
        if self.errors.len() < 8 && !self.errors.contains(&msg) {
            self.errors.push(msg);
        }
    }

    fn finish_rt(&mut self) {
        let col = |f: fn(&RequestRow) -> i64| self.rows.iter().map(f).collect::<Vec<i64>>();
        let cols = [col(|r| r.communication), col(|r| r.service), col(|r| r.inference)];
        self.components = RT_COMPONENTS
            .iter()
            .zip(cols.iter())
            .filter_map(|(name, v)| {
                summarize(v).map(|summary| ComponentStats {
                    component: (*name).to_string(),
                    summary,
                })
            })
            .collect();
        self.total = summarize(&col(|r| r.total));
    }

    fn finish_bt(&mut self) {
        let col = |f: fn(&BootstrapRow) -> u64| self.bt_rows.iter().map(|r| f(r) as i64).collect::<Vec<i64>>();
        let cols = [col(|r| r.launch), col(|r| r.init), col(|r| r.publish)];
        self.components = BT_COMPONENTS
            .iter()
            .zip(cols.iter())
            .filter_map(|(name, v)| {
                summarize(v).map(|summary| ComponentStats {
                    component: (*name).to_string(),
                    summary,
                })
            })
            .collect();
        self.total = summarize(&col(|r| r.launch + r.init + r.publish));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: Experiment,
    pub mode: Mode,
    pub points: Vec<PointReport>,
}

impl Report {
    pub fn new(experiment: Experiment, mode: Mode) -> Self {
        Self {
            experiment,
            mode,
            points: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.points.iter().all(PointReport::passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            for c in &p.components {
                let s = &c.summary;
                out.push_str(&format!(
                    "{},{},{},{},{:.0},{:.0},{},{},{}\n",
                    p.sweep, p.clients, p.services, c.component, s.mean, s.std, s.p50, s.p95, s.p99
                ));
            }
        }
        out
    }

    /// Per-request and per-service rows are included only when `raw`.
    pub fn to_json(&self, raw: bool) -> String {
        let stripped;
        let report = if raw {
            self
        } else {
            let mut r = self.clone();
            for p in &mut r.points {
                p.rows.clear();
                p.bt_rows.clear();
            }
            stripped = r;
            &stripped
        };
        serde_json::to_string_pretty(report).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Writes the CSV to `path` and the JSON next to it.
    pub fn write(&self, path: &Path, raw: bool) -> io::Result<PathBuf> {
        fs::write(path, self.to_csv())?;
        let json = path.with_extension("json");
        fs::write(&json, self.to_json(raw))?;
        Ok(json)
    }
}

fn uid(i: u32) -> String {
    format!("svc-{i:03}")
}

fn local_session(cfg: &ExperimentConfig, services: u32, sandbox: &Path) -> Result<Session, BenchError> {
    let pool = ResourcePool::uniform("desk", services as usize, 1, 1).map_err(|e| BenchError::Config(e.to_string()))?;
    let mut sc = SessionConfig::new(pool, sandbox, &cfg.program);
    sc.executor.launch_delay = cfg.launch_delay;
    sc.executor.boot_timeout = cfg.boot_timeout;
    Ok(Session::start(sc)?)
}

fn service_descriptions(cfg: &ExperimentConfig, n: u32) -> Vec<ServiceDescription> {
    (0..n)
        .map(|i| {
            let mut d = ServiceDescription::new(uid(i), cfg.backend.clone());
            d.ready_timeout = cfg.boot_timeout.max(Duration::from_secs(60));
            d
        })
        .collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report, BenchError> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::Bootstrap => run_bootstrap(cfg),
        _ => run_rt(cfg),
    }
}

/// Launches N services at once per sweep point and decomposes their
/// bootstrap times.
pub fn run_bootstrap(cfg: &ExperimentConfig) -> Result<Report, BenchError> {
    cfg.validate()?;
    if cfg.mode != Mode::Local {
        return Err(BenchError::Config("bootstrap needs local mode".into()));
    }
    let sandbox = tempfile::tempdir()?;
    let mut report = Report::new(cfg.experiment, cfg.mode);
    for point in cfg.points() {
        let n = point.services;
        let mut pr = PointReport::empty(point);
        pr.attempted = u64::from(n);
        let session = local_session(cfg, n, &sandbox.path().join(format!("bt-{n}")))?;
        let descs = service_descriptions(cfg, n);
        session.submit(&descs, &[])?;
        let uids: Vec<String> = descs.iter().map(|d| d.uid.clone()).collect();
        for (uid, result) in session.start_services(&uids) {
            let row = result.map_err(|e| e.to_string()).and_then(|_| {
                let rec = session
                    .bootstrap_record(&uid)
                    .ok_or_else(|| format!("{uid}: incomplete bootstrap record"))?;
                let bt = decompose_bt(&rec).map_err(|e| e.to_string())?;
                Ok(BootstrapRow {
                    uid: uid.clone(),
                    launch: bt.launch,
                    init: bt.init,
                    publish: bt.publish,
                })
            });
            match row {
                Ok(r) => pr.bt_rows.push(r),
                Err(e) => pr.note_error(e),
            }
        }
        session.close();
        pr.finish_bt();
        info!("bootstrap N={n}: {} ok, {} failed", pr.bt_rows.len(), pr.failures);
        report.points.push(pr);
    }
    Ok(report)
}

/// Strong or weak response-time sweep, depending on `cfg.clients`.
pub fn run_rt(cfg: &ExperimentConfig) -> Result<Report, BenchError> {
    cfg.validate()?;
    let remote = match cfg.mode {
        Mode::Remote => {
            let path = cfg.endpoints.as_ref().expect("validated");
            Some(parse_endpoints(&fs::read_to_string(path)?)?)
        }
        Mode::Local => None,
    };
    let sandbox = tempfile::tempdir()?;
    let mut report = Report::new(cfg.experiment, cfg.mode);
    for point in cfg.points() {
        let s = point.services;
        let mut pr = PointReport::empty(point);
        pr.attempted = u64::from(point.clients) * u64::from(cfg.requests_per_client);
        let mut session = None;
        let endpoints = match &remote {
            Some(all) if all.len() >= s as usize => all[..s as usize].to_vec(),
            Some(all) => {
                pr.failures = pr.attempted;
                pr.errors.push(format!("endpoints file lists {} services, point needs {s}", all.len()));
                report.points.push(pr);
                continue;
            }
            None => {
                let local = session.insert(local_session(cfg, s, &sandbox.path().join(format!("{}-{s}", point.sweep)))?);
                let descs = service_descriptions(cfg, s);
                local.submit(&descs, &[])?;
                let uids: Vec<String> = descs.iter().map(|d| d.uid.clone()).collect();
                let failed: Vec<String> = local
                    .start_services(&uids)
                    .into_iter()
                    .filter_map(|(u, r)| r.err().map(|e| format!("{u}: {e}")))
                    .collect();
                if !failed.is_empty() {
                    warn!("{}: {} services failed to start", pr.label(), failed.len());
                    pr.failures = pr.attempted;
                    pr.errors = failed;
                    local.close();
                    report.points.push(pr);
                    continue;
                }
                local.endpoints(&uids)?.into_values().collect()
            }
        };
        drive_clients(cfg, point, &endpoints, &mut pr);
        if let Some(local) = session {
            local.close();
        }
        pr.finish_rt();
        info!(
            "{}: {} ok, {} failed, {:.1} req/s",
            pr.label(),
            pr.rows.len(),
            pr.failures,
            pr.throughput_rps
        );
        report.points.push(pr);
    }
    Ok(report)
}

/// Runs one client per thread until each has issued its requests. Client
/// `i` starts its round-robin at service `i mod S`, so the first wave is
/// spread over all services.
fn drive_clients(cfg: &ExperimentConfig, point: SweepPoint, endpoints: &[Endpoint], pr: &mut PointReport) {
    let payloads: Vec<String> = vec![cfg.payload.clone(); cfg.requests_per_client as usize];
    let start = Barrier::new(point.clients as usize);
    let per_client: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = (0..point.clients)
            .map(|c| {
                let mut eps = endpoints.to_vec();
                let shift = c as usize % eps.len();
                eps.rotate_left(shift);
                let config = ClientConfig {
                    latency: cfg.latency(c),
                    ..ClientConfig::new(format!("c{c}"))
                };
                let (payloads, start) = (&payloads, &start);
                s.spawn(move || {
                    tighten_timer_slack();
                    let session = ClientSession::connect(eps, config).expect("endpoint list is non-empty");
                    // Connection setup stays out of the measured window;
                    // failures resurface per request.
                    let _ = session.open_all();
                    start.wait();
                    let results = session.infer_many(payloads, cfg.max_in_flight as usize);
                    (session.client_id().to_string(), results)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    });

    let (mut first_send, mut last_recv) = (u64::MAX, 0);
    for (client_id, results) in per_client {
        for r in results {
            match r {
                Ok(reply) => {
                    let d = reply.decompose();
                    first_send = first_send.min(reply.envelope.t_client_send);
                    last_recv = last_recv.max(reply.envelope.t_client_recv);
                    pr.rows.push(RequestRow {
                        service_uid: reply.service_uid,
                        client_id: client_id.clone(),
                        req_id: reply.req_id,
                        total: d.total,
                        communication: d.communication,
                        service: d.service,
                        inference: d.inference,
                    });
                }
                Err(e) => pr.note_error(e.to_string()),
            }
        }
    }
    if last_recv > first_send {
        pr.makespan_ns = last_recv - first_send;
        pr.throughput_rps = pr.rows.len() as f64 / (pr.makespan_ns as f64 / 1e9);
    }
}
