//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria run one after another because most of them measure latency on
//! whatever CPUs the machine has. Positional arguments filter by name.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode, Stdio};
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use pilot_serve::bench::{self, Experiment, ExperimentConfig, Mode, PointReport, Report};
use pilot_serve::client::{ClientConfig, ClientSession, LatencyInjection, Reply};
use pilot_serve::clock::tighten_timer_slack;
use pilot_serve::net;
use pilot_serve::registry::{LivenessStatus, RegistryConfig};
use pilot_serve::session::{Session, SessionConfig};
use pilot_serve_core::stats::{mean, median};
use pilot_serve_core::sweep::ClientCount;
use pilot_serve_core::wire::{Message, ReplyStatus};
use pilot_serve_core::{
    BackendSpec, EntityKind, Plan, ResourcePool, ScheduleError, Scheduler, ServiceDescription, TaskDescription,
    TaskPayload,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const MS: f64 = 1e6;
const INJECTED: Duration = Duration::from_micros(470);

fn program() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pilot-serve"))
}

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion {
            name: "decomposition identity",
            budget: Duration::from_secs(60),
            run: decomposition_identity,
        },
        Criterion {
            name: "bootstrap shape",
            budget: Duration::from_secs(180),
            run: bootstrap_shape,
        },
        Criterion {
            name: "noop response-time shape",
            budget: Duration::from_secs(300),
            run: noop_shape,
        },
        Criterion {
            name: "inference shape",
            budget: Duration::from_secs(600),
            run: inference_shape,
        },
        Criterion {
            name: "remote parity",
            budget: Duration::from_secs(300),
            run: remote_parity,
        },
        Criterion {
            name: "scheduler properties",
            budget: Duration::from_secs(30),
            run: scheduler_properties,
        },
        Criterion {
            name: "service FIFO",
            budget: Duration::from_secs(60),
            run: service_fifo,
        },
        Criterion {
            name: "lifecycle robustness",
            budget: Duration::from_secs(120),
            run: lifecycle,
        },
    ];
    panic::set_hook(Box::new(|_| {}));
    tighten_timer_slack();
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > c.budget => Err(format!("{detail}; took {took:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {}: {detail} [{took:.1?}]", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {detail} [{took:.1?}]", c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ms(ns: f64) -> String {
    format!("{:.3} ms", ns / MS)
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn no_failures(report: &Report) -> Result<(), String> {
    for p in &report.points {
        check(p.failures == 0, || format!("{}: {} failures {:?}", p.label(), p.failures, p.errors))?;
    }
    Ok(())
}

fn col(p: &PointReport, f: impl Fn(&bench::RequestRow) -> i64) -> Vec<i64> {
    p.rows.iter().map(f).collect()
}

fn rt_config(exp: Experiment, clients: ClientCount, requests: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(exp, program());
    cfg.clients = clients;
    cfg.requests_per_client = requests;
    cfg
}

fn start_session(nodes: usize, dir: &tempfile::TempDir, tweak: impl FnOnce(&mut SessionConfig)) -> Session {
    let pool = ResourcePool::uniform("acc", nodes, 1, 1).expect("positive pool");
    let mut sc = SessionConfig::new(pool, dir.path(), program());
    tweak(&mut sc);
    Session::start(sc).expect("session starts")
}

fn launch(session: &Session, descs: &[ServiceDescription]) -> Result<(), String> {
    session.submit(descs, &[]).map_err(|e| e.to_string())?;
    let uids: Vec<String> = descs.iter().map(|d| d.uid.clone()).collect();
    for (uid, r) in session.start_services(&uids) {
        r.map_err(|e| format!("{uid}: {e}"))?;
    }
    Ok(())
}

/// Three backends behind one session, eight clients, half of them with
/// injected latency; every reply must decompose exactly.
fn decomposition_identity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = start_session(3, &dir, |_| {});
    let descs = [
        ServiceDescription::new("svc-noop", BackendSpec::Noop),
        ServiceDescription::new("svc-echo", BackendSpec::Echo),
        ServiceDescription::new(
            "svc-scripted",
            BackendSpec::scripted(Duration::ZERO, Duration::from_micros(100)),
        ),
    ];
    launch(&session, &descs)?;
    let endpoints: Vec<_> = session
        .endpoints(&descs.iter().map(|d| d.uid.clone()).collect::<Vec<_>>())
        .map_err(|e| e.to_string())?
        .into_values()
        .collect();

    let (clients, per_client) = (8u32, 1280usize);
    let results: Vec<Vec<Result<Reply, String>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..clients)
            .map(|c| {
                let mut eps = endpoints.clone();
                eps.rotate_left(c as usize % endpoints.len());
                s.spawn(move || {
                    let config = ClientConfig {
                        latency: (c % 2 == 1).then(|| LatencyInjection::new(Duration::from_micros(200), u64::from(c))),
                        ..ClientConfig::new(format!("c{c}"))
                    };
                    let client = ClientSession::connect(eps, config).expect("non-empty");
                    let payloads: Vec<String> = (0..per_client).map(|i| format!("req {i} ✓")).collect();
                    client
                        .infer_many(&payloads, 1 + c as usize % 3)
                        .into_iter()
                        .map(|r| r.map_err(|e| e.to_string()))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread")).collect()
    });
    session.close();

    let (mut rows, mut mismatches, mut backends) = (0usize, 0usize, BTreeSet::new());
    for r in results.into_iter().flatten() {
        let reply = r?;
        let d = reply.decompose();
        rows += 1;
        if d.communication + d.service + d.inference != d.total {
            mismatches += 1;
        }
        backends.insert(reply.service_uid);
    }
    check(rows >= 10_000, || format!("only {rows} rows"))?;
    check(backends.len() == 3, || format!("backends hit: {backends:?}"))?;
    check(mismatches == 0, || format!("{mismatches} of {rows} rows do not sum"))?;
    Ok(format!("{rows} rows over {} backends, 0 mismatches", backends.len()))
}

fn bootstrap_shape() -> Outcome {
    let cfg = ExperimentConfig::new(Experiment::Bootstrap, program());
    let report = bench::run(&cfg).map_err(|e| e.to_string())?;
    no_failures(&report)?;
    let mut summary = Vec::new();
    for p in &report.points {
        let med = |name: &str| p.component(name).map(|s| s.p50 as f64).ok_or(format!("{}: no {name}", p.label()));
        let (launch, init, publish) = (med("launch")?, med("init")?, med("publish")?);
        check((2000.0 * MS..=2200.0 * MS).contains(&init), || {
            format!("N={}: median init {} outside [2.0, 2.2] s", p.services, ms(init))
        })?;
        check(init > 5.0 * launch, || {
            format!("N={}: median init {} not > 5x launch {}", p.services, ms(init), ms(launch))
        })?;
        check(publish < launch, || {
            format!("N={}: median publish {} not < launch {}", p.services, ms(publish), ms(launch))
        })?;
        summary.push(format!("{}:{:.1}/{:.0}/{:.2}", p.services, launch / MS, init / MS, publish / MS));
    }
    Ok(format!("N:launch/init/publish ms {}", summary.join(" ")))
}

fn noop_shape() -> Outcome {
    let mut strong = rt_config(Experiment::NoopRt, ClientCount::Fixed(16), 256);
    strong.inject_latency = INJECTED;
    let report = bench::run(&strong).map_err(|e| e.to_string())?;
    no_failures(&report)?;
    let mut margins = Vec::new();
    for p in &report.points {
        let comm = median(&col(p, |r| r.communication)).unwrap_or(0) as f64;
        let rest = median(&col(p, |r| r.service + r.inference)).unwrap_or(i64::MAX) as f64;
        check(comm > rest, || {
            format!("{}: median communication {} not > service+inference {}", p.label(), ms(comm), ms(rest))
        })?;
        margins.push(format!("{}:{:.2}/{:.2}", p.services, comm / MS, rest / MS));
    }

    let mut weak = rt_config(Experiment::NoopRt, ClientCount::Match, 256);
    weak.inject_latency = INJECTED;
    let report = bench::run(&weak).map_err(|e| e.to_string())?;
    no_failures(&report)?;
    let means: Vec<f64> = report.points.iter().map(|p| p.total.map_or(f64::NAN, |t| t.mean)).collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let spread = (means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min)) / grand;
    let shown: Vec<String> = means.iter().map(|m| format!("{:.3}", m / MS)).collect();
    check(spread < 0.15, || {
        format!("weak mean total spread {:.1}% of {} ({})", spread * 100.0, ms(grand), shown.join(", "))
    })?;
    Ok(format!(
        "strong comm/svc+inf ms {}; weak means ms [{}], spread {:.1}%",
        margins.join(" "),
        shown.join(", "),
        spread * 100.0
    ))
}

fn inference_shape() -> Outcome {
    oracle::self_check().map_err(|e| format!("oracle: {e}"))?;
    let requests = 256;
    let strong = rt_config(Experiment::InferIt, ClientCount::Fixed(16), requests);
    let report = bench::run(&strong).map_err(|e| e.to_string())?;
    no_failures(&report)?;

    let p1 = report.points.iter().find(|p| p.services == 1).ok_or("no 16/1 point")?;
    let service_mean = mean(&col(p1, |r| r.service)).unwrap_or(0.0);
    let one_way = median(&col(p1, |r| r.communication)).unwrap_or(0) as u64 / 2;
    let inference = median(&col(p1, |r| r.inference)).unwrap_or(0) as u64;
    let predicted = oracle::mean_wait_ns(&oracle::ClosedQueue {
        clients: 16,
        requests_per_client: requests as usize,
        service_ns: inference,
        one_way_ns: one_way,
    });
    check((0.75 * 150.0 * MS..=1.25 * 150.0 * MS).contains(&service_mean), || {
        format!("16/1 mean service {} outside 150 ms +-25% (oracle {})", ms(service_mean), ms(predicted))
    })?;

    let mut rates = Vec::new();
    for p in &report.points {
        let want = f64::from(p.services) / 0.01;
        check((p.throughput_rps - want).abs() <= 0.2 * want, || {
            format!("{}: {:.0} req/s, want {want:.0} +-20%", p.label(), p.throughput_rps)
        })?;
        rates.push(format!("{}:{:.0}", p.services, p.throughput_rps));
    }

    let weak = rt_config(Experiment::InferIt, ClientCount::Match, requests);
    let report = bench::run(&weak).map_err(|e| e.to_string())?;
    no_failures(&report)?;
    let mut ratios = Vec::new();
    for p in &report.points {
        let inf = median(&col(p, |r| r.inference)).unwrap_or(0) as f64;
        let other = median(&col(p, |r| r.communication + r.service)).unwrap_or(i64::MAX) as f64;
        check(inf > 5.0 * other, || {
            format!("{}: median inference {} not > 5x comm+service {}", p.label(), ms(inf), ms(other))
        })?;
        ratios.push(format!("{}:{:.0}x", p.services, inf / other.max(1.0)));
    }
    Ok(format!(
        "16/1 mean service {} (oracle {}); req/s {}; weak inference ratio {}",
        ms(service_mean),
        ms(predicted),
        rates.join(" "),
        ratios.join(" ")
    ))
}

struct Served {
    child: std::process::Child,
    endpoints: PathBuf,
    _dir: tempfile::TempDir,
}

impl Served {
    fn start(services: u32, backend: &str) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let endpoints = dir.path().join("endpoints.txt");
        let mut child = Command::new(program())
            .args(["serve", "--services", &services.to_string(), "--backend", backend, "--endpoints-out"])
            .arg(&endpoints)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("piped"))
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        if !line.contains("services ready") {
            return Err(format!("serve did not come up: {line:?}"));
        }
        Ok(Self {
            child,
            endpoints,
            _dir: dir,
        })
    }

    fn stop(mut self) -> Result<(), String> {
        drop(self.child.stdin.take());
        let status = self.child.wait().map_err(|e| e.to_string())?;
        check(status.success(), || format!("serve exited with {status}"))
    }
}

/// Median total of a 1/1 scripted run, local launch or through an
/// endpoints file.
fn parity_run(endpoints: Option<&PathBuf>, inject: Duration) -> Result<f64, String> {
    let mut cfg = rt_config(Experiment::InferIt, ClientCount::Fixed(1), 300);
    cfg.services = vec![1];
    cfg.inject_latency = inject;
    if let Some(path) = endpoints {
        cfg.mode = Mode::Remote;
        cfg.endpoints = Some(path.clone());
    }
    let report = bench::run(&cfg).map_err(|e| e.to_string())?;
    no_failures(&report)?;
    Ok(median(&col(&report.points[0], |r| r.total)).unwrap_or(0) as f64)
}

fn remote_parity() -> Outcome {
    let local = parity_run(None, Duration::ZERO)?;
    let served = Served::start(1, "scripted:infer=10ms")?;
    let remote_plain = parity_run(Some(&served.endpoints), Duration::ZERO);
    let remote = parity_run(Some(&served.endpoints), INJECTED);
    served.stop()?;
    let (remote_plain, remote) = (remote_plain?, remote?);
    let want = 2.0 * INJECTED.as_nanos() as f64;
    let delta = remote - local;
    check((delta - want).abs() <= 0.3 * want, || {
        format!(
            "remote {} - local {} = {}, want {} +-30%",
            ms(remote),
            ms(local),
            ms(delta),
            ms(want)
        )
    })?;
    Ok(format!(
        "median total local {}, remote {} (remote without injection {}); delta {} vs injected {}",
        ms(local),
        ms(remote),
        ms(remote_plain),
        ms(delta),
        ms(want)
    ))
}

#[derive(Debug, Clone)]
enum Op {
    Submit(Vec<ServiceDescription>, Vec<TaskDescription>),
    Release(usize),
}

fn random_ops(rng: &mut StdRng, next: &mut usize, known_services: &mut Vec<String>) -> Vec<Op> {
    let mut ops = Vec::new();
    for _ in 0..rng.gen_range(5..30) {
        if rng.gen_bool(0.65) {
            let services: Vec<ServiceDescription> = (0..rng.gen_range(0..4))
                .map(|_| {
                    *next += 1;
                    ServiceDescription {
                        cores: rng.gen_range(0..4),
                        gpus: rng.gen_range(0..3),
                        startup_order: rng.gen_range(-2..3),
                        ..ServiceDescription::new(format!("s{next}"), BackendSpec::Noop)
                    }
                })
                .filter(|s| s.cores + s.gpus > 0)
                .collect();
            let visible: Vec<String> = known_services
                .iter()
                .cloned()
                .chain(services.iter().map(|s| s.uid.clone()))
                .collect();
            let tasks: Vec<TaskDescription> = (0..rng.gen_range(0..3))
                .map(|_| {
                    *next += 1;
                    let mut t = TaskDescription::new(
                        format!("t{next}"),
                        TaskPayload::Exec {
                            program: "/bin/true".into(),
                            args: Vec::new(),
                        },
                    );
                    t.cores = rng.gen_range(1..3);
                    t.gpus = rng.gen_range(0..2);
                    for _ in 0..rng.gen_range(0..3) {
                        if rng.gen_bool(0.1) {
                            t.requires_services.push("nonexistent".into());
                        } else if !visible.is_empty() {
                            t.requires_services.push(visible[rng.gen_range(0..visible.len())].clone());
                        }
                    }
                    t
                })
                .collect();
            known_services.extend(services.iter().map(|s| s.uid.clone()));
            ops.push(Op::Submit(services, tasks));
        } else {
            ops.push(Op::Release(rng.gen_range(0..64)));
        }
    }
    ops
}

/// Applies `ops`, checking slot invariants after each step; returns every
/// submit outcome for the replay comparison.
fn apply(pool: &ResourcePool, ops: &[Op]) -> Result<Vec<Result<Plan, ScheduleError>>, String> {
    let mut sched = Scheduler::new(pool.clone());
    let mut outcomes = Vec::new();
    let mut placed_services = BTreeSet::new();
    for op in ops {
        match op {
            Op::Submit(services, tasks) => {
                let before: Vec<_> = sched.live().cloned().collect();
                let r = sched.submit(services, tasks);
                match &r {
                    Ok(plan) => {
                        for (i, p) in plan.placements.iter().enumerate() {
                            if p.kind == EntityKind::Task {
                                let t = tasks.iter().find(|t| t.uid == p.uid).ok_or("task not submitted")?;
                                for dep in &t.requires_services {
                                    let in_batch = plan.position(dep);
                                    let ok = match in_batch {
                                        Some(j) => j < i,
                                        None => placed_services.contains(dep),
                                    };
                                    check(ok, || format!("{} placed before its service {dep}", p.uid))?;
                                }
                            } else {
                                placed_services.insert(p.uid.clone());
                            }
                        }
                        check(plan.placements.len() == services.len() + tasks.len(), || {
                            "partial plan".to_string()
                        })?;
                    }
                    Err(_) => {
                        let after: Vec<_> = sched.live().cloned().collect();
                        check(before == after, || "failed submit changed placements".to_string())?;
                    }
                }
                outcomes.push(r);
            }
            Op::Release(pick) => {
                let live: Vec<String> = sched.live().map(|p| p.uid.clone()).collect();
                if !live.is_empty() {
                    sched.release(&live[pick % live.len()]).map_err(|e| e.to_string())?;
                }
            }
        }
        let mut used: BTreeMap<(&str, bool, u32), &str> = BTreeMap::new();
        for p in sched.live() {
            let node = pool
                .nodes()
                .iter()
                .find(|n| n.node_id == p.node_id)
                .ok_or_else(|| format!("{} on unknown node", p.uid))?;
            for (gpu, idx, limit) in p
                .core_indices
                .iter()
                .map(|&i| (false, i, node.cores))
                .chain(p.gpu_indices.iter().map(|&i| (true, i, node.gpus)))
            {
                check(idx < limit, || format!("{} uses slot {idx} of {limit}", p.uid))?;
                if let Some(other) = used.insert((p.node_id.as_str(), gpu, idx), p.uid.as_str()) {
                    return Err(format!("{} and {other} share a slot on {}", p.uid, p.node_id));
                }
            }
        }
        let u = sched.utilization();
        check(u.cores_used <= pool.total_cores() && u.gpus_used <= pool.total_gpus(), || {
            "utilization above capacity".to_string()
        })?;
    }
    Ok(outcomes)
}

fn scheduler_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let (mut plans, mut refusals) = (0, 0);
    for iter in 0..1000 {
        let pool = ResourcePool::uniform("p", rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(0..5))
            .map_err(|e| e.to_string())?;
        let (mut next, mut known) = (0, Vec::new());
        let ops = random_ops(&mut rng, &mut next, &mut known);
        let first = apply(&pool, &ops).map_err(|e| format!("iteration {iter}: {e}"))?;
        let again = apply(&pool, &ops).map_err(|e| format!("iteration {iter} replay: {e}"))?;
        check(first == again, || format!("iteration {iter}: replanning differs"))?;
        plans += first.iter().filter(|r| r.is_ok()).count();
        refusals += first.iter().filter(|r| r.is_err()).count();
    }
    Ok(format!("1000 sequences, {plans} plans and {refusals} refusals, all deterministic"))
}

fn service_fifo() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = start_session(1, &dir, |_| {});
    launch(
        &session,
        &[ServiceDescription::new(
            "svc-fifo",
            BackendSpec::scripted(Duration::ZERO, Duration::from_millis(1)),
        )],
    )?;
    let ep = session.registry().lookup("svc-fifo").map_err(|e| e.to_string())?;
    let start = Barrier::new(64);
    let stamps: Vec<Result<[u64; 3], String>> = thread::scope(|s| {
        let handles: Vec<_> = (0..64)
            .map(|c| {
                let (addr, start) = (ep.address(), &start);
                s.spawn(move || {
                    let mut conn = net::connect(&addr, Duration::from_secs(5)).map_err(|e| e.to_string())?;
                    conn.set_read_timeout(Some(Duration::from_secs(30))).map_err(|e| e.to_string())?;
                    start.wait();
                    let mut out = Vec::new();
                    for i in 0..8 {
                        let msg = Message::Infer {
                            req_id: format!("c{c}-{i}"),
                            client_id: format!("c{c}"),
                            payload: String::new(),
                        };
                        match net::call(&mut conn, &msg).map_err(|e| e.to_string())? {
                            Message::Reply {
                                status: ReplyStatus::Ok,
                                t_svc_recv,
                                t_exec_start,
                                t_exec_end,
                                ..
                            } => out.push([t_svc_recv, t_exec_start, t_exec_end]),
                            other => return Err(format!("unexpected {other:?}")),
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| match h.join().expect("connection thread") {
                Ok(v) => v.into_iter().map(Ok).collect(),
                Err(e) => vec![Err(e)],
            })
            .collect()
    });
    session.close();
    let mut stamps: Vec<[u64; 3]> = stamps.into_iter().collect::<Result<_, _>>()?;
    stamps.sort_by_key(|t| t[1]);
    for w in stamps.windows(2) {
        check(w[0][2] <= w[1][1], || format!("execution intervals overlap: {:?} {:?}", w[0], w[1]))?;
        check(w[0][0] < w[1][0], || format!("start order differs from arrival order: {:?} {:?}", w[0], w[1]))?;
    }
    Ok(format!("{} requests over 64 connections, serial and in arrival order", stamps.len()))
}

fn lifecycle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Stop drains: the request in execution completes, queued ones are refused.
    let session = start_session(1, &dir, |_| {});
    launch(
        &session,
        &[ServiceDescription::new(
            "svc-drain",
            BackendSpec::scripted(Duration::ZERO, Duration::from_millis(300)),
        )],
    )?;
    let ep = session.registry().lookup("svc-drain").map_err(|e| e.to_string())?;
    let mut conn = net::connect(&ep.address(), Duration::from_secs(5)).map_err(|e| e.to_string())?;
    conn.set_read_timeout(Some(Duration::from_secs(10))).map_err(|e| e.to_string())?;
    for i in 0..6 {
        let msg = Message::Infer {
            req_id: format!("d{i}"),
            client_id: "drain".into(),
            payload: String::new(),
        };
        net::write_message(&mut conn, &msg).map_err(|e| e.to_string())?;
    }
    thread::sleep(Duration::from_millis(50));
    let exit = session.stop_service("svc-drain").map_err(|e| e.to_string())?;
    let mut statuses = BTreeMap::new();
    for _ in 0..6 {
        match net::read_message(&mut conn).map_err(|e| e.to_string())? {
            Message::Reply { req_id, status, .. } => {
                statuses.insert(req_id, status);
            }
            other => return Err(format!("unexpected {other:?}")),
        }
    }
    check(exit.code == Some(0), || format!("service exited with {exit:?}"))?;
    let ok = statuses.values().filter(|s| **s == ReplyStatus::Ok).count();
    let stopping = statuses.values().filter(|s| **s == ReplyStatus::Stopping).count();
    check(statuses.len() == 6 && ok == 1 && stopping == 5, || format!("drain replies {statuses:?}"))?;
    drop(session);

    // Liveness at the default one-second interval.
    let session = start_session(1, &dir, |_| {});
    let interval = RegistryConfig::default().heartbeat_interval;
    launch(&session, &[ServiceDescription::new("svc-hb", BackendSpec::Noop)])?;
    thread::sleep(interval + interval / 2);
    let registry = session.registry();
    let alive = registry.liveness("svc-hb").ok_or("no liveness record")?;
    check(alive.status == LivenessStatus::Alive, || format!("before silence: {alive:?}"))?;
    let pid = session.executor().pid("svc-hb").ok_or("no pid")?;
    // SAFETY: signals our own child.
    unsafe { libc::kill(pid as libc::pid_t, libc::SIGSTOP) };
    let last = registry.liveness("svc-hb").ok_or("no liveness record")?.last_heartbeat_at;
    let mut declared = None;
    let deadline = Instant::now() + interval * 6;
    while Instant::now() < deadline {
        let rec = registry.liveness("svc-hb").ok_or("no liveness record")?;
        if rec.status == LivenessStatus::Dead {
            declared = Some(registry.now() - rec.last_heartbeat_at.max(last));
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    // SAFETY: as above.
    unsafe { libc::kill(pid as libc::pid_t, libc::SIGCONT) };
    let silent = declared.ok_or("never declared dead")?;
    let threshold = 3 * interval.as_nanos() as u64;
    check((threshold..threshold + 100_000_000).contains(&silent), || {
        format!("declared dead after {} of silence, want 3 intervals", ms(silent as f64))
    })?;

    // No zombies: services plus a finished task, then close.
    let dir2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s2 = start_session(4, &dir2, |_| {});
    let descs: Vec<_> = (0..3)
        .map(|i| ServiceDescription::new(format!("svc-z{i}"), BackendSpec::Echo))
        .collect();
    let task = TaskDescription::new(
        "task-z",
        TaskPayload::ClientWorkload {
            requests: 10,
            payload: "z".into(),
            max_in_flight: 1,
        },
    )
    .requiring(&["svc-z0", "svc-z1", "svc-z2"]);
    s2.submit(&descs, &[task]).map_err(|e| e.to_string())?;
    let mut pids: Vec<u32> = Vec::new();
    for (uid, r) in s2.start_services(&descs.iter().map(|d| d.uid.clone()).collect::<Vec<_>>()) {
        pids.push(r.map_err(|e| format!("{uid}: {e}"))?.pid);
    }
    let outcome = s2.run_task("task-z", Duration::from_secs(30)).map_err(|e| e.to_string())?;
    check(outcome.exit.code == Some(0), || format!("task exited {:?}", outcome.exit))?;
    pids.push(pid);
    s2.close();
    session.close();
    let lingering: Vec<u32> = pids.into_iter().filter(|p| is_our_child(*p)).collect();
    check(lingering.is_empty(), || format!("children left behind: {lingering:?}"))?;
    Ok(format!(
        "stop drained 1 ok + 5 stopping, exit 0; dead after {} of silence; no children left",
        ms(silent as f64)
    ))
}

/// True while `pid` is still a child of this process, running or zombie.
fn is_our_child(pid: u32) -> bool {
    let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else { return false };
    let ppid = stat
        .rsplit_once(')')
        .and_then(|(_, rest)| rest.split_whitespace().nth(1))
        .and_then(|p| p.parse::<u32>().ok());
    ppid == Some(std::process::id())
}
