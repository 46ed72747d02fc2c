use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pilot_serve::bench::{self, Experiment, ExperimentConfig, Mode, Report};
use pilot_serve::client::{ClientConfig, ClientSession, LatencyInjection};
use pilot_serve::clock::tighten_timer_slack;
use pilot_serve::env;
use pilot_serve::service::{self, ServiceConfig};
use pilot_serve::session::{Session, SessionConfig};
use pilot_serve_core::duration::{format_duration, parse_duration};
use pilot_serve_core::sweep::ClientCount;
use pilot_serve_core::{BackendSpec, Endpoint, ResourcePool, ServiceDescription};

#[derive(Parser)]
#[command(name = "pilot-serve", version, about = "Pilot runtime with long-running inference services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a bootstrap or response-time experiment.
    Bench(BenchArgs),
    /// Run as a service process (configured through PS_* variables).
    Service,
    /// Run the client workload of a task against PS_ENDPOINTS.
    Client(ClientArgs),
    /// Launch services locally and keep them up for remote-mode benchmarks.
    Serve(ServeArgs),
}

fn duration_arg(s: &str) -> Result<Duration, String> {
    parse_duration(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct BenchArgs {
    /// bootstrap | noop-rt | infer-it
    #[arg(long)]
    exp: Experiment,
    /// local launches the services; remote reads them from --endpoints.
    #[arg(long, default_value = "local")]
    mode: Mode,
    /// Comma-separated service counts to sweep.
    #[arg(long, value_delimiter = ',')]
    services: Option<Vec<u32>>,
    /// Fixed client count (strong scaling) or `match` (weak scaling).
    #[arg(long, default_value = "16")]
    clients: ClientCount,
    /// Requests per client.
    #[arg(long, default_value_t = 1024)]
    requests: u32,
    /// noop | echo | scripted:init=2s,infer=10ms | http:base=URL,model=NAME
    #[arg(long)]
    backend: Option<BackendSpec>,
    #[arg(long, default_value_t = 1)]
    max_in_flight: u32,
    /// One-way delay added to every frame by the client transport.
    #[arg(long, value_parser = duration_arg, default_value = "0ms")]
    inject_latency: Duration,
    /// Jitter sigma of the injected delay (default: 10% of the delay).
    #[arg(long, value_parser = duration_arg)]
    jitter: Option<Duration>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// CSV output; the JSON report is written next to it.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Include per-request and per-service rows in the JSON report.
    #[arg(long)]
    raw: bool,
    /// `uid host port` lines (remote mode).
    #[arg(long)]
    endpoints: Option<PathBuf>,
    /// Use the full-size bootstrap sequence up to 640 services.
    #[arg(long)]
    full_scale: bool,
    /// Synthetic delay before each service spawn.
    #[arg(long, value_parser = duration_arg, default_value = "0ms")]
    launch_delay: Duration,
    #[arg(long, value_parser = duration_arg, default_value = "30s")]
    boot_timeout: Duration,
    #[arg(long, default_value = "ping")]
    payload: String,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, default_value_t = 1)]
    requests: u32,
    #[arg(long, default_value = "ping")]
    payload: String,
    #[arg(long, default_value_t = 1)]
    max_in_flight: u32,
    #[arg(long, value_parser = duration_arg, default_value = "0ms")]
    inject_latency: Duration,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 1)]
    services: u32,
    #[arg(long, default_value = "echo")]
    backend: BackendSpec,
    /// Where to write the endpoints file.
    #[arg(long, default_value = "endpoints.txt")]
    endpoints_out: PathBuf,
    /// Keep serving for this long; without it, serve until stdin closes.
    #[arg(long = "for", value_parser = duration_arg)]
    duration: Option<Duration>,
    /// Interface the services bind and advertise.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Service => run_service(),
        Command::Client(args) => run_client(args),
        Command::Serve(args) => run_serve(args),
    };
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}

fn current_exe() -> PathBuf {
    std::env::current_exe().unwrap_or_else(|_| PathBuf::from("pilot-serve"))
}

fn run_bench(a: BenchArgs) -> i32 {
    let mut cfg = ExperimentConfig::new(a.exp, current_exe());
    if a.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(s) = a.services {
        cfg.services = s;
    }
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    cfg.mode = a.mode;
    cfg.clients = a.clients;
    cfg.requests_per_client = a.requests;
    cfg.max_in_flight = a.max_in_flight;
    cfg.inject_latency = a.inject_latency;
    cfg.jitter = a.jitter;
    cfg.seed = a.seed;
    cfg.endpoints = a.endpoints;
    cfg.launch_delay = a.launch_delay;
    cfg.boot_timeout = a.boot_timeout;
    cfg.payload = a.payload;

    let report = match bench::run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    print_summary(&report);
    match report.write(&a.out, a.raw) {
        Ok(json) => println!("wrote {} and {}", a.out.display(), json.display()),
        Err(e) => {
            eprintln!("error: writing {}: {e}", a.out.display());
            return 2;
        }
    }
    if report.passed() {
        0
    } else {
        1
    }
}

fn print_summary(report: &Report) {
    println!("{} ({})", report.experiment, report.mode);
    for p in &report.points {
        let parts: Vec<String> = p
            .components
            .iter()
            .map(|c| {
                format!(
                    "{} {}",
                    c.component,
                    format_duration(Duration::from_nanos(c.summary.p50.max(0) as u64))
                )
            })
            .collect();
        let rate = if p.throughput_rps > 0.0 {
            format!(", {:.0} req/s", p.throughput_rps)
        } else {
            String::new()
        };
        println!(
            "  {:<16} median {}{}, failures {}/{}",
            p.label(),
            parts.join(" / "),
            rate,
            p.failures,
            p.attempted
        );
        for e in &p.errors {
            println!("    {e}");
        }
    }
}

fn run_service() -> i32 {
    let config = match ServiceConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match service::run(config) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_client(a: ClientArgs) -> i32 {
    tighten_timer_slack();
    let Some(raw) = std::env::var(env::ENDPOINTS).ok() else {
        eprintln!("error: {} is not set", env::ENDPOINTS);
        return 64;
    };
    let endpoints: BTreeMap<String, Endpoint> = match serde_json::from_str(&raw) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: bad {}: {e}", env::ENDPOINTS);
            return 64;
        }
    };
    let mut config = ClientConfig::new(std::env::var(env::UID).unwrap_or_else(|_| "client".into()));
    if !a.inject_latency.is_zero() {
        config.latency = Some(LatencyInjection::new(a.inject_latency, a.seed));
    }
    let session = match ClientSession::connect(endpoints.into_values().collect(), config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let payloads = vec![a.payload; a.requests as usize];
    let results = session.infer_many(&payloads, a.max_in_flight.max(1) as usize);
    let mut failed = 0;
    for r in &results {
        match r {
            Ok(reply) => {
                let d = reply.decompose();
                println!(
                    "{} {} total={} communication={} service={} inference={}",
                    reply.req_id, reply.service_uid, d.total, d.communication, d.service, d.inference
                );
            }
            Err(e) => {
                failed += 1;
                eprintln!("{e}");
            }
        }
    }
    println!("ok {}/{}", results.len() - failed, results.len());
    i32::from(failed > 0)
}

fn run_serve(a: ServeArgs) -> i32 {
    let sandbox = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let pool = ResourcePool::uniform("desk", a.services.max(1) as usize, 1, 1).expect("positive node count");
    let mut sc = SessionConfig::new(pool, sandbox.path(), current_exe());
    sc.executor.extra_env.push((env::HOST.into(), a.host));
    let session = match Session::start(sc) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let descs: Vec<ServiceDescription> = (0..a.services)
        .map(|i| ServiceDescription::new(format!("svc-{i:03}"), a.backend.clone()))
        .collect();
    if let Err(e) = session.submit(&descs, &[]) {
        eprintln!("error: {e}");
        return 2;
    }
    let uids: Vec<String> = descs.iter().map(|d| d.uid.clone()).collect();
    for (uid, r) in session.start_services(&uids) {
        if let Err(e) = r {
            eprintln!("error: {uid}: {e}");
            session.close();
            return 2;
        }
    }
    let eps: Vec<Endpoint> = match session.endpoints(&uids) {
        Ok(m) => m.into_values().collect(),
        Err(e) => {
            eprintln!("error: {e}");
            session.close();
            return 2;
        }
    };
    if let Err(e) = std::fs::write(&a.endpoints_out, bench::format_endpoints(&eps)) {
        eprintln!("error: writing {}: {e}", a.endpoints_out.display());
        session.close();
        return 2;
    }
    println!("{} services ready, endpoints in {}", eps.len(), a.endpoints_out.display());
    match a.duration {
        Some(d) => std::thread::sleep(d),
        None => {
            let _ = std::io::stdin().read_to_end(&mut Vec::new());
        }
    }
    let exits = session.close();
    let clean = exits.iter().all(|e| e.code == Some(0));
    i32::from(!clean)
}
