#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use pilot_serve::registry::{Registry, RegistryConfig, RegistryServer};
use pilot_serve::service::{self, Outcome, ServiceConfig, ServiceError};
use pilot_serve_core::wire::ControlCommand;
use pilot_serve_core::{BackendSpec, Endpoint};

pub fn program() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pilot-serve"))
}

/// Tests in one binary run on parallel threads; latency assertions take this
/// so they do not compete for the CPU.
pub fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// A registry and one service running on threads of the test process.
pub struct LocalService {
    pub registry: Arc<Registry>,
    pub server: RegistryServer,
    pub endpoint: Endpoint,
    pub handle: Option<JoinHandle<Result<Outcome, ServiceError>>>,
}

impl LocalService {
    pub fn start(uid: &str, backend: BackendSpec) -> Self {
        Self::start_with(uid, backend, RegistryConfig::default(), |_| {})
    }

    pub fn start_with(
        uid: &str,
        backend: BackendSpec,
        registry_config: RegistryConfig,
        tweak: impl FnOnce(&mut ServiceConfig),
    ) -> Self {
        let registry = Arc::new(Registry::new(registry_config));
        let server = RegistryServer::start(Arc::clone(&registry), "127.0.0.1:0").expect("registry binds");
        registry.expect(uid);
        let mut config = ServiceConfig::new(uid, backend, server.address());
        tweak(&mut config);
        let handle = thread::spawn(move || service::run(config));
        registry
            .wait_ready(&[uid.to_string()], Duration::from_secs(10))
            .expect("service publishes");
        let endpoint = registry.lookup(uid).expect("published endpoint");
        Self {
            registry,
            server,
            endpoint,
            handle: Some(handle),
        }
    }

    /// Sends `stop` and returns the service's outcome.
    pub fn stop(&mut self, grace: Duration) -> Result<Outcome, ServiceError> {
        self.registry
            .send_control(&self.endpoint.service_uid, ControlCommand::Stop, Some(grace))
            .expect("stop acknowledged");
        self.handle.take().expect("running").join().expect("service thread")
    }
}

impl Drop for LocalService {
    fn drop(&mut self) {
        if self.handle.is_some() {
            let _ = self.stop(Duration::from_secs(1));
        }
        self.server.shutdown();
    }
}

/// True while `pid` is still a child of this process, running or zombie.
pub fn is_our_child(pid: u32) -> bool {
    let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else { return false };
    // Fields after the parenthesized command: state, ppid, ...
    let ppid = stat
        .rsplit_once(')')
        .and_then(|(_, rest)| rest.split_whitespace().nth(1))
        .and_then(|p| p.parse::<u32>().ok());
    ppid == Some(std::process::id())
}
