//! A pilot session: one resource pool, one registry, one executor.
//!
//! The session submits descriptions to the scheduler, launches placed
//! services and tasks through the executor and tracks every entity's
//! lifecycle.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use pilot_serve_core::wire::ControlCommand;
use pilot_serve_core::{
    BootstrapRecord, EntityKind, Endpoint, Lifecycle, LifecycleState, Plan, ResourcePool, ScheduleError, Scheduler,
    ServiceDescription, TaskDescription,
};
use thiserror::Error;

use crate::executor::{ExecError, Executor, ExecutorConfig, ExitRecord, ServiceLaunch, StageOutReport};
use crate::registry::{Registry, RegistryConfig, RegistryError, RegistryServer};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{0} was not submitted")]
    Unknown(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub pool: ResourcePool,
    pub registry: RegistryConfig,
    /// Registry bind address.
    pub bind: String,
    pub executor: ExecutorConfig,
    pub stop_grace: Duration,
}

impl SessionConfig {
    pub fn new(pool: ResourcePool, sandbox_root: impl Into<PathBuf>, program: impl Into<PathBuf>) -> Self {
        Self {
            pool,
            registry: RegistryConfig::default(),
            bind: "127.0.0.1:0".into(),
            executor: ExecutorConfig::new(sandbox_root, program),
            stop_grace: Duration::from_secs(5),
        }
    }
}

#[derive(Debug)]
pub struct TaskOutcome {
    pub exit: ExitRecord,
    pub staged_out: StageOutReport,
}

pub struct Session {
    registry: Arc<Registry>,
    server: RegistryServer,
    scheduler: Mutex<Scheduler>,
    executor: Executor,
    services: Mutex<HashMap<String, ServiceDescription>>,
    tasks: Mutex<HashMap<String, TaskDescription>>,
    lifecycles: Mutex<HashMap<String, Lifecycle>>,
    stop_grace: Duration,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Session {
    pub fn start(config: SessionConfig) -> Result<Self, SessionError> {
        let registry = Arc::new(Registry::new(config.registry));
        let server = RegistryServer::start(Arc::clone(&registry), &config.bind)?;
        let executor = Executor::new(config.executor, Arc::clone(&registry), server.address());
        Ok(Self {
            registry,
            server,
            scheduler: Mutex::new(Scheduler::new(config.pool)),
            executor,
            services: Mutex::default(),
            tasks: Mutex::default(),
            lifecycles: Mutex::default(),
            stop_grace: config.stop_grace,
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn registry_address(&self) -> String {
        self.server.address()
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn state(&self, uid: &str) -> Option<LifecycleState> {
        lock(&self.lifecycles).get(uid).map(Lifecycle::state)
    }

    pub fn history(&self, uid: &str) -> Option<Vec<LifecycleState>> {
        lock(&self.lifecycles).get(uid).map(|l| l.history().to_vec())
    }

    fn advance(&self, uid: &str, to: LifecycleState) {
        if let Some(l) = lock(&self.lifecycles).get_mut(uid) {
            if let Err(e) = l.advance(to) {
                warn!("{uid}: {e}");
            }
        }
    }

    /// Places services and tasks; on success every entity is SCHEDULED.
    pub fn submit(&self, services: &[ServiceDescription], tasks: &[TaskDescription]) -> Result<Plan, SessionError> {
        let plan = lock(&self.scheduler).submit(services, tasks)?;
        let mut lifecycles = lock(&self.lifecycles);
        for s in services {
            self.registry.expect(&s.uid);
            lock(&self.services).insert(s.uid.clone(), s.clone());
            let mut l = Lifecycle::new(EntityKind::Service);
            l.advance(LifecycleState::Scheduled).expect("NEW to SCHEDULED");
            lifecycles.insert(s.uid.clone(), l);
        }
        for t in tasks {
            lock(&self.tasks).insert(t.uid.clone(), t.clone());
            let mut l = Lifecycle::new(EntityKind::Task);
            l.advance(LifecycleState::Scheduled).expect("NEW to SCHEDULED");
            lifecycles.insert(t.uid.clone(), l);
        }
        Ok(plan)
    }

    /// Launches one scheduled service and waits for its `booted` report.
    pub fn launch_service(&self, uid: &str) -> Result<ServiceLaunch, SessionError> {
        let desc = lock(&self.services)
            .get(uid)
            .cloned()
            .ok_or_else(|| SessionError::Unknown(uid.into()))?;
        let placement = lock(&self.scheduler)
            .placement(uid)
            .cloned()
            .ok_or_else(|| SessionError::Unknown(uid.into()))?;
        self.advance(uid, LifecycleState::Launching);
        match self.executor.launch_service(&placement, &desc) {
            Ok(launch) => {
                self.advance(uid, LifecycleState::Initializing);
                Ok(launch)
            }
            Err(e) => {
                self.fail(uid);
                Err(e.into())
            }
        }
    }

    fn fail(&self, uid: &str) {
        self.advance(uid, LifecycleState::Failed);
        let _ = lock(&self.scheduler).release(uid);
    }

    /// Launches `uids` concurrently, then waits until all are published.
    /// Launch failures are returned per uid; only successfully booted
    /// services are awaited.
    pub fn start_services(&self, uids: &[String]) -> Vec<(String, Result<ServiceLaunch, SessionError>)> {
        let launches: Vec<(String, Result<ServiceLaunch, SessionError>)> = thread::scope(|s| {
            let handles: Vec<_> = uids
                .iter()
                .map(|uid| (uid.clone(), s.spawn(move || self.launch_service(uid))))
                .collect();
            handles
                .into_iter()
                .map(|(uid, h)| (uid, h.join().expect("launch thread panicked")))
                .collect()
        });
        let booted: Vec<String> = launches
            .iter()
            .filter(|(_, r)| r.is_ok())
            .map(|(u, _)| u.clone())
            .collect();
        let timeout = booted
            .iter()
            .filter_map(|u| lock(&self.services).get(u).map(|d| d.ready_timeout))
            .max()
            .unwrap_or_default();
        let ready = self.registry.wait_ready(&booted, timeout);
        let pending: Vec<String> = match &ready {
            Ok(_) => Vec::new(),
            Err(RegistryError::Timeout(report)) => report.pending.clone(),
            Err(_) => booted.clone(),
        };
        launches
            .into_iter()
            .map(|(uid, r)| {
                let r = r.and_then(|launch| {
                    if pending.contains(&uid) {
                        let _ = self.executor.kill(&uid);
                        self.fail(&uid);
                        Err(SessionError::Registry(RegistryError::timeout_for(&uid)))
                    } else {
                        self.advance(&uid, LifecycleState::Ready);
                        Ok(launch)
                    }
                });
                (uid, r)
            })
            .collect()
    }

    pub fn bootstrap_record(&self, uid: &str) -> Option<BootstrapRecord> {
        self.registry.bootstrap_record(uid)
    }

    pub fn endpoints(&self, uids: &[String]) -> Result<BTreeMap<String, Endpoint>, SessionError> {
        uids.iter()
            .map(|u| Ok((u.clone(), self.registry.lookup(u)?)))
            .collect()
    }

    /// Waits for the task's services, stages in and launches it, waits for
    /// exit and stages out.
    pub fn run_task(&self, uid: &str, timeout: Duration) -> Result<TaskOutcome, SessionError> {
        let desc = lock(&self.tasks)
            .get(uid)
            .cloned()
            .ok_or_else(|| SessionError::Unknown(uid.into()))?;
        let placement = lock(&self.scheduler)
            .placement(uid)
            .cloned()
            .ok_or_else(|| SessionError::Unknown(uid.into()))?;
        let required = desc.requires_services.clone();
        let ready_timeout = required
            .iter()
            .filter_map(|u| lock(&self.services).get(u).map(|d| d.ready_timeout))
            .max()
            .unwrap_or_default();
        let launched = self
            .registry
            .wait_ready(&required, ready_timeout)
            .map_err(SessionError::from)
            .and_then(|_| self.endpoints(&required))
            .and_then(|eps| {
                self.advance(uid, LifecycleState::Launching);
                Ok(self.executor.launch_task(&placement, &desc, &eps)?)
            });
        if let Err(e) = launched {
            self.fail(uid);
            return Err(e);
        }
        self.advance(uid, LifecycleState::Running);
        let exit = match self.executor.wait(uid, timeout)? {
            Some(rec) => rec,
            None => {
                self.executor.kill(uid)?;
                self.executor.wait(uid, Duration::from_secs(5))?.expect("killed child exits")
            }
        };
        self.advance(uid, exit.state);
        let staged_out = self.executor.stage_out(uid, &desc);
        let _ = lock(&self.scheduler).release(uid);
        Ok(TaskOutcome { exit, staged_out })
    }

    /// Sends `stop` and waits for the process to exit; kills it after the
    /// grace period plus a margin, or at once if `stop` was not delivered.
    pub fn stop_service(&self, uid: &str) -> Result<ExitRecord, SessionError> {
        let patience = match self.registry.send_control(uid, ControlCommand::Stop, Some(self.stop_grace)) {
            Ok(_) => self.stop_grace + Duration::from_secs(1),
            Err(e) => {
                warn!("stop {uid}: {e}");
                Duration::ZERO
            }
        };
        let exit = match self.executor.wait(uid, patience)? {
            Some(rec) => rec,
            None => {
                self.executor.kill(uid)?;
                self.executor.wait(uid, Duration::from_secs(5))?.expect("killed child exits")
            }
        };
        self.advance(uid, exit.state);
        let _ = lock(&self.scheduler).release(uid);
        Ok(exit)
    }

    /// Stops every running service (concurrently), kills stragglers and reaps
    /// all children.
    pub fn close(&self) -> Vec<ExitRecord> {
        let running = self.executor.running();
        let services: Vec<String> = {
            let known = lock(&self.services);
            running.iter().filter(|u| known.contains_key(*u)).cloned().collect()
        };
        thread::scope(|s| {
            for uid in &services {
                s.spawn(move || {
                    if let Err(e) = self.stop_service(uid) {
                        warn!("stop {uid}: {e}");
                    }
                });
            }
        });
        let mut exits = self.executor.reap();
        exits.extend(self.executor.close());
        info!("session closed, {} exits collected", exits.len());
        exits
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.executor.close();
        self.server.shutdown();
    }
}
