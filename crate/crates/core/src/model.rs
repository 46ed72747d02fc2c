//! Submission records and the modeled resource pool.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use core::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duration::{format_duration, parse_duration, serde_ns};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("resource pool has no nodes")]
    EmptyPool,
    #[error("node {0:?} declares zero cores")]
    NodeWithoutCores(String),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("{uid}: must request at least one core or gpu")]
    EmptyRequest { uid: String },
    #[error("{uid}: ready_timeout must be positive")]
    ZeroReadyTimeout { uid: String },
    #[error("{uid}: tasks need at least one core")]
    TaskWithoutCores { uid: String },
    #[error("http_proxy backend needs a base_url")]
    EmptyBaseUrl,
    #[error("invalid backend spec {input:?}: {reason}")]
    BadBackend { input: String, reason: String },
    #[error("endpoint port must be in 1..=65535")]
    BadPort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: String,
    pub cores: u32,
    pub gpus: u32,
}

impl NodeSpec {
    pub fn new(node_id: impl Into<String>, cores: u32, gpus: u32) -> Self {
        Self {
            node_id: node_id.into(),
            cores,
            gpus,
        }
    }
}

/// The pilot: a fixed set of nodes whose core and GPU slots the scheduler
/// hands out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResourcePool {
    pool_id: String,
    nodes: Vec<NodeSpec>,
}

impl ResourcePool {
    pub fn new(pool_id: impl Into<String>, nodes: Vec<NodeSpec>) -> Result<Self, ModelError> {
        if nodes.is_empty() {
            return Err(ModelError::EmptyPool);
        }
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if node.cores == 0 {
                return Err(ModelError::NodeWithoutCores(node.node_id.clone()));
            }
            if !seen.insert(node.node_id.as_str()) {
                return Err(ModelError::DuplicateNode(node.node_id.clone()));
            }
        }
        Ok(Self {
            pool_id: pool_id.into(),
            nodes,
        })
    }

    /// `count` identical nodes named `node-000`, `node-001`, ...
    pub fn uniform(
        pool_id: impl Into<String>,
        count: usize,
        cores: u32,
        gpus: u32,
    ) -> Result<Self, ModelError> {
        let nodes = (0..count)
            .map(|i| NodeSpec::new(alloc::format!("node-{i:03}"), cores, gpus))
            .collect();
        Self::new(pool_id, nodes)
    }

    pub fn pool_id(&self) -> &str {
        &self.pool_id
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn total_cores(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.cores)).sum()
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.gpus)).sum()
    }
}

/// What a service does with each request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Replies immediately with an empty payload.
    Noop,
    /// Replies with the request payload unchanged.
    Echo,
    /// Sleeps `init_delay` once at boot and `infer_delay` per request.
    Scripted {
        #[serde(rename = "init_delay_ns", with = "serde_ns", default)]
        init_delay: Duration,
        #[serde(rename = "infer_delay_ns", with = "serde_ns", default)]
        infer_delay: Duration,
    },
    /// Forwards each payload to an external completion server.
    HttpProxy { base_url: String, model_name: String },
}

impl BackendSpec {
    pub fn scripted(init_delay: Duration, infer_delay: Duration) -> Self {
        Self::Scripted {
            init_delay,
            infer_delay,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::HttpProxy { base_url, .. } if base_url.trim().is_empty() => {
                Err(ModelError::EmptyBaseUrl)
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Noop => "noop",
            Self::Echo => "echo",
            Self::Scripted { .. } => "scripted",
            Self::HttpProxy { .. } => "http_proxy",
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Noop => f.write_str("noop"),
            Self::Echo => f.write_str("echo"),
            Self::Scripted {
                init_delay,
                infer_delay,
            } => write!(
                f,
                "scripted:init={},infer={}",
                format_duration(*init_delay),
                format_duration(*infer_delay)
            ),
            Self::HttpProxy {
                base_url,
                model_name,
            } => write!(f, "http:base={base_url},model={model_name}"),
        }
    }
}

/// Command-line form: `noop`, `echo`, `scripted:init=2s,infer=10ms`,
/// `http:base=URL,model=NAME`.
impl FromStr for BackendSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| ModelError::BadBackend {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, r),
            None => (s, ""),
        };
        let params = rest
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.split_once('=').ok_or_else(|| bad("parameter without '='")))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = match kind.trim() {
            "noop" | "echo" if !params.is_empty() => return Err(bad("takes no parameters")),
            "noop" => Self::Noop,
            "echo" => Self::Echo,
            "scripted" => {
                let mut init_delay = Duration::ZERO;
                let mut infer_delay = Duration::ZERO;
                for (key, value) in params {
                    let d = parse_duration(value).map_err(|e| bad(e.reason))?;
                    match key {
                        "init" => init_delay = d,
                        "infer" => infer_delay = d,
                        _ => return Err(bad("unknown scripted parameter")),
                    }
                }
                Self::Scripted {
                    init_delay,
                    infer_delay,
                }
            }
            "http" | "http_proxy" => {
                let mut base_url = String::new();
                let mut model_name = String::new();
                for (key, value) in params {
                    match key {
                        "base" => base_url = value.to_string(),
                        "model" => model_name = value.to_string(),
                        _ => return Err(bad("unknown http parameter")),
                    }
                }
                Self::HttpProxy {
                    base_url,
                    model_name,
                }
            }
            _ => return Err(bad("unknown backend kind")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescription {
    pub uid: String,
    pub backend: BackendSpec,
    pub cores: u32,
    pub gpus: u32,
    /// Lower ranks start earlier.
    pub startup_order: i32,
    #[serde(with = "serde_ns")]
    pub ready_timeout: Duration,
}

impl ServiceDescription {
    /// One core, one GPU, rank 0, 60 s readiness budget.
    pub fn new(uid: impl Into<String>, backend: BackendSpec) -> Self {
        Self {
            uid: uid.into(),
            backend,
            cores: 1,
            gpus: 1,
            startup_order: 0,
            ready_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cores + self.gpus == 0 {
            return Err(ModelError::EmptyRequest {
                uid: self.uid.clone(),
            });
        }
        if self.ready_timeout.is_zero() {
            return Err(ModelError::ZeroReadyTimeout {
                uid: self.uid.clone(),
            });
        }
        self.backend.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPayload {
    /// Run an arbitrary executable inside the task sandbox.
    Exec { program: String, args: Vec<String> },
    /// Run the built-in client workload against the task's required services.
    ClientWorkload {
        requests: u32,
        payload: String,
        max_in_flight: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageIn {
    pub source: String,
    /// Relative to the task sandbox.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOut {
    /// Relative to the task sandbox.
    pub source: String,
    pub destination: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub uid: String,
    pub cores: u32,
    pub gpus: u32,
    pub payload: TaskPayload,
    #[serde(default)]
    pub requires_services: Vec<String>,
    #[serde(default)]
    pub stage_in: Vec<StageIn>,
    #[serde(default)]
    pub stage_out: Vec<StageOut>,
}

impl TaskDescription {
    pub fn new(uid: impl Into<String>, payload: TaskPayload) -> Self {
        Self {
            uid: uid.into(),
            cores: 1,
            gpus: 0,
            payload,
            requires_services: Vec::new(),
            stage_in: Vec::new(),
            stage_out: Vec::new(),
        }
    }

    pub fn requiring(mut self, services: &[&str]) -> Self {
        self.requires_services = services.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cores == 0 {
            return Err(ModelError::TaskWithoutCores {
                uid: self.uid.clone(),
            });
        }
        Ok(())
    }
}

/// Published address of a running service instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub service_uid: String,
    pub host: String,
    pub port: u16,
    pub protocol_version: u32,
    /// Registry clock, nanoseconds.
    pub registered_at: u64,
}

impl Endpoint {
    pub fn new(service_uid: impl Into<String>, host: impl Into<String>, port: u16) -> Self {
        Self {
            service_uid: service_uid.into(),
            host: host.into(),
            port,
            protocol_version: crate::wire::PROTOCOL_VERSION,
            registered_at: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.port == 0 {
            return Err(ModelError::BadPort);
        }
        Ok(())
    }

    pub fn address(&self) -> String {
        alloc::format!("{}:{}", self.host, self.port)
    }
}
