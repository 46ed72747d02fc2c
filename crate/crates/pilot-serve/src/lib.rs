//! Service-oriented pilot runtime: registry, executor, long-running
//! inference services, clients and the benchmark harness.

pub mod backend;
pub mod bench;
pub mod client;
pub mod clock;
pub mod executor;
pub mod net;
pub mod registry;
pub mod service;
pub mod session;

pub use pilot_serve_core as core;

/// Environment variables passed to launched services and tasks.
pub mod env {
    pub const UID: &str = "PS_UID";
    /// JSON-encoded backend spec.
    pub const BACKEND: &str = "PS_BACKEND";
    pub const REGISTRY: &str = "PS_REGISTRY";
    pub const GPUS: &str = "PS_GPUS";
    /// Path of the endpoints file handed to tasks.
    pub const ENDPOINTS: &str = "PS_ENDPOINTS";
    pub const HEARTBEAT_MS: &str = "PS_HEARTBEAT_MS";
    pub const QUEUE_CAP: &str = "PS_QUEUE_CAP";
    pub const HOST: &str = "PS_HOST";
}
