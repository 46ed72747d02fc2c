//! Allocation-only core of the pilot-serve runtime.
//!
//! Everything in this crate is pure: domain records for resources, services
//! and tasks, the lifecycle state machine, response-time and bootstrap-time
//! decomposition, slot placement, the length-prefixed frame codec and the
//! wire message set, plus the summary statistics used by reports. IO,
//! processes and clocks live in the `pilot-serve` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod duration;
pub mod frame;
pub mod lifecycle;
pub mod model;
pub mod scheduler;
pub mod stats;
pub mod sweep;
pub mod timing;
pub mod wire;

pub use lifecycle::{validate_transition, EntityKind, Lifecycle, LifecycleState};
pub use model::{
    BackendSpec, Endpoint, ModelError, NodeSpec, ResourcePool, ServiceDescription, StageIn,
    StageOut, TaskDescription, TaskPayload,
};
pub use scheduler::{Placement, Plan, ScheduleError, Scheduler, Utilization};
pub use timing::{
    decompose_bt, decompose_rt, BootstrapRecord, BtDecomposition, Nanos, RtDecomposition,
    TimingEnvelope, TimingError,
};
