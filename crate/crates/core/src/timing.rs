//! Response-time and bootstrap-time decomposition.
//!
//! Client and service stamps come from different monotonic clocks, so the
//! response-time split only ever subtracts stamps taken on the same clock:
//! the client round trip and the service residence time. Communication is
//! whatever the client saw that the service did not account for.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since an arbitrary per-process monotonic epoch.
pub type Nanos = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TimingError {
    #[error("invalid timing envelope: {0}")]
    InvalidEnvelope(&'static str),
    #[error("invalid bootstrap record: {0}")]
    InvalidRecord(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimingEnvelope {
    /// Client clock.
    pub t_client_send: Nanos,
    /// Client clock.
    pub t_client_recv: Nanos,
    /// Service clock.
    pub t_svc_recv: Nanos,
    pub t_exec_start: Nanos,
    pub t_exec_end: Nanos,
    pub t_reply_ready: Nanos,
}

impl TimingEnvelope {
    pub fn check(&self) -> Result<(), TimingError> {
        if self.t_client_send > self.t_client_recv {
            return Err(TimingError::InvalidEnvelope("client receive before send"));
        }
        if self.t_svc_recv > self.t_exec_start {
            return Err(TimingError::InvalidEnvelope("execution started before arrival"));
        }
        if self.t_exec_start > self.t_exec_end {
            return Err(TimingError::InvalidEnvelope("execution ended before it started"));
        }
        if self.t_exec_end > self.t_reply_ready {
            return Err(TimingError::InvalidEnvelope("reply ready before execution ended"));
        }
        Ok(())
    }
}

/// `communication + service + inference == total`, exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RtDecomposition {
    pub total: i64,
    /// Negative only if the two clocks disagree about elapsed time.
    pub communication: i64,
    /// Queue wait, parsing and reply serialization.
    pub service: i64,
    pub inference: i64,
}

fn span(from: Nanos, to: Nanos) -> Result<i64, TimingError> {
    i64::try_from(to - from).map_err(|_| TimingError::InvalidEnvelope("span exceeds i64"))
}

pub fn decompose_rt(env: &TimingEnvelope) -> Result<RtDecomposition, TimingError> {
    env.check()?;
    let total = span(env.t_client_send, env.t_client_recv)?;
    let inference = span(env.t_exec_start, env.t_exec_end)?;
    let residence = span(env.t_svc_recv, env.t_reply_ready)?;
    Ok(RtDecomposition {
        total,
        communication: total - residence,
        service: residence - inference,
        inference,
    })
}

/// Manager-clock instants of one service's boot.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BootstrapRecord {
    pub service_uid: alloc::string::String,
    pub t_spawn: Nanos,
    pub t_booted: Nanos,
    pub t_initialized: Nanos,
    pub t_published: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BtDecomposition {
    pub launch: u64,
    pub init: u64,
    pub publish: u64,
}

impl BtDecomposition {
    pub fn total(&self) -> u64 {
        self.launch + self.init + self.publish
    }
}

pub fn decompose_bt(rec: &BootstrapRecord) -> Result<BtDecomposition, TimingError> {
    if rec.t_spawn > rec.t_booted {
        return Err(TimingError::InvalidRecord("booted before spawn"));
    }
    if rec.t_booted > rec.t_initialized {
        return Err(TimingError::InvalidRecord("initialized before booted"));
    }
    if rec.t_initialized > rec.t_published {
        return Err(TimingError::InvalidRecord("published before initialized"));
    }
    Ok(BtDecomposition {
        launch: rec.t_booted - rec.t_spawn,
        init: rec.t_initialized - rec.t_booted,
        publish: rec.t_published - rec.t_initialized,
    })
}
