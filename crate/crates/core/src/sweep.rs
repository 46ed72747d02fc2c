//! Experiment sweep plans.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Service counts for the bootstrap sweep at desk scale.
pub const DESK_BOOTSTRAP_SEQUENCE: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];
/// Service counts used on the full-size machine.
pub const FULL_BOOTSTRAP_SEQUENCE: [u32; 10] = [1, 2, 4, 8, 20, 40, 80, 160, 320, 640];
pub const RT_SERVICE_SEQUENCE: [u32; 5] = [1, 2, 4, 8, 16];
pub const STRONG_SCALING_CLIENTS: u32 = 16;
pub const DEFAULT_REQUESTS_PER_CLIENT: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Bootstrap,
    Strong,
    Weak,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bootstrap => "bootstrap",
            Self::Strong => "strong",
            Self::Weak => "weak",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed client count (strong scaling) or one client per service (weak).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientCount {
    Fixed(u32),
    Match,
}

impl FromStr for ClientCount {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "match" => Ok(Self::Match),
            n => match n.parse::<u32>() {
                Ok(0) => Err("client count must be positive"),
                Ok(n) => Ok(Self::Fixed(n)),
                Err(_) => Err("expected an integer or \"match\""),
            },
        }
    }
}

impl fmt::Display for ClientCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(n) => write!(f, "{n}"),
            Self::Match => f.write_str("match"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep: SweepKind,
    pub clients: u32,
    pub services: u32,
}

impl fmt::Display for SweepPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.clients, self.services)
    }
}

pub fn rt_points(services: &[u32], clients: ClientCount) -> Vec<SweepPoint> {
    services
        .iter()
        .map(|&s| match clients {
            ClientCount::Fixed(c) => SweepPoint {
                sweep: SweepKind::Strong,
                clients: c,
                services: s,
            },
            ClientCount::Match => SweepPoint {
                sweep: SweepKind::Weak,
                clients: s,
                services: s,
            },
        })
        .collect()
}

pub fn bootstrap_points(services: &[u32]) -> Vec<SweepPoint> {
    services
        .iter()
        .map(|&s| SweepPoint {
            sweep: SweepKind::Bootstrap,
            clients: 0,
            services: s,
        })
        .collect()
}
