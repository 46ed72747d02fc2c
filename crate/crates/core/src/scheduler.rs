//! First-fit slot placement over a [`ResourcePool`].
//!
//! Services are placed before tasks, in ascending `startup_order` (ties keep
//! submission order). Each item lands on the first node, in pool order, with
//! enough free cores and GPUs, taking the lowest free indices. Placement is
//! single-node and all-or-nothing per `submit` call.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifecycle::EntityKind;
use crate::model::{ModelError, ResourcePool, ServiceDescription, TaskDescription};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Demand {
    pub cores: u32,
    pub gpus: u32,
}

impl core::fmt::Display for Demand {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} cores/{} gpus", self.cores, self.gpus)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("{uid}: needs {needed}, best node has {available} free")]
    InsufficientResources {
        uid: String,
        needed: Demand,
        available: Demand,
    },
    #[error("task {task} requires unknown service {service}")]
    DependencyUnsatisfiable { task: String, service: String },
    #[error("uid {0} already submitted")]
    DuplicateUid(String),
    #[error("{uid} has no live placement")]
    NotPlaced { uid: String },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub uid: String,
    pub kind: EntityKind,
    pub node_id: String,
    pub core_indices: Vec<u32>,
    pub gpu_indices: Vec<u32>,
}

/// Placements in launch order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub placements: Vec<Placement>,
}

impl Plan {
    pub fn position(&self, uid: &str) -> Option<usize> {
        self.placements.iter().position(|p| p.uid == uid)
    }

    pub fn get(&self, uid: &str) -> Option<&Placement> {
        self.placements.iter().find(|p| p.uid == uid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeUtilization {
    pub node_id: String,
    pub cores_used: u32,
    pub gpus_used: u32,
    pub cores_total: u32,
    pub gpus_total: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utilization {
    pub cores_used: u64,
    pub gpus_used: u64,
    pub per_node: Vec<NodeUtilization>,
}

/// Counts the slots held by `placements` on each node of `pool`.
pub fn utilization<'a>(
    pool: &ResourcePool,
    placements: impl IntoIterator<Item = &'a Placement>,
) -> Utilization {
    let mut per_node: Vec<NodeUtilization> = pool
        .nodes()
        .iter()
        .map(|n| NodeUtilization {
            node_id: n.node_id.clone(),
            cores_used: 0,
            gpus_used: 0,
            cores_total: n.cores,
            gpus_total: n.gpus,
        })
        .collect();
    for p in placements {
        if let Some(node) = per_node.iter_mut().find(|n| n.node_id == p.node_id) {
            node.cores_used += p.core_indices.len() as u32;
            node.gpus_used += p.gpu_indices.len() as u32;
        }
    }
    Utilization {
        cores_used: per_node.iter().map(|n| u64::from(n.cores_used)).sum(),
        gpus_used: per_node.iter().map(|n| u64::from(n.gpus_used)).sum(),
        per_node,
    }
}

#[derive(Debug, Clone)]
struct NodeSlots {
    cores: Vec<bool>,
    gpus: Vec<bool>,
}

fn free_count(slots: &[bool]) -> u32 {
    slots.iter().filter(|used| !**used).count() as u32
}

fn take_lowest(slots: &mut [bool], n: u32) -> Vec<u32> {
    let picked: Vec<u32> = slots
        .iter()
        .enumerate()
        .filter(|(_, used)| !**used)
        .take(n as usize)
        .map(|(i, _)| i as u32)
        .collect();
    for &i in &picked {
        slots[i as usize] = true;
    }
    picked
}

impl NodeSlots {
    fn free(&self) -> Demand {
        Demand {
            cores: free_count(&self.cores),
            gpus: free_count(&self.gpus),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pool: ResourcePool,
    slots: Vec<NodeSlots>,
    live: BTreeMap<String, Placement>,
    submitted: BTreeSet<String>,
    services: BTreeSet<String>,
}

impl Scheduler {
    pub fn new(pool: ResourcePool) -> Self {
        let slots = pool
            .nodes()
            .iter()
            .map(|n| NodeSlots {
                cores: alloc::vec![false; n.cores as usize],
                gpus: alloc::vec![false; n.gpus as usize],
            })
            .collect();
        Self {
            pool,
            slots,
            live: BTreeMap::new(),
            submitted: BTreeSet::new(),
            services: BTreeSet::new(),
        }
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn live(&self) -> impl Iterator<Item = &Placement> {
        self.live.values()
    }

    pub fn placement(&self, uid: &str) -> Option<&Placement> {
        self.live.get(uid)
    }

    pub fn submit(
        &mut self,
        services: &[ServiceDescription],
        tasks: &[TaskDescription],
    ) -> Result<Plan, ScheduleError> {
        let mut batch = BTreeSet::new();
        for uid in services.iter().map(|s| &s.uid).chain(tasks.iter().map(|t| &t.uid)) {
            if self.submitted.contains(uid) || !batch.insert(uid.as_str()) {
                return Err(ScheduleError::DuplicateUid(uid.clone()));
            }
        }
        for s in services {
            s.validate()?;
        }
        let batch_services: BTreeSet<&str> = services.iter().map(|s| s.uid.as_str()).collect();
        for t in tasks {
            t.validate()?;
            if let Some(missing) = t
                .requires_services
                .iter()
                .find(|s| !batch_services.contains(s.as_str()) && !self.services.contains(*s))
            {
                return Err(ScheduleError::DependencyUnsatisfiable {
                    task: t.uid.clone(),
                    service: missing.clone(),
                });
            }
        }

        let mut ordered: Vec<&ServiceDescription> = services.iter().collect();
        ordered.sort_by_key(|s| s.startup_order);
        let items = ordered
            .iter()
            .map(|s| (s.uid.as_str(), EntityKind::Service, s.cores, s.gpus))
            .chain(
                tasks
                    .iter()
                    .map(|t| (t.uid.as_str(), EntityKind::Task, t.cores, t.gpus)),
            );

        let mut plan = Plan::default();
        for (uid, kind, cores, gpus) in items {
            match self.place(uid, kind, Demand { cores, gpus }) {
                Ok(p) => plan.placements.push(p),
                Err(e) => {
                    for p in &plan.placements {
                        self.free(p);
                        self.live.remove(&p.uid);
                    }
                    return Err(e);
                }
            }
        }
        for p in &plan.placements {
            self.submitted.insert(p.uid.clone());
            if p.kind == EntityKind::Service {
                self.services.insert(p.uid.clone());
            }
        }
        Ok(plan)
    }

    fn place(&mut self, uid: &str, kind: EntityKind, need: Demand) -> Result<Placement, ScheduleError> {
        let target = self
            .slots
            .iter()
            .position(|s| {
                let free = s.free();
                free.cores >= need.cores && free.gpus >= need.gpus
            });
        let Some(idx) = target else {
            let available = self
                .slots
                .iter()
                .map(NodeSlots::free)
                .max_by_key(|d| (d.gpus.min(need.gpus), d.cores.min(need.cores), d.gpus, d.cores))
                .unwrap_or_default();
            return Err(ScheduleError::InsufficientResources {
                uid: uid.into(),
                needed: need,
                available,
            });
        };
        let node = &mut self.slots[idx];
        let placement = Placement {
            uid: uid.into(),
            kind,
            node_id: self.pool.nodes()[idx].node_id.clone(),
            core_indices: take_lowest(&mut node.cores, need.cores),
            gpu_indices: take_lowest(&mut node.gpus, need.gpus),
        };
        self.live.insert(placement.uid.clone(), placement.clone());
        Ok(placement)
    }

    fn free(&mut self, p: &Placement) {
        if let Some(idx) = self.pool.nodes().iter().position(|n| n.node_id == p.node_id) {
            let node = &mut self.slots[idx];
            for &i in &p.core_indices {
                node.cores[i as usize] = false;
            }
            for &i in &p.gpu_indices {
                node.gpus[i as usize] = false;
            }
        }
    }

    /// Returns the freed placement.
    pub fn release(&mut self, uid: &str) -> Result<Placement, ScheduleError> {
        let p = self
            .live
            .remove(uid)
            .ok_or_else(|| ScheduleError::NotPlaced { uid: uid.into() })?;
        self.free(&p);
        Ok(p)
    }

    pub fn utilization(&self) -> Utilization {
        utilization(&self.pool, self.live.values())
    }
}
