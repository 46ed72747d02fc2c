//! Discrete-event simulation of a closed single-server FIFO queue.
//!
//! `clients` clients each keep one request outstanding. A request travels
//! `one_way_ns` to the server, waits for the single worker, is served for
//! `service_ns`, travels back, and the client sends its next one at once.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
pub struct ClosedQueue {
    pub clients: usize,
    pub requests_per_client: usize,
    pub service_ns: u64,
    pub one_way_ns: u64,
}

/// Queue wait of every request, in service order.
pub fn queue_waits(q: &ClosedQueue) -> Vec<u64> {
    let mut arrivals = BinaryHeap::new();
    for c in 0..q.clients {
        arrivals.push(Reverse((q.one_way_ns, c, 1usize)));
    }
    let mut free_at = 0u64;
    let mut waits = Vec::with_capacity(q.clients * q.requests_per_client);
    while let Some(Reverse((arrival, client, n))) = arrivals.pop() {
        let start = arrival.max(free_at);
        waits.push(start - arrival);
        free_at = start + q.service_ns;
        if n < q.requests_per_client {
            arrivals.push(Reverse((free_at + 2 * q.one_way_ns, client, n + 1)));
        }
    }
    waits
}

pub fn mean_wait_ns(q: &ClosedQueue) -> f64 {
    let w = queue_waits(q);
    w.iter().map(|&x| x as f64).sum::<f64>() / w.len().max(1) as f64
}

/// Checks the simulation against closed-form cases before it is trusted.
pub fn self_check() -> Result<(), String> {
    let ms = 1_000_000;
    // One client never waits.
    let solo = ClosedQueue {
        clients: 1,
        requests_per_client: 50,
        service_ns: 10 * ms,
        one_way_ns: ms / 2,
    };
    if queue_waits(&solo).iter().any(|&w| w != 0) {
        return Err("a single client waited".into());
    }
    // The first wave arrives together and is served back to back.
    let wave = ClosedQueue {
        clients: 4,
        requests_per_client: 1,
        service_ns: 10 * ms,
        one_way_ns: 0,
    };
    if queue_waits(&wave) != [0, 10 * ms, 20 * ms, 30 * ms] {
        return Err(format!("first wave {:?}", queue_waits(&wave)));
    }
    // Saturated steady state: every later request waits (N-1)s - 2d.
    let sat = ClosedQueue {
        clients: 16,
        requests_per_client: 40,
        service_ns: 10 * ms,
        one_way_ns: 100_000,
    };
    let steady = 15 * 10 * ms - 2 * 100_000;
    if queue_waits(&sat)[16..].iter().any(|&w| w != steady) {
        return Err("saturated waits are not (N-1)s - 2d".into());
    }
    // Round trip longer than the other clients' service: nobody queues.
    let sparse = ClosedQueue {
        clients: 4,
        requests_per_client: 20,
        service_ns: ms,
        one_way_ns: 10 * ms,
    };
    if queue_waits(&sparse)[4..].iter().any(|&w| w != 0) {
        return Err("unsaturated queue built a backlog".into());
    }
    Ok(())
}
