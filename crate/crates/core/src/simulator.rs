//! Discrete-event model of a batching inference server.
//!
//! A single server drains a FIFO queue. Whenever it is idle and requests are
//! waiting it merges up to `max_batch` of them into one batch, asks the
//! policy for a speculation length for that batch size, and runs the batch to
//! completion before looking at the queue again. Requests arriving mid-batch
//! wait for the next one. Latency is finish time minus arrival time, so it
//! includes queueing.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use crate::cost_model::LinearStepModel;
use crate::engine::{run_batch, DraftOracle, SequenceState};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng;
use crate::traffic::Request;

/// Requests per timeline point.
pub const TIMELINE_GROUP: usize = 40;

/// Default cap on merged requests.
pub const DEFAULT_MAX_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub max_batch: usize,
    pub policy: Policy,
    pub seed: u64,
}

impl ServerConfig {
    pub fn new(policy: Policy, seed: u64) -> Self {
        Self { max_batch: DEFAULT_MAX_BATCH, policy, seed }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch;
        self
    }
}

/// Timestamps are in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestRecord {
    pub request_id: u64,
    pub t_a: f64,
    pub t_start: f64,
    pub t_b: f64,
    pub latency: f64,
    pub batch_size: usize,
    pub spec_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub records: Vec<RequestRecord>,
    pub avg_latency: f64,
    /// `(arrival of the group's first request, mean latency of the group)`.
    pub timeline: Vec<(f64, f64)>,
    pub policy: String,
    pub seed: u64,
}

impl SimulationReport {
    /// Checks conservation and timestamp ordering against the workload that
    /// produced the report.
    pub fn validate(&self, workload: &[Request]) -> Result<()> {
        if self.records.len() != workload.len() {
            return Err(Error::Contract("record count differs from workload size"));
        }
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.request_id).collect();
        let mut expected: Vec<u64> = workload.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        expected.sort_unstable();
        if ids != expected {
            return Err(Error::Contract("records do not cover the workload exactly once"));
        }
        for r in &self.records {
            if !(r.t_a <= r.t_start && r.t_start <= r.t_b) || r.latency < 0.0 {
                return Err(Error::Contract("request served before arrival or finished before start"));
            }
        }
        if self.records.windows(2).any(|w| w[1].t_start < w[0].t_start) {
            return Err(Error::Contract("service order is not FIFO"));
        }
        Ok(())
    }
}

/// Removes the first `min(len, max_batch)` requests from the queue.
pub fn form_batch(queue: &mut VecDeque<Request>, max_batch: usize) -> Result<Vec<Request>> {
    if queue.is_empty() {
        return Err(Error::Contract("cannot form a batch from an empty queue"));
    }
    if max_batch == 0 {
        return Err(Error::InvalidParameter("max batch must be >= 1"));
    }
    let n = queue.len().min(max_batch);
    Ok(queue.drain(..n).collect())
}

/// Groups records (in arrival order) into consecutive runs of `group_size`.
pub fn summarize(records: Vec<RequestRecord>, group_size: usize, policy: String, seed: u64) -> Result<SimulationReport> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no records to summarize"));
    }
    if group_size == 0 {
        return Err(Error::InvalidParameter("group size must be >= 1"));
    }
    let mean = |rs: &[RequestRecord]| rs.iter().map(|r| r.latency).sum::<f64>() / rs.len() as f64;
    let mut ordered = records.clone();
    ordered.sort_by(|a, b| a.t_a.total_cmp(&b.t_a).then(a.request_id.cmp(&b.request_id)));
    let timeline = ordered.chunks(group_size).map(|g| (g[0].t_a, mean(g))).collect();
    Ok(SimulationReport { avg_latency: mean(&records), records, timeline, policy, seed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival(usize),
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Serves `workload` (sorted by arrival) to completion.
///
/// Batch service times come from [`run_batch`] with a random stream derived
/// from the server seed and the id of the batch's first request, so the same
/// batch draws the same accepted lengths under every policy.
pub fn run_simulation<O: DraftOracle>(
    workload: &[Request],
    server: &ServerConfig,
    cost: &LinearStepModel,
    oracle: &O,
) -> Result<SimulationReport> {
    if workload.is_empty() {
        return Err(Error::InvalidParameter("empty workload"));
    }
    if workload.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return Err(Error::Contract("workload is not sorted by arrival"));
    }
    if server.max_batch == 0 {
        return Err(Error::InvalidParameter("max batch must be >= 1"));
    }

    let mut events = BinaryHeap::with_capacity(workload.len() + 1);
    let mut seq = 0u64;
    for (i, req) in workload.iter().enumerate() {
        events.push(Reverse(Event { time: req.arrival, seq, kind: EventKind::Arrival(i) }));
        seq += 1;
    }

    let mut queue: VecDeque<Request> = VecDeque::new();
    let mut records = Vec::with_capacity(workload.len());
    let mut busy = false;
    while let Some(Reverse(event)) = events.pop() {
        let now = event.time;
        match event.kind {
            EventKind::Arrival(i) => queue.push_back(workload[i]),
            EventKind::Completion => busy = false,
        }
        // Let every event at this instant land before forming a batch.
        if events.peek().is_some_and(|Reverse(next)| next.time == now) {
            continue;
        }
        if busy || queue.is_empty() {
            continue;
        }
        let batch = form_batch(&mut queue, server.max_batch)?;
        let decision = server.policy.decide(batch.len());
        let mut states = batch
            .iter()
            .map(|r| SequenceState::new(r.id, r.gen_len))
            .collect::<Result<Vec<_>>>()?;
        let mut stream = rng::stream(server.seed, rng::stream_id(&[batch[0].id]));
        let result = run_batch(&mut states, decision.chosen_s, cost, oracle, &mut stream)?;
        for (req, &(_, offset_ms)) in batch.iter().zip(&result.per_sequence_finish) {
            let t_b = now + offset_ms / 1000.0;
            records.push(RequestRecord {
                request_id: req.id,
                t_a: req.arrival,
                t_start: now,
                t_b,
                latency: t_b - req.arrival,
                batch_size: batch.len(),
                spec_len: decision.chosen_s,
            });
        }
        busy = true;
        events.push(Reverse(Event {
            time: now + result.total_time_ms / 1000.0,
            seq,
            kind: EventKind::Completion,
        }));
        seq += 1;
    }
    summarize(records, TIMELINE_GROUP, server.policy.label(), server.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acceptance::AcceptanceTrace;
    use crate::engine::TraceSampler;
    use alloc::vec;

    fn req(id: u64, arrival: f64, gen_len: usize) -> Request {
        Request { id, arrival, gen_len }
    }

    fn costs() -> LinearStepModel {
        LinearStepModel::new(vec![(1, 1.0), (16, 4.0)], 5.0, vec![(1, 0.2), (16, 0.5)]).unwrap()
    }

    fn perfect() -> TraceSampler {
        TraceSampler::new(AcceptanceTrace::new(vec![80], 80).unwrap())
    }

    #[test]
    fn form_batch_cases() {
        let mut q: VecDeque<Request> = (0..3).map(|i| req(i, 0.0, 1)).collect();
        assert_eq!(form_batch(&mut q, 16).unwrap().len(), 3);
        assert!(q.is_empty());
        assert!(form_batch(&mut q, 16).is_err());

        let mut q: VecDeque<Request> = (0..40).map(|i| req(i, 0.0, 1)).collect();
        let b = form_batch(&mut q, 16).unwrap();
        assert_eq!(b.iter().map(|r| r.id).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
        assert_eq!(q.len(), 24);

        let mut q: VecDeque<Request> = (0..16).map(|i| req(i, 0.0, 1)).collect();
        assert_eq!(form_batch(&mut q, 16).unwrap().len(), 16);
    }

    #[test]
    fn single_request_has_no_queueing() {
        let server = ServerConfig::new(Policy::Fixed(4), 1);
        let rep = run_simulation(&[req(0, 2.5, 8)], &server, &costs(), &perfect()).unwrap();
        let r = rep.records[0];
        // two steps of 4*1 + 5 + 4*0.2 = 9.8 ms
        assert_eq!(r.t_start, 2.5);
        assert!((r.latency - 0.0196).abs() < 1e-12);
        assert_eq!((r.batch_size, r.spec_len), (1, 4));
    }

    #[test]
    fn simultaneous_arrivals_share_a_batch() {
        let server = ServerConfig::new(Policy::Fixed(0), 1);
        let rep = run_simulation(&[req(0, 1.0, 3), req(1, 1.0, 6)], &server, &costs(), &perfect()).unwrap();
        // b = 2: alpha interpolated to 1.2, step = 6.2 ms
        let step = (1.0 + 3.0 / 15.0 + 5.0) / 1000.0;
        assert_eq!(rep.records[0].batch_size, 2);
        assert!((rep.records[0].latency - 3.0 * step).abs() < 1e-12);
        assert!((rep.records[1].latency - 6.0 * step).abs() < 1e-12);
    }

    #[test]
    fn arrivals_during_service_wait_for_next_batch() {
        let server = ServerConfig::new(Policy::Fixed(0), 1);
        let rep = run_simulation(&[req(0, 0.0, 10), req(1, 0.001, 1)], &server, &costs(), &perfect()).unwrap();
        assert_eq!(rep.records[0].batch_size, 1);
        assert!((rep.records[1].t_start - 0.06).abs() < 1e-12);
        rep.validate(&[req(0, 0.0, 10), req(1, 0.001, 1)]).unwrap();
    }

    #[test]
    fn unsorted_workload_is_rejected() {
        let server = ServerConfig::new(Policy::Fixed(0), 1);
        let w = [req(0, 1.0, 1), req(1, 0.5, 1)];
        assert!(matches!(run_simulation(&w, &server, &costs(), &perfect()), Err(Error::Contract(_))));
    }

    fn record(id: u64, t_a: f64, latency: f64) -> RequestRecord {
        RequestRecord { request_id: id, t_a, t_start: t_a, t_b: t_a + latency, latency, batch_size: 1, spec_len: 0 }
    }

    #[test]
    fn summarize_groups() {
        let recs: Vec<_> = (0..80).map(|i| record(i, i as f64, 2.0)).collect();
        let rep = summarize(recs, 40, "x".into(), 0).unwrap();
        assert_eq!(rep.timeline, vec![(0.0, 2.0), (40.0, 2.0)]);
        assert_eq!(rep.avg_latency, 2.0);

        let recs: Vec<_> = (0..85).map(|i| record(i, i as f64, i as f64)).collect();
        let rep = summarize(recs, 40, "x".into(), 0).unwrap();
        assert_eq!(rep.timeline.len(), 3);
        assert_eq!(rep.timeline[2], (80.0, 82.0));
        assert!(summarize(vec![], 40, "x".into(), 0).is_err());
    }
}
