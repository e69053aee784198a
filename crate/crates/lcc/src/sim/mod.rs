//! Deterministic discrete-event simulator: event queue, per-node protocol
//! handlers, churn and failure injection, rendezvous service and metric
//! snapshots. Identical (config, seed) pairs produce identical runs.

pub mod accounting;
mod engine;
pub mod messages;
mod node;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::config::ScenarioConfig;
use crate::sim::accounting::Accounting;
use crate::sim::messages::Message;
use crate::topology::Topology;
use crate::types::{ClusterId, Distance, NodeId};

pub use engine::{RunOutput, Simulator};

/// Simulation time in microseconds.
pub(crate) type SimTime = u64;

pub(crate) const US_PER_MS: f64 = 1_000.0;
pub(crate) const US_PER_S: f64 = 1_000_000.0;
/// The rendezvous point sits outside the overlay; contacting it costs a
/// nominal fixed round trip.
pub(crate) const RP_RTT_MS: f64 = 40.0;
pub(crate) const RP_NODE: NodeId = NodeId(u32::MAX);

pub(crate) fn ms_to_us(ms: f64) -> SimTime {
    (ms * US_PER_MS).round() as SimTime
}

pub(crate) fn s_to_us(s: f64) -> SimTime {
    (s * US_PER_S).round() as SimTime
}

#[derive(Debug, Clone)]
pub(crate) enum Timer {
    KeepAlive,
    Gossip,
    Refine,
    AdvertFlush,
    PingDone { token: u64, target: NodeId, rtt_ms: f64 },
    PingFailed { token: u64, target: NodeId },
    RequestTimeout { token: u64 },
    RecoverySettle { cluster: ClusterId },
    JoinRetry,
}

#[derive(Debug, Clone)]
pub(crate) enum Control {
    NodeJoin { node: NodeId },
    NodeDeath { node: NodeId },
    Failure { index: usize },
    Rejoin { nodes: Vec<NodeId> },
    ChurnJoin,
    Snapshot,
    RecoverySweep,
    OverrideRtt { a: NodeId, b: NodeId, rtt_ms: Option<f64> },
}

#[derive(Debug, Clone)]
pub(crate) enum Payload {
    Msg { from: NodeId, msg: Message },
    Timer(Timer),
    Control(Control),
}

#[derive(Debug)]
pub(crate) struct Event {
    pub at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Ties break by insertion order for determinism.
        self.at.cmp(&other.at).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    pub msg_inserts: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: SimTime, target: NodeId, payload: Payload) {
        if matches!(payload, Payload::Msg { .. }) {
            self.msg_inserts += 1;
        }
        self.heap.push(Reverse(Event { at, seq: self.seq, target, payload }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

/// Run parameters in simulator units, derived once from the scenario config.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub cfg: ScenarioConfig,
    pub r_max: Distance,
    pub keepalive_us: SimTime,
    pub leader_timeout_us: SimTime,
    pub gossip_us: SimTime,
    pub refine_us: SimTime,
    pub settle_us: SimTime,
    pub stability_us: SimTime,
    pub request_timeout_us: SimTime,
    pub candidate_timeout_us: SimTime,
    pub probe_deadline_us: SimTime,
    pub join_timeout_us: SimTime,
    pub recovery_ack_timeout_us: SimTime,
    pub advert_min_interval_us: SimTime,
    pub ping_timeout_us: SimTime,
}

impl Params {
    pub fn new(cfg: ScenarioConfig) -> Self {
        let keepalive_us = s_to_us(cfg.keepalive_period_s);
        Params {
            r_max: Distance::ms(cfg.r_max_ms),
            keepalive_us,
            leader_timeout_us: keepalive_us * cfg.keepalive_miss_limit as u64,
            gossip_us: s_to_us(cfg.gossip_period_s),
            refine_us: s_to_us(cfg.rt_s),
            settle_us: s_to_us(cfg.recovery_settle_s),
            stability_us: s_to_us(cfg.pv_stability_threshold_s),
            request_timeout_us: 2_000_000,
            candidate_timeout_us: 2_500_000,
            probe_deadline_us: 1_200_000,
            join_timeout_us: 3_000_000,
            recovery_ack_timeout_us: 3_000_000,
            advert_min_interval_us: 1_000_000,
            ping_timeout_us: 1_500_000,
            cfg,
        }
    }
}

/// Handler-facing context: event scheduling, accounting, the delay oracle
/// and cluster-id minting. Nodes interact with each other only through
/// messages pushed here.
pub(crate) struct Ctx<'a> {
    pub now: SimTime,
    pub queue: &'a mut EventQueue,
    pub acct: &'a mut Accounting,
    pub topo: &'a Topology,
    pub params: &'a Params,
    pub death_at: &'a [SimTime],
    pub next_cluster: &'a mut u32,
}

impl<'a> Ctx<'a> {
    pub fn mint_cluster(&mut self) -> ClusterId {
        let id = ClusterId(*self.next_cluster);
        *self.next_cluster += 1;
        id
    }

    pub fn oracle_rtt(&self, a: NodeId, b: NodeId) -> f64 {
        self.topo.rtt(a, b)
    }

    fn one_way_us(&self, a: NodeId, b: NodeId) -> SimTime {
        ms_to_us(self.topo.rtt(a, b) / 2.0)
    }

    /// Send a protocol message; it is accounted now and delivered after the
    /// one-way underlay latency.
    pub fn send(&mut self, from: NodeId, to: NodeId, msg: Message, join_ctx: Option<NodeId>, probe: bool) {
        let bytes = msg.wire_bytes();
        self.acct.on_send(self.now, to, msg.tag(), bytes, join_ctx, probe);
        let at = self.now + self.one_way_us(from, to);
        self.queue.push(at, to, Payload::Msg { from, msg });
    }

    /// Send to the rendezvous point (fixed nominal latency).
    pub fn send_rv(&mut self, from: NodeId, msg: Message, join_ctx: Option<NodeId>) {
        let bytes = msg.wire_bytes();
        self.acct.on_send(self.now, RP_NODE, msg.tag(), bytes, join_ctx, false);
        let at = self.now + ms_to_us(RP_RTT_MS / 2.0);
        self.queue.push(at, RP_NODE, Payload::Msg { from, msg });
    }

    /// One measurement probe: a header each way, one RTT of time. The result
    /// lands back at the sender as a timer; a dead target times out instead.
    pub fn ping(&mut self, from: NodeId, to: NodeId, token: u64, join_ctx: Option<NodeId>, probe: bool) {
        self.acct.on_send(self.now, to, "ping", messages::PING_BYTES_EACH_WAY, join_ctx, probe);
        let owd = self.one_way_us(from, to);
        let alive_at_arrival = (self.death_at[to.0 as usize]) > self.now + owd;
        if alive_at_arrival {
            let rtt_ms = self.topo.rtt(from, to);
            self.acct
                .on_send(self.now + owd, from, "ping_reply", messages::PING_BYTES_EACH_WAY, join_ctx, probe);
            self.queue
                .push(self.now + 2 * owd, from, Payload::Timer(Timer::PingDone { token, target: to, rtt_ms }));
        } else {
            self.queue
                .push(self.now + self.params.ping_timeout_us, from, Payload::Timer(Timer::PingFailed { token, target: to }));
        }
    }

    pub fn timer(&mut self, node: NodeId, at: SimTime, t: Timer) {
        self.queue.push(at, node, Payload::Timer(t));
    }
}
