//! Event loop, rendezvous service, churn and failure injection, metric
//! snapshots and invariant sweeps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterState;
use crate::config::{FailureSelector, Protocol, ScenarioConfig};
use crate::locating::RingLevels;
use crate::meshtree::TreeSnapshot;
use crate::metrics::{self, MetricSnapshot, RecoveryReport};
use crate::sim::accounting::{Accounting, Adjustment, AdjustReason, JoinOutcome, JoinRecord};
use crate::sim::messages::Message;
use crate::sim::node::NodeState;
use crate::sim::{ms_to_us, s_to_us, Control, Ctx, EventQueue, Params, Payload, SimTime, Timer, RP_NODE, RP_RTT_MS, US_PER_S};
use crate::topology::{Topology, TopologyModel};
use crate::types::{ClusterId, Distance, NodeId, NodeProfile};

const RECOVERY_SWEEP_US: SimTime = 100_000;
const RECOVERY_HORIZON_US: SimTime = 120_000_000;
const MAX_VIOLATIONS: usize = 200;

#[derive(Debug)]
struct RecoveryTracker {
    failure_at_us: SimTime,
    /// Affected node -> resume time (None until resumed).
    affected: BTreeMap<NodeId, Option<SimTime>>,
    crashed_leader_clusters: BTreeSet<ClusterId>,
    done: bool,
}

/// Terminal per-node digest for scripted assertions.
#[derive(Debug, Clone)]
pub struct NodeSummary {
    pub id: NodeId,
    pub alive: bool,
    pub joined: bool,
    pub is_leader: bool,
    pub leading: Option<ClusterId>,
    pub fanout_max: u32,
    pub mesh_degree: usize,
    pub parent: Option<NodeId>,
    pub dist_ms: Option<f64>,
    /// (cluster, leader, state, self-migrated) per membership.
    pub views: Vec<(ClusterId, NodeId, ClusterState, bool)>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub snapshots: Vec<MetricSnapshot>,
    pub join_records: Vec<JoinRecord>,
    pub adjustments: Vec<Adjustment>,
    pub recovery_reports: Vec<RecoveryReport>,
    pub violations: Vec<String>,
    pub nodes: Vec<NodeSummary>,
    pub total_control_bytes: u64,
    pub total_sends: u64,
    pub queue_msg_inserts: u64,
    pub bytes_by_tag: BTreeMap<&'static str, u64>,
    pub final_tree: TreeSnapshot,
    pub final_ardp: Option<f64>,
    pub connected_fraction: f64,
    pub live_nodes: usize,
    pub leaders: usize,
    pub clusters: usize,
    pub last_join_s: f64,
    pub duration_s: f64,
    pub event_log: Option<String>,
    /// Admissions that would have driven a cluster's capacity negative
    /// (must stay zero).
    pub capacity_violations: u64,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        metrics::snapshots_to_csv(&self.snapshots)
    }
}

pub struct Simulator {
    params: Params,
    topo: Topology,
    queue: EventQueue,
    acct: Accounting,
    nodes: Vec<Option<NodeState>>,
    alive: Vec<bool>,
    death_at: Vec<SimTime>,
    fanout_of: Vec<Option<u32>>,
    rng: ChaCha8Rng,
    next_cluster: u32,
    rv_registry: BTreeSet<NodeId>,
    snapshots: Vec<MetricSnapshot>,
    violations: Vec<String>,
    trackers: Vec<RecoveryTracker>,
    adjust_mark: usize,
    join_records: Vec<JoinRecord>,
    last_join_us: SimTime,
    horizon_us: SimTime,
    now: SimTime,
    sweep_armed: bool,
    capacity_violations: u64,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, crate::topology::TopologyError> {
        cfg.validate().expect("config must validate before simulation");
        let capacity = cfg.n
            + if cfg.churn_join_rate > 0.0 {
                (cfg.churn_join_rate * cfg.duration_s).ceil() as usize
            } else {
                0
            };
        let topo = Topology::generate(capacity, cfg.topology_model, cfg.seed)?;
        Ok(Self::with_topology(cfg, topo))
    }

    /// Build over an explicit topology (scripted tests).
    pub fn with_topology(cfg: ScenarioConfig, topo: Topology) -> Self {
        let capacity = topo.len();
        let seed = cfg.seed;
        let horizon_us = s_to_us(cfg.duration_s);
        let keep_log = cfg.event_log;
        Simulator {
            params: Params::new(cfg),
            topo,
            queue: EventQueue::default(),
            acct: Accounting::new(keep_log),
            nodes: (0..capacity).map(|_| None).collect(),
            alive: vec![false; capacity],
            death_at: vec![SimTime::MAX; capacity],
            fanout_of: vec![None; capacity],
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x656e_6769_6e65),
            next_cluster: 0,
            rv_registry: BTreeSet::new(),
            snapshots: Vec::new(),
            violations: Vec::new(),
            trackers: Vec::new(),
            adjust_mark: 0,
            join_records: Vec::new(),
            last_join_us: 0,
            horizon_us,
            now: 0,
            sweep_armed: false,
            capacity_violations: 0,
        }
    }

    /// Scripted underlay delay change at a given sim time (tests).
    pub fn schedule_override(&mut self, at_s: f64, a: NodeId, b: NodeId, rtt_ms: Option<f64>) {
        self.queue.push(
            s_to_us(at_s),
            RP_NODE,
            Payload::Control(Control::OverrideRtt { a, b, rtt_ms }),
        );
    }

    fn schedule_initial(&mut self) {
        let n = self.params.cfg.n;
        let source = self.params.cfg.source;
        let join_rate = self.params.cfg.churn_join_rate;
        let window_s = self.params.cfg.join_window_s;
        let failure_times: Vec<f64> = self.params.cfg.failures.iter().map(|f| f.at_s).collect();
        let snapshot_period_s = self.params.cfg.snapshot_period_s;
        // The source enters first; everyone else arrives across the window.
        let mut joins: Vec<(SimTime, NodeId)> = Vec::with_capacity(n);
        for i in 0..n as u32 {
            if i == source {
                joins.push((1_000, NodeId(i)));
            } else {
                let at = 2_000 + (self.rng.gen::<f64>() * window_s * US_PER_S) as SimTime;
                joins.push((at, NodeId(i)));
            }
        }
        for (at, node) in joins {
            self.queue.push(at, RP_NODE, Payload::Control(Control::NodeJoin { node }));
        }
        if join_rate > 0.0 {
            let first = s_to_us(window_s) + self.exp_us(join_rate);
            self.queue.push(first, RP_NODE, Payload::Control(Control::ChurnJoin));
        }
        for (index, at_s) in failure_times.into_iter().enumerate() {
            self.queue.push(s_to_us(at_s), RP_NODE, Payload::Control(Control::Failure { index }));
        }
        if snapshot_period_s > 0.0 && self.horizon_us > 0 {
            self.queue.push(s_to_us(snapshot_period_s), RP_NODE, Payload::Control(Control::Snapshot));
        }
    }

    fn exp_us(&mut self, rate_per_s: f64) -> SimTime {
        let u: f64 = self.rng.gen::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        ((-u.ln() / rate_per_s) * US_PER_S).round() as SimTime
    }

    pub fn run(mut self) -> RunOutput {
        self.schedule_initial();
        while let Some(ev) = self.queue.pop() {
            if ev.at > self.horizon_us {
                break;
            }
            self.now = ev.at;
            match ev.payload {
                Payload::Control(c) => self.handle_control(c),
                Payload::Msg { from, msg } if ev.target == RP_NODE => self.handle_rv(from, msg),
                Payload::Msg { from, msg } => self.dispatch_msg(ev.target, from, msg),
                Payload::Timer(t) => self.dispatch_timer(ev.target, t),
            }
            self.resolve_pending_decisions();
        }
        self.now = self.horizon_us;
        self.finalize()
    }

    fn dispatch_msg(&mut self, target: NodeId, from: NodeId, msg: Message) {
        let idx = target.0 as usize;
        if idx >= self.nodes.len() || !self.alive[idx] {
            return;
        }
        let mut node = self.nodes[idx].take().expect("alive node has state");
        {
            let mut ctx = Ctx {
                now: self.now,
                queue: &mut self.queue,
                acct: &mut self.acct,
                topo: &self.topo,
                params: &self.params,
                death_at: &self.death_at,
                next_cluster: &mut self.next_cluster,
            };
            node.on_message(from, msg, &mut ctx);
        }
        self.nodes[idx] = Some(node);
    }

    fn dispatch_timer(&mut self, target: NodeId, timer: Timer) {
        let idx = target.0 as usize;
        if idx >= self.nodes.len() || !self.alive[idx] {
            return;
        }
        let mut node = self.nodes[idx].take().expect("alive node has state");
        {
            let mut ctx = Ctx {
                now: self.now,
                queue: &mut self.queue,
                acct: &mut self.acct,
                topo: &self.topo,
                params: &self.params,
                death_at: &self.death_at,
                next_cluster: &mut self.next_cluster,
            };
            node.on_timer(timer, &mut ctx);
        }
        self.nodes[idx] = Some(node);
    }

    fn handle_rv(&mut self, from: NodeId, msg: Message) {
        match msg {
            Message::RvRegister => {
                self.rv_registry.insert(from);
            }
            Message::RvUnregister => {
                self.rv_registry.remove(&from);
            }
            Message::RvComplaint { dead } => {
                if !self.alive.get(dead.0 as usize).copied().unwrap_or(false) {
                    self.rv_registry.remove(&dead);
                }
            }
            Message::RvBootRequest { .. } => {
                let live: Vec<NodeId> = self
                    .rv_registry
                    .iter()
                    .copied()
                    .filter(|n| self.alive[n.0 as usize] && *n != from)
                    .collect();
                let boots = match self.params.cfg.protocol {
                    Protocol::Lcc => {
                        if live.is_empty() {
                            Vec::new()
                        } else {
                            vec![live[self.rng.gen_range(0..live.len())]]
                        }
                    }
                    Protocol::Flat => {
                        let mut pool = live;
                        let mut out = Vec::new();
                        while out.len() < self.params.cfg.flat_bootstrap_links && !pool.is_empty() {
                            let i = self.rng.gen_range(0..pool.len());
                            out.push(pool.swap_remove(i));
                        }
                        out
                    }
                };
                let reply = Message::RvBootReply { boots };
                self.acct.on_send(self.now, from, reply.tag(), reply.wire_bytes(), Some(from), false);
                let at = self.now + ms_to_us(RP_RTT_MS / 2.0);
                self.queue.push(at, from, Payload::Msg { from: RP_NODE, msg: reply });
            }
            _ => {}
        }
    }

    fn handle_control(&mut self, control: Control) {
        match control {
            Control::NodeJoin { node } => self.node_join(node),
            Control::NodeDeath { node } => self.crash_node(node),
            Control::Failure { index } => self.apply_failure(index),
            Control::Rejoin { nodes } => {
                for n in nodes {
                    self.death_at[n.0 as usize] = SimTime::MAX;
                    self.node_join(n);
                }
            }
            Control::ChurnJoin => self.churn_join(),
            Control::Snapshot => {
                self.take_snapshot();
                let next = self.now + s_to_us(self.params.cfg.snapshot_period_s);
                if next <= self.horizon_us {
                    self.queue.push(next, RP_NODE, Payload::Control(Control::Snapshot));
                }
            }
            Control::RecoverySweep => self.recovery_sweep(),
            Control::OverrideRtt { a, b, rtt_ms } => match rtt_ms {
                Some(ms) => self.topo.override_rtt(a, b, ms),
                None => self.topo.clear_override(a, b),
            },
        }
    }

    fn node_join(&mut self, node: NodeId) {
        let idx = node.0 as usize;
        if idx >= self.nodes.len() || self.alive[idx] {
            return;
        }
        let fanout = match self.fanout_of[idx] {
            Some(f) => f,
            None => {
                let mut f = self.params.cfg.fanout_dist.sample(&mut self.rng);
                if node.0 == self.params.cfg.source {
                    // The stream source needs serving headroom.
                    f = f.max(8);
                }
                self.fanout_of[idx] = Some(f);
                f
            }
        };
        let rings = RingLevels::new(self.params.cfg.alpha_ms, self.params.cfg.max_level)
            .expect("validated config");
        let profile = NodeProfile::new(node, fanout, Distance::ms(self.params.cfg.r_max_ms), self.now);
        let seed = self
            .params
            .cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(node.0 as u64);
        let mut state = NodeState::new(node, profile, rings, self.params.cfg.k_per_level, seed);
        self.alive[idx] = true;
        // Churn lifetimes apply to everyone but the source.
        if self.params.cfg.churn_lifetime_param > 0.0
            && self.params.cfg.churn_join_rate > 0.0
            && node.0 != self.params.cfg.source
        {
            let life = self.exp_us(self.params.cfg.churn_lifetime_param);
            let death = self.now + life;
            self.death_at[idx] = death;
            self.queue.push(death, RP_NODE, Payload::Control(Control::NodeDeath { node }));
        }
        {
            let mut ctx = Ctx {
                now: self.now,
                queue: &mut self.queue,
                acct: &mut self.acct,
                topo: &self.topo,
                params: &self.params,
                death_at: &self.death_at,
                next_cluster: &mut self.next_cluster,
            };
            state.start_join(&mut ctx);
        }
        self.nodes[idx] = Some(state);
        self.last_join_us = self.last_join_us.max(self.now);
    }

    fn churn_join(&mut self) {
        // Claim the next never-used slot; ids are never reused.
        let slot = (0..self.nodes.len()).find(|&i| self.nodes[i].is_none() && self.fanout_of[i].is_none());
        if let Some(idx) = slot {
            self.node_join(NodeId(idx as u32));
        }
        if self.params.cfg.churn_join_rate > 0.0 {
            let next = self.now + self.exp_us(self.params.cfg.churn_join_rate);
            if next <= self.horizon_us {
                self.queue.push(next, RP_NODE, Payload::Control(Control::ChurnJoin));
            }
        }
    }

    fn crash_node(&mut self, node: NodeId) {
        let idx = node.0 as usize;
        if idx >= self.nodes.len() || !self.alive[idx] {
            return;
        }
        self.alive[idx] = false;
        self.death_at[idx] = self.death_at[idx].min(self.now);
        self.rv_registry.remove(&node);
        // Crashes are silent: state is dropped, no goodbye messages.
        self.nodes[idx] = None;
    }

    fn apply_failure(&mut self, index: usize) {
        let entry = self.params.cfg.failures[index].clone();
        let source = NodeId(self.params.cfg.source);
        let victims: Vec<NodeId> = match &entry.selector {
            FailureSelector::RandomFraction(p) => {
                let mut pool: Vec<NodeId> = self.live_joined_nodes().into_iter().filter(|&n| n != source).collect();
                let count = ((pool.len() as f64) * p).round() as usize;
                let mut out = Vec::new();
                for _ in 0..count.min(pool.len()) {
                    let i = self.rng.gen_range(0..pool.len());
                    out.push(pool.swap_remove(i));
                }
                out
            }
            FailureSelector::LeadersFraction(p) => {
                let mut pool: Vec<NodeId> = self.current_leaders().into_iter().filter(|&n| n != source).collect();
                let count = ((pool.len() as f64) * p).round() as usize;
                let mut out = Vec::new();
                for _ in 0..count.min(pool.len()) {
                    let i = self.rng.gen_range(0..pool.len());
                    out.push(pool.swap_remove(i));
                }
                out
            }
            FailureSelector::Nodes(ids) => ids.iter().map(|&i| NodeId(i)).filter(|&n| n != source).collect(),
        };
        if victims.is_empty() {
            self.violations.push(format!(
                "{:.1}s warning: failure[{index}] selector matched zero nodes",
                self.now as f64 / US_PER_S
            ));
            return;
        }
        // Affected set from the pre-failure delivery tree.
        let tree = self.build_tree();
        let victim_set: BTreeSet<NodeId> = victims.iter().copied().collect();
        let mut affected = BTreeMap::new();
        for &m in &tree.members {
            if victim_set.contains(&m) || m == tree.source {
                continue;
            }
            let mut cur = m;
            let mut hops = 0;
            while let Some(&p) = tree.parent.get(&cur) {
                if victim_set.contains(&p) {
                    affected.insert(m, None);
                    break;
                }
                cur = p;
                hops += 1;
                if hops > self.nodes.len() {
                    break;
                }
            }
        }
        let crashed_leader_clusters: BTreeSet<ClusterId> = victims
            .iter()
            .filter_map(|&v| self.nodes[v.0 as usize].as_ref().and_then(|n| n.leading))
            .collect();
        for &v in &victims {
            self.crash_node(v);
        }
        self.trackers.push(RecoveryTracker {
            failure_at_us: self.now,
            affected,
            crashed_leader_clusters,
            done: false,
        });
        if !self.sweep_armed {
            self.sweep_armed = true;
            self.queue.push(self.now + RECOVERY_SWEEP_US, RP_NODE, Payload::Control(Control::RecoverySweep));
        }
        if let Some(rejoin_at) = entry.rejoin_at_s {
            self.queue.push(
                s_to_us(rejoin_at),
                RP_NODE,
                Payload::Control(Control::Rejoin { nodes: victims }),
            );
        }
    }

    fn recovery_sweep(&mut self) {
        let tree = self.build_tree();
        let check = tree.check();
        let now = self.now;
        let mut any_open = false;
        for t in &mut self.trackers {
            if t.done {
                continue;
            }
            let mut open = 0;
            for (node, resumed) in t.affected.iter_mut() {
                if resumed.is_some() {
                    continue;
                }
                if !self.alive[node.0 as usize] {
                    continue; // dead or departed: censored later
                }
                if check.connected.contains(node) {
                    *resumed = Some(now);
                } else {
                    open += 1;
                }
            }
            if open == 0 || now.saturating_sub(t.failure_at_us) > RECOVERY_HORIZON_US {
                t.done = true;
            } else {
                any_open = true;
            }
        }
        if any_open {
            self.queue.push(now + RECOVERY_SWEEP_US, RP_NODE, Payload::Control(Control::RecoverySweep));
        } else {
            self.sweep_armed = false;
        }
    }

    fn resolve_pending_decisions(&mut self) {
        if self.acct.pending_decisions.is_empty() {
            return;
        }
        let decisions = std::mem::take(&mut self.acct.pending_decisions);
        for d in decisions {
            let (nearest_leader, nearest_dist) = if self.params.cfg.protocol == Protocol::Lcc {
                self.current_leaders()
                    .into_iter()
                    .filter(|&l| l != d.node)
                    .map(|l| (l, self.topo.rtt(d.node, l)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0 .0.cmp(&b.0 .0)))
                    .map(|(l, dd)| (Some(l), dd))
                    .unwrap_or((None, f64::INFINITY))
            } else {
                (None, f64::INFINITY)
            };
            let nearest_in_scope = nearest_dist <= self.params.cfg.r_max_ms;
            let joined_nearest = match (&d.outcome, nearest_leader) {
                (JoinOutcome::Joined { leaders }, Some(nl)) => leaders.contains(&nl),
                _ => false,
            };
            let phase = self.acct.join_phase.get(&d.node);
            let (locate_bytes, probe_bytes, probe_msgs) = phase
                .map(|p| (p.total_bytes, p.probe_bytes, p.probe_msgs))
                .unwrap_or((0, 0, 0));
            self.join_records.push(JoinRecord {
                node: d.node,
                started_us: d.started_us,
                decided_us: d.decided_us,
                outcome: d.outcome,
                requested_count: d.requested_count,
                probes_sent: probe_msgs as usize,
                locate_bytes,
                probe_bytes,
                nearest_leader,
                nearest_in_scope,
                joined_nearest,
            });
        }
    }

    fn live_joined_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .flatten()
            .filter(|n| self.alive[n.id.0 as usize] && n.joined)
            .map(|n| n.id)
            .collect()
    }

    fn current_leaders(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .flatten()
            .filter(|n| self.alive[n.id.0 as usize] && n.profile.is_leader && n.leading.is_some())
            .map(|n| n.id)
            .collect()
    }

    fn build_tree(&self) -> TreeSnapshot {
        let mut members = BTreeSet::new();
        let mut parent = BTreeMap::new();
        for n in self.nodes.iter().flatten() {
            if self.alive[n.id.0 as usize] && n.joined {
                members.insert(n.id);
            }
        }
        for n in self.nodes.iter().flatten() {
            if !members.contains(&n.id) {
                continue;
            }
            if let Some(p) = n.routing.parent {
                if members.contains(&p) {
                    parent.insert(n.id, p);
                }
            }
        }
        TreeSnapshot { source: NodeId(self.params.cfg.source), parent, members }
    }

    fn take_snapshot(&mut self) {
        let tree = self.build_tree();
        let at_s = self.now as f64 / US_PER_S;
        let live = tree.members.len();
        let leaders = self.current_leaders().len();
        let clusters: BTreeSet<ClusterId> = self
            .nodes
            .iter()
            .flatten()
            .filter(|n| self.alive[n.id.0 as usize])
            .flat_map(|n| n.leading)
            .collect();
        let ardp_result = metrics::ardp(&tree, &self.topo, tree.source);
        let stress = if self.topo.model() == TopologyModel::TransitStub {
            metrics::link_stress(&tree, &self.topo).ok()
        } else {
            None
        };
        let window_s = self.params.cfg.snapshot_period_s;
        let adjustments = self.acct.adjustments[self.adjust_mark..]
            .iter()
            .filter(|a| a.reason != AdjustReason::Bootstrap)
            .count();
        self.adjust_mark = self.acct.adjustments.len();
        let window_bytes = self.acct.take_window_bytes();
        let snap = MetricSnapshot {
            at_s,
            ardp: ardp_result.ardp,
            connected_fraction: ardp_result.connected_fraction,
            stress_mean: stress.as_ref().map(|s| s.mean),
            stress_max: stress.as_ref().map(|s| s.max),
            adjustments_per_node_per_hour: metrics::adjustment_rate(adjustments, live, window_s),
            control_kbps_per_node: metrics::control_kbps(window_bytes, live, window_s),
            live_nodes: live,
            clusters: clusters.len(),
            leaders,
        };
        self.snapshots.push(snap);
        if self.params.cfg.invariants_check {
            self.invariant_sweep(&tree);
        }
    }

    fn invariant_sweep(&mut self, tree: &TreeSnapshot) {
        let at_s = self.now as f64 / US_PER_S;
        let mut push = |violations: &mut Vec<String>, text: String| {
            if violations.len() < MAX_VIOLATIONS {
                violations.push(format!("{at_s:.1}s {text}"));
            }
        };
        for n in self.nodes.iter().flatten() {
            if !self.alive[n.id.0 as usize] {
                continue;
            }
            // Degree safety.
            if n.mesh.degree_used() > n.profile.fanout_max as usize {
                push(
                    &mut self.violations,
                    format!("degree violation at {}: {} > {}", n.id, n.mesh.degree_used(), n.profile.fanout_max),
                );
            }
            // Parent link consistency (single data copy is structural).
            if let Some(p) = n.routing.parent {
                if !n.mesh.links.contains_key(&p) {
                    push(&mut self.violations, format!("parent {} of {} is not a mesh neighbor", p, n.id));
                }
            }
            // Scope: a stabilized view never tolerates a known out-of-scope leader.
            for (cid, view) in &n.views {
                if view.state == ClusterState::Stabilized {
                    if let Some(d) = view.leader_dist {
                        if d.as_ms() > self.params.cfg.r_max_ms + 1e-6 {
                            push(
                                &mut self.violations,
                                format!("scope violation at {} in {}: leader {} at {}", n.id, cid, view.leader, d),
                            );
                        }
                    }
                }
            }
        }
        let check = tree.check();
        for n in check.loops {
            push(&mut self.violations, format!("routing loop through {n}"));
        }
    }

    fn finalize(mut self) -> RunOutput {
        self.take_snapshot();
        let tree = self.build_tree();
        let ardp_result = metrics::ardp(&tree, &self.topo, tree.source);
        let recovery_reports = self
            .trackers
            .iter()
            .map(|t| {
                let resume_s: Vec<f64> = t
                    .affected
                    .values()
                    .flatten()
                    .map(|&r| (r - t.failure_at_us) as f64 / US_PER_S)
                    .collect();
                let censored = t
                    .affected
                    .iter()
                    .filter(|(n, r)| r.is_none() && self.alive[n.0 as usize])
                    .count();
                let clusters_recovered = t
                    .crashed_leader_clusters
                    .iter()
                    .filter(|cid| {
                        self.nodes
                            .iter()
                            .flatten()
                            .any(|n| self.alive[n.id.0 as usize] && n.leading == Some(**cid))
                    })
                    .count();
                RecoveryReport {
                    failure_at_s: t.failure_at_us as f64 / US_PER_S,
                    affected: t.affected.len(),
                    resume_s,
                    censored,
                    clusters_recovered,
                    clusters_affected: t.crashed_leader_clusters.len(),
                }
            })
            .collect();
        let nodes: Vec<NodeSummary> = self
            .nodes
            .iter()
            .flatten()
            .map(|n| NodeSummary {
                id: n.id,
                alive: self.alive[n.id.0 as usize],
                joined: n.joined,
                is_leader: n.profile.is_leader,
                leading: n.leading,
                fanout_max: n.profile.fanout_max,
                mesh_degree: n.mesh.degree_used(),
                parent: n.routing.parent,
                dist_ms: n.routing.dist.map(|d| d.as_ms()),
                views: n
                    .views
                    .iter()
                    .map(|(&c, v)| (c, v.leader, v.state, v.migrated_set.contains(&n.id)))
                    .collect(),
            })
            .collect();
        let leaders = self.current_leaders().len();
        let clusters: BTreeSet<ClusterId> = self
            .nodes
            .iter()
            .flatten()
            .filter(|n| self.alive[n.id.0 as usize])
            .flat_map(|n| n.leading)
            .collect();
        let event_log = self.acct.event_log_text();
        RunOutput {
            snapshots: self.snapshots,
            join_records: self.join_records,
            adjustments: self.acct.adjustments.clone(),
            recovery_reports,
            violations: self.violations,
            nodes,
            total_control_bytes: self.acct.total_bytes,
            total_sends: self.acct.sends,
            queue_msg_inserts: self.queue.msg_inserts,
            bytes_by_tag: self.acct.bytes_by_tag.clone(),
            final_ardp: ardp_result.ardp,
            connected_fraction: ardp_result.connected_fraction,
            live_nodes: tree.members.len(),
            leaders,
            clusters: clusters.len(),
            last_join_s: self.last_join_us as f64 / US_PER_S,
            duration_s: self.horizon_us as f64 / US_PER_S,
            final_tree: tree,
            event_log,
            capacity_violations: self.capacity_violations,
        }
    }
}
