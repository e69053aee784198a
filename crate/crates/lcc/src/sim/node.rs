//! Per-node protocol state machine: locating, cluster membership, leader
//! election and recovery, mesh maintenance and routing. All state is owned
//! by the node and mutated only from its own event handlers.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{
    rank_by_priority, ClusterState, ClusterView, MemberInfo, PriorityVector, RecoveryBookkeeping,
};
use crate::config::{Protocol, RecoveryScheme};
use crate::locating::{
    candidates_from_probes, choose_queried, LocateDecision, LocateRun, LocateStep, LocatingSystem,
    RingLevels,
};
use crate::meshtree::{MeshLink, MeshScope, MeshState, RouteAdvert, RoutingState};
use crate::sim::accounting::{AdjustReason, JoinOutcome, PendingJoinDecision};
use crate::sim::messages::{DigestEntry, GossipEntryWire, Message};
use crate::sim::{Ctx, Timer};
use crate::types::{ClusterId, Distance, NodeId, NodeProfile};

const DIGEST_LEN: usize = 8;
const BOOT_RETRY_LIMIT: u32 = 5;
const GOSSIP_MISS_LIMIT: u32 = 3;
const TOPLEVEL_LINK_TARGET: usize = 3;
/// Gossip-learned leaders are only probed for the locating system while the
/// tracked set is small; leaders always keep theirs warm.
const MEMBER_LOCSYS_TARGET: usize = 16;

#[derive(Debug, Clone)]
pub(crate) struct GossipInfo {
    pub last_heard_us: u64,
    pub is_leader: bool,
    pub cluster: Option<ClusterId>,
    pub misses: u32,
}

#[derive(Debug)]
struct LocateCtl {
    run: LocateRun,
    outstanding: Option<(NodeId, u64)>,
    boot_attempts: u32,
}

#[derive(Debug)]
struct ProbeJob {
    newcomer: NodeId,
    d_to_me: f64,
    results: Vec<(NodeId, Distance)>,
    awaiting: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TargetState {
    Waiting,
    Accepted,
    Rejected { saturated: bool },
}

#[derive(Debug)]
pub(crate) struct JoinAttempt {
    targets: BTreeMap<NodeId, TargetState>,
    dists: BTreeMap<NodeId, Distance>,
    accepted: Vec<(ClusterId, NodeId, NodeId, Distance)>, // cluster, leader, boot, dist
    /// Initial overlay entry (vs. a later edge-membership attempt).
    initial: bool,
    requested_count: usize,
}

#[derive(Debug)]
struct RecoveryWalk {
    old_cluster: ClusterId,
    new_cluster: ClusterId,
    rank_order: Vec<NodeId>,
    next_index: usize,
    members: Vec<NodeId>,
}

#[derive(Debug, Default)]
struct RecoveryLocal {
    books: RecoveryBookkeeping,
    walk: Option<RecoveryWalk>,
}

#[derive(Debug, Clone, PartialEq)]
enum LinkPurpose {
    ClusterBootstrap { cluster: ClusterId },
    TopLevel,
    Refine,
    Repair,
    Attach,
}

#[derive(Debug)]
enum Pending {
    BootPing { boot: NodeId },
    LocateRequest { target: NodeId },
    ProbeEcho { requested: NodeId, newcomer: NodeId, probe_token: u64 },
    ProbeDeadline,
    JoinWait { leader: NodeId },
    EdgeScopePing { leader: NodeId, cluster: ClusterId },
    LeaderDistPing { cluster: ClusterId, leader: NodeId },
    GossipWait { peer: NodeId },
    RefineInfoWait { candidate: NodeId, scope: MeshScope },
    LinkWait { peer: NodeId, scope: MeshScope, backbone: bool, purpose: LinkPurpose },
    InsertPing { leader: NodeId },
    ReclaimWait { edge: NodeId, newcomer: NodeId, newcomer_fanout: u32, others: Vec<NodeId> },
    RecoveryAckWait { target: NodeId, old_cluster: ClusterId },
    RecoveryScopePing { requester: NodeId, old_cluster: ClusterId, new_cluster: ClusterId },
    AttachWait { target: NodeId, ladder: Vec<NodeId> },
}

#[derive(Debug)]
pub(crate) struct NodeState {
    pub id: NodeId,
    pub profile: NodeProfile,
    pub rng: ChaCha8Rng,
    token_counter: u64,
    pub joined: bool,
    join_started_us: u64,
    locate_retries: u32,
    pub locsys: LocatingSystem,
    locate: Option<LocateCtl>,
    probe_jobs: BTreeMap<u64, ProbeJob>,
    pub views: BTreeMap<ClusterId, ClusterView>,
    pub leading: Option<ClusterId>,
    pub gossip_view: BTreeMap<NodeId, GossipInfo>,
    edge_grants: BTreeSet<(ClusterId, ClusterId)>,
    pub toplevel_allowed: bool,
    pub mesh: MeshState,
    pub routing: RoutingState,
    advert_dirty: bool,
    last_advert_us: u64,
    advert_timer_armed: bool,
    pending: BTreeMap<u64, Pending>,
    pub join_attempt: Option<JoinAttempt>,
    peer_last_heard: BTreeMap<NodeId, u64>,
    recovery: BTreeMap<ClusterId, RecoveryLocal>,
    unrouted_since: Option<u64>,
    insert_ping_outstanding: bool,
    flooded_clusters: BTreeSet<ClusterId>,
}

impl NodeState {
    pub fn new(id: NodeId, profile: NodeProfile, rings: RingLevels, k_per_level: usize, seed: u64) -> Self {
        NodeState {
            id,
            profile,
            rng: rand::SeedableRng::seed_from_u64(seed),
            token_counter: 0,
            joined: false,
            join_started_us: 0,
            locate_retries: 0,
            locsys: LocatingSystem::new(id, rings, k_per_level, 4096),
            locate: None,
            probe_jobs: BTreeMap::new(),
            views: BTreeMap::new(),
            leading: None,
            gossip_view: BTreeMap::new(),
            edge_grants: BTreeSet::new(),
            toplevel_allowed: false,
            mesh: MeshState::default(),
            routing: RoutingState::default(),
            advert_dirty: false,
            last_advert_us: 0,
            advert_timer_armed: false,
            pending: BTreeMap::new(),
            join_attempt: None,
            peer_last_heard: BTreeMap::new(),
            recovery: BTreeMap::new(),
            unrouted_since: None,
            insert_ping_outstanding: false,
            flooded_clusters: BTreeSet::new(),
        }
    }

    fn token(&mut self) -> u64 {
        self.token_counter += 1;
        self.token_counter
    }

    pub fn is_source(&self, ctx: &Ctx) -> bool {
        self.id.0 == ctx.params.cfg.source
    }

    pub fn spare_degree(&self) -> u32 {
        (self.profile.fanout_max as usize).saturating_sub(self.mesh.degree_used()) as u32
    }

    pub fn member_clusters(&self) -> Vec<ClusterId> {
        self.views.keys().copied().collect()
    }

    fn home_scope(&self) -> Option<MeshScope> {
        if let Some(parent) = self.routing.parent {
            if let Some(link) = self.mesh.links.get(&parent) {
                return Some(link.scope);
            }
        }
        if self.leading.is_some() || self.toplevel_allowed {
            return Some(MeshScope::TopLevel);
        }
        self.views.keys().next().map(|&c| MeshScope::IntraCluster(c))
    }

    // ------------------------------------------------------------------
    // Join lifecycle
    // ------------------------------------------------------------------

    pub fn start_join(&mut self, ctx: &mut Ctx) {
        self.join_started_us = ctx.now;
        ctx.acct.begin_join_phase(self.id);
        self.locate = Some(LocateCtl {
            run: LocateRun::new(self.id, ctx.params.r_max, ctx.params.cfg.stop_c, ctx.now),
            outstanding: None,
            boot_attempts: 0,
        });
        self.send_rv_boot_request(ctx, 0);
    }

    fn send_rv_boot_request(&mut self, ctx: &mut Ctx, attempt: u32) {
        if let Some(l) = self.locate.as_mut() {
            l.boot_attempts = attempt;
        }
        ctx.send_rv(self.id, Message::RvBootRequest { attempt }, Some(self.id));
    }

    pub fn on_boot_reply(&mut self, boots: Vec<NodeId>, ctx: &mut Ctx) {
        if self.joined {
            return;
        }
        match ctx.params.cfg.protocol {
            Protocol::Flat => self.flat_bootstrap(boots, ctx),
            Protocol::Lcc => {
                if boots.is_empty() {
                    // Empty overlay: first node creates the first cluster.
                    self.finish_locate(LocateDecision::CreateOwnCluster, ctx);
                    return;
                }
                let boot = boots[0];
                let token = self.token();
                self.pending.insert(token, Pending::BootPing { boot });
                ctx.ping(self.id, boot, token, Some(self.id), false);
            }
        }
    }

    fn flat_bootstrap(&mut self, boots: Vec<NodeId>, ctx: &mut Ctx) {
        if boots.is_empty() {
            self.complete_flat_join(ctx, 0);
            return;
        }
        let mut sent = 0;
        for b in boots.iter().take(ctx.params.cfg.flat_bootstrap_links) {
            if self.spare_degree() == 0 {
                break;
            }
            self.request_link(*b, MeshScope::TopLevel, true, LinkPurpose::Repair, ctx);
            sent += 1;
        }
        if sent == 0 {
            self.retry_join_later(ctx);
        } else {
            // Considered joined once the first link lands; see LinkAccept.
        }
    }

    fn complete_flat_join(&mut self, ctx: &mut Ctx, requested: usize) {
        if self.joined {
            return;
        }
        self.joined = true;
        ctx.send_rv(self.id, Message::RvRegister, None);
        self.arm_periodic_timers(ctx);
        ctx.acct.end_join_phase(self.id);
        ctx.acct.pending_decisions.push(PendingJoinDecision {
            node: self.id,
            started_us: self.join_started_us,
            decided_us: ctx.now,
            outcome: JoinOutcome::Joined { leaders: Vec::new() },
            requested_count: requested,
            probes_sent: 0,
        });
        if self.is_source(ctx) {
            self.advert_dirty = true;
            self.flush_adverts(ctx);
        }
    }

    fn retry_join_later(&mut self, ctx: &mut Ctx) {
        self.locate = None;
        self.join_attempt = None;
        let delay = 5_000_000 + (self.rng.gen::<u64>() % 5_000_000);
        ctx.timer(self.id, ctx.now + delay, Timer::JoinRetry);
    }

    fn on_boot_ping(&mut self, boot: NodeId, rtt_ms: Option<f64>, ctx: &mut Ctx) {
        let Some(ctl) = self.locate.as_mut() else { return };
        match rtt_ms {
            Some(rtt) => {
                let d = Distance::ms(rtt);
                self.locsys.insert_leader(boot, d, ctx.now, ctx.params.keepalive_us);
                let step = ctl.run.on_boot(boot, d);
                self.locate_step(step, ctx);
            }
            None => {
                ctx.send_rv(self.id, Message::RvComplaint { dead: boot }, Some(self.id));
                let attempt = ctl.boot_attempts + 1;
                if attempt < BOOT_RETRY_LIMIT {
                    self.send_rv_boot_request(ctx, attempt);
                } else {
                    // Bootstrap failed outright; try again from scratch later.
                    self.retry_join_later(ctx);
                }
            }
        }
    }

    fn locate_step(&mut self, step: LocateStep, ctx: &mut Ctx) {
        match step {
            LocateStep::Request(target, d) => {
                let token = self.token();
                self.pending.insert(token, Pending::LocateRequest { target });
                if let Some(ctl) = self.locate.as_mut() {
                    ctl.outstanding = Some((target, token));
                }
                ctx.send(
                    self.id,
                    target,
                    Message::LocalizationRequest { newcomer: self.id, d_to_requested: d.as_ms() },
                    Some(self.id),
                    false,
                );
                ctx.timer(self.id, ctx.now + ctx.params.candidate_timeout_us, Timer::RequestTimeout { token });
            }
            LocateStep::Done(decision) => self.finish_locate(decision, ctx),
        }
    }

    fn finish_locate(&mut self, decision: LocateDecision, ctx: &mut Ctx) {
        let (requested, _probes) = self
            .locate
            .as_ref()
            .map(|c| (c.run.requested_count(), c.run.probes_sent))
            .unwrap_or((0, 0));
        match decision {
            LocateDecision::CreateOwnCluster => {
                self.locate = None;
                self.create_own_cluster(ctx, requested);
            }
            LocateDecision::JoinClusters(list) => {
                self.locate = None;
                let mut attempt = JoinAttempt {
                    targets: BTreeMap::new(),
                    dists: BTreeMap::new(),
                    accepted: Vec::new(),
                    initial: true,
                    requested_count: requested,
                };
                let others: Vec<NodeId> = list
                    .iter()
                    .take(ctx.params.cfg.edge_max_memberships)
                    .map(|&(l, _)| l)
                    .collect();
                for &(leader, d) in list.iter().take(ctx.params.cfg.edge_max_memberships) {
                    attempt.targets.insert(leader, TargetState::Waiting);
                    attempt.dists.insert(leader, d);
                    let token = self.token();
                    self.pending.insert(token, Pending::JoinWait { leader });
                    let other_leaders: Vec<NodeId> = others.iter().copied().filter(|&o| o != leader).collect();
                    ctx.send(
                        self.id,
                        leader,
                        Message::JoinRequest { fanout: self.profile.fanout_max, other_leaders },
                        Some(self.id),
                        false,
                    );
                    ctx.timer(self.id, ctx.now + ctx.params.join_timeout_us, Timer::RequestTimeout { token });
                }
                self.join_attempt = Some(attempt);
            }
        }
    }

    fn create_own_cluster(&mut self, ctx: &mut Ctx, requested: usize) {
        let cid = ctx.mint_cluster();
        self.become_leader_of(cid, ctx);
        self.joined = true;
        self.arm_periodic_timers(ctx);
        // Contact the closest known leaders to join the top-level topology.
        let near = self.locsys.nearest(TOPLEVEL_LINK_TARGET);
        for (leader, _) in near {
            if self.spare_degree() == 0 {
                break;
            }
            self.request_link(leader, MeshScope::TopLevel, true, LinkPurpose::TopLevel, ctx);
        }
        if self.is_source(ctx) {
            self.advert_dirty = true;
            self.flush_adverts(ctx);
        }
        ctx.acct.end_join_phase(self.id);
        ctx.acct.pending_decisions.push(PendingJoinDecision {
            node: self.id,
            started_us: self.join_started_us,
            decided_us: ctx.now,
            outcome: JoinOutcome::CreatedCluster,
            requested_count: requested,
            probes_sent: 0,
        });
    }

    fn become_leader_of(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        self.profile.is_leader = true;
        self.leading = Some(cid);
        let mut view = ClusterView::new(cid, self.id, ctx.now, ctx.params.stability_us);
        view.leader_dist = Some(Distance::ZERO);
        view.members.insert(
            self.id,
            MemberInfo { pv: self.own_pv(ctx), last_heard_us: ctx.now, memberships: BTreeSet::new() },
        );
        self.views.insert(cid, view);
        self.profile.edge_memberships.insert(cid);
        ctx.send_rv(self.id, Message::RvRegister, None);
    }

    // ------------------------------------------------------------------
    // Locating: requested-node side
    // ------------------------------------------------------------------

    fn on_localization_request(&mut self, newcomer: NodeId, d_ms: f64, ctx: &mut Ctx) {
        if !self.profile.is_leader {
            ctx.send(
                self.id,
                newcomer,
                Message::CandidateList { newcomer, entries: Vec::new(), ok: false },
                Some(newcomer),
                false,
            );
            return;
        }
        let d = Distance::ms(d_ms);
        // Learned while serving the request; lights up if the newcomer
        // becomes a tracked leader later.
        self.locsys.record_pair(self.id, newcomer, d, ctx.now);
        let queried: Vec<NodeId> = choose_queried(&self.locsys, d, ctx.params.cfg.locating_mode, &mut self.rng)
            .into_iter()
            .filter(|&q| q != newcomer)
            .collect();
        if queried.is_empty() {
            ctx.send(
                self.id,
                newcomer,
                Message::CandidateList { newcomer, entries: Vec::new(), ok: true },
                Some(newcomer),
                false,
            );
            return;
        }
        let token = self.token();
        let job = ProbeJob {
            newcomer,
            d_to_me: d_ms,
            results: Vec::new(),
            awaiting: queried.iter().copied().collect(),
        };
        self.probe_jobs.insert(token, job);
        for q in queried {
            ctx.send(self.id, q, Message::ProbeRequest { newcomer, token }, Some(newcomer), true);
        }
        self.pending.insert(token, Pending::ProbeDeadline);
        ctx.timer(self.id, ctx.now + ctx.params.probe_deadline_us, Timer::RequestTimeout { token });
    }

    fn on_probe_request(&mut self, requested: NodeId, newcomer: NodeId, probe_token: u64, ctx: &mut Ctx) {
        let token = self.token();
        self.pending.insert(token, Pending::ProbeEcho { requested, newcomer, probe_token });
        ctx.ping(self.id, newcomer, token, Some(newcomer), true);
    }

    fn on_probe_echo(
        &mut self,
        requested: NodeId,
        newcomer: NodeId,
        probe_token: u64,
        rtt_ms: Option<f64>,
        ctx: &mut Ctx,
    ) {
        let distance_ms = rtt_ms.unwrap_or(f64::from(u32::MAX));
        if let Some(rtt) = rtt_ms {
            self.locsys.record_pair(self.id, newcomer, Distance::ms(rtt), ctx.now);
        }
        ctx.send(
            self.id,
            requested,
            Message::ProbeReply { newcomer, token: probe_token, distance_ms },
            Some(newcomer),
            true,
        );
    }

    fn on_probe_reply(&mut self, from: NodeId, token: u64, distance_ms: f64, ctx: &mut Ctx) {
        let finished = {
            let Some(job) = self.probe_jobs.get_mut(&token) else { return };
            job.awaiting.remove(&from);
            if distance_ms < f64::from(u32::MAX) {
                job.results.push((from, Distance::ms(distance_ms)));
            }
            job.awaiting.is_empty()
        };
        if let Some(job) = self.probe_jobs.get(&token) {
            if distance_ms < f64::from(u32::MAX) {
                // Third-party distance learned through this locating request.
                self.locsys.record_pair(from, job.newcomer, Distance::ms(distance_ms), ctx.now);
            }
        }
        if finished {
            self.finish_probe_job(token, ctx);
        }
    }

    fn finish_probe_job(&mut self, token: u64, ctx: &mut Ctx) {
        let Some(job) = self.probe_jobs.remove(&token) else { return };
        self.pending.remove(&token);
        // Queried nodes that never answered are likely gone; stop tracking.
        for dead in &job.awaiting {
            self.locsys.remove(*dead);
        }
        let candidates = candidates_from_probes(&job.results, Distance::ms(job.d_to_me));
        let entries: Vec<(NodeId, f64)> = candidates.iter().map(|&(n, d)| (n, d.as_ms())).collect();
        ctx.send(
            self.id,
            job.newcomer,
            Message::CandidateList { newcomer: job.newcomer, entries, ok: true },
            Some(job.newcomer),
            false,
        );
    }

    fn on_candidate_list(&mut self, from: NodeId, entries: Vec<(NodeId, f64)>, ok: bool, ctx: &mut Ctx) {
        let Some(ctl) = self.locate.as_mut() else { return };
        match ctl.outstanding {
            Some((target, token)) if target == from => {
                self.pending.remove(&token);
                ctl.outstanding = None;
            }
            _ => return, // stale reply
        }
        // Candidates are leaders with known distances: free locating-system
        // seeding for the newcomer.
        for &(n, d) in &entries {
            self.locsys.insert_leader(n, Distance::ms(d), ctx.now, ctx.params.keepalive_us);
        }
        let ctl = self.locate.as_mut().unwrap();
        let step = if ok {
            let list: Vec<(NodeId, Distance)> = entries.iter().map(|&(n, d)| (n, Distance::ms(d))).collect();
            ctl.run.on_candidates(from, &list)
        } else {
            self.locsys.remove(from);
            ctl.run.on_request_failed(from)
        };
        self.locate_step(step, ctx);
    }

    // ------------------------------------------------------------------
    // Cluster joining: leader side
    // ------------------------------------------------------------------

    fn on_join_request(&mut self, newcomer: NodeId, fanout: u32, others: Vec<NodeId>, ctx: &mut Ctx) {
        let Some(cid) = self.leading else {
            ctx.send(
                self.id,
                newcomer,
                Message::JoinNotification { cluster: ClusterId(0), boot: None, saturated: false },
                Some(newcomer),
                false,
            );
            return;
        };
        match self.admit(cid, newcomer) {
            Admission::Accept(boot) => {
                self.accept_member(cid, newcomer, fanout, &others, boot, ctx);
            }
            Admission::NeedReclaim(edge) => {
                let token = self.token();
                self.pending.insert(
                    token,
                    Pending::ReclaimWait { edge, newcomer, newcomer_fanout: fanout, others: others.clone() },
                );
                ctx.send(self.id, edge, Message::EdgeReclaim { cluster: cid }, Some(newcomer), false);
                ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token });
            }
            Admission::Saturated => {
                ctx.send(
                    self.id,
                    newcomer,
                    Message::JoinNotification { cluster: cid, boot: None, saturated: true },
                    Some(newcomer),
                    false,
                );
            }
        }
    }

    fn accept_member(
        &mut self,
        cid: ClusterId,
        newcomer: NodeId,
        fanout: u32,
        others: &[NodeId],
        boot: NodeId,
        ctx: &mut Ctx,
    ) {
        let now = ctx.now;
        let stability = ctx.params.stability_us;
        let weights = ctx.params.cfg.pv_weights;
        if let Some(view) = self.views.get_mut(&cid) {
            let pv = PriorityVector {
                fanout_max: fanout,
                inv_delivery_latency: 0.0,
                lifetime_s: 0.0,
                inv_leader_distance: 0.0,
                migrated: false,
            };
            view.members.insert(
                newcomer,
                MemberInfo { pv, last_heard_us: now, memberships: BTreeSet::new() },
            );
            let _ = stability;
            view.cache.upsert(newcomer, pv, now, now, &weights);
            let _ = others;
        }
        ctx.send(
            self.id,
            newcomer,
            Message::JoinNotification { cluster: cid, boot: Some(boot), saturated: false },
            Some(newcomer),
            false,
        );
    }

    fn admit(&mut self, cid: ClusterId, newcomer: NodeId) -> Admission {
        let Some(view) = self.views.get(&cid) else { return Admission::Saturated };
        if view.members.contains_key(&newcomer) {
            // Re-join of a known member: boot it again.
            return Admission::Accept(self.id);
        }
        let fanouts: Vec<u32> = view.members.values().map(|m| m.pv.fanout_max).collect();
        let capacity: i64 = fanouts.iter().map(|&f| f as i64).sum::<i64>() - fanouts.len() as i64;
        if capacity >= 1 {
            // Prefer a random member with spare degree to boot the newcomer.
            if self.id != newcomer && self.spare_degree() > 0 && view.members.len() == 1 {
                return Admission::Accept(self.id);
            }
            let mut eligible: Vec<NodeId> = view
                .members
                .keys()
                .copied()
                .filter(|&m| m != newcomer)
                .collect();
            // The leader only knows its own spare degree for sure; others are
            // tried and bubble back on rejection.
            if self.spare_degree() == 0 {
                eligible.retain(|&m| m != self.id);
            }
            if !eligible.is_empty() {
                let pick = eligible[self.rng.gen_range(0..eligible.len())];
                return Admission::Accept(pick);
            }
        }
        // Saturated: reclaim an edge member serving another cluster.
        let edge = view
            .members
            .iter()
            .find(|(n, m)| !m.memberships.is_empty() && **n != newcomer && **n != self.id)
            .map(|(&n, _)| n);
        match edge {
            Some(e) => Admission::NeedReclaim(e),
            None => Admission::Saturated,
        }
    }

    fn on_edge_reclaim(&mut self, from: NodeId, cluster: ClusterId, ctx: &mut Ctx) {
        // Drop one membership other than the requesting cluster.
        let other = self.views.keys().copied().find(|&c| c != cluster && Some(c) != self.leading);
        let ok = match other {
            Some(o) => {
                self.leave_cluster(o, ctx);
                true
            }
            None => false,
        };
        ctx.send(self.id, from, Message::EdgeReclaimAck { cluster, ok }, None, false);
    }

    fn leave_cluster(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        if let Some(view) = self.views.remove(&cid) {
            ctx.send(self.id, view.leader, Message::LeaveCluster { cluster: cid }, None, false);
        }
        self.profile.edge_memberships.remove(&cid);
        let to_drop: Vec<NodeId> = self
            .mesh
            .links
            .iter()
            .filter(|(_, l)| l.scope == MeshScope::IntraCluster(cid))
            .map(|(&n, _)| n)
            .collect();
        for peer in to_drop {
            self.drop_link(peer, true, AdjustReason::Reclaim, ctx);
        }
        self.recovery.remove(&cid);
    }

    fn on_edge_reclaim_ack(&mut self, token_owner: u64, ok: bool, ctx: &mut Ctx) {
        let Some(Pending::ReclaimWait { edge, newcomer, newcomer_fanout, others }) =
            self.pending.remove(&token_owner)
        else {
            return;
        };
        let Some(cid) = self.leading else { return };
        if ok {
            self.accept_member(cid, newcomer, newcomer_fanout, &others, edge, ctx);
        } else {
            ctx.send(
                self.id,
                newcomer,
                Message::JoinNotification { cluster: cid, boot: None, saturated: true },
                Some(newcomer),
                false,
            );
        }
    }

    // ------------------------------------------------------------------
    // Cluster joining: newcomer side
    // ------------------------------------------------------------------

    fn on_join_notification(
        &mut self,
        leader: NodeId,
        cluster: ClusterId,
        boot: Option<NodeId>,
        saturated: bool,
        token: u64,
        ctx: &mut Ctx,
    ) {
        self.pending.remove(&token);
        let Some(attempt) = self.join_attempt.as_mut() else { return };
        let Some(state) = attempt.targets.get_mut(&leader) else { return };
        if *state != TargetState::Waiting {
            return;
        }
        match boot {
            Some(b) => {
                *state = TargetState::Accepted;
                let d = attempt.dists.get(&leader).copied().unwrap_or(Distance::ZERO);
                attempt.accepted.push((cluster, leader, b, d));
            }
            None => {
                *state = TargetState::Rejected { saturated };
            }
        }
        self.maybe_resolve_join(ctx);
    }

    fn maybe_resolve_join(&mut self, ctx: &mut Ctx) {
        let Some(attempt) = self.join_attempt.as_ref() else { return };
        if attempt.targets.values().any(|s| *s == TargetState::Waiting) {
            return;
        }
        let attempt = self.join_attempt.take().unwrap();
        let any_saturated = attempt
            .targets
            .values()
            .any(|s| matches!(s, TargetState::Rejected { saturated: true }));
        if attempt.accepted.is_empty() {
            if !attempt.initial {
                return; // failed edge candidacy, nothing to unwind
            }
            if any_saturated {
                // Everyone in scope is saturated: found our own cluster.
                self.create_own_cluster(ctx, attempt.requested_count);
            } else if self.locate_retries < 3 {
                self.locate_retries += 1;
                self.start_join(ctx);
            } else {
                ctx.acct.end_join_phase(self.id);
                ctx.acct.pending_decisions.push(PendingJoinDecision {
                    node: self.id,
                    started_us: self.join_started_us,
                    decided_us: ctx.now,
                    outcome: JoinOutcome::Failed,
                    requested_count: attempt.requested_count,
                    probes_sent: 0,
                });
                self.retry_join_later(ctx);
            }
            return;
        }

        // Join every accepting cluster (bounded by the membership cap).
        let mut leaders = Vec::new();
        let mut accepted_clusters: Vec<ClusterId> = self.views.keys().copied().collect();
        for &(cid, leader, boot, d) in &attempt.accepted {
            let mut view = ClusterView::new(cid, leader, ctx.now, ctx.params.stability_us);
            view.leader_dist = Some(d);
            self.views.insert(cid, view);
            self.profile.edge_memberships.insert(cid);
            self.locsys.insert_leader(leader, d, ctx.now, ctx.params.keepalive_us);
            leaders.push(leader);
            accepted_clusters.push(cid);
            self.request_link(
                boot,
                MeshScope::IntraCluster(cid),
                true,
                LinkPurpose::ClusterBootstrap { cluster: cid },
                ctx,
            );
        }
        for &(_, leader, _, _) in &attempt.accepted {
            ctx.send(
                self.id,
                leader,
                Message::JoinAck { clusters: accepted_clusters.clone() },
                Some(self.id),
                false,
            );
        }
        if attempt.initial {
            self.joined = true;
            self.arm_periodic_timers(ctx);
            ctx.acct.end_join_phase(self.id);
            ctx.acct.pending_decisions.push(PendingJoinDecision {
                node: self.id,
                started_us: self.join_started_us,
                decided_us: ctx.now,
                outcome: JoinOutcome::Joined { leaders },
                requested_count: attempt.requested_count,
                probes_sent: 0,
            });
        }
    }

    fn on_join_ack(&mut self, member: NodeId, clusters: Vec<ClusterId>, ctx: &mut Ctx) {
        let Some(cid) = self.leading else { return };
        let Some(view) = self.views.get_mut(&cid) else { return };
        let others: BTreeSet<ClusterId> = clusters.iter().copied().filter(|&c| c != cid).collect();
        if let Some(info) = view.members.get_mut(&member) {
            info.memberships = others.clone();
            info.last_heard_us = ctx.now;
        }
        // Edge nodes may join the top level, one per foreign cluster pair.
        for &other in &others {
            let pair = if cid.0 <= other.0 { (cid, other) } else { (other, cid) };
            if self.edge_grants.len() < ctx.params.cfg.edge_toplevel_per_pair * 64
                && !self.edge_grants.contains(&pair)
            {
                self.edge_grants.insert(pair);
                ctx.send(self.id, member, Message::EdgeGrant { cluster: cid }, None, false);
            }
        }
    }

    fn on_edge_grant(&mut self, ctx: &mut Ctx) {
        if self.toplevel_allowed {
            return;
        }
        self.toplevel_allowed = true;
        // One link toward the nearest foreign top-level node.
        let own_leaders: BTreeSet<NodeId> = self.views.values().map(|v| v.leader).collect();
        let candidate = self
            .locsys
            .nearest(usize::MAX)
            .into_iter()
            .find(|(n, _)| !own_leaders.contains(n) && *n != self.id);
        if let Some((leader, _)) = candidate {
            if self.spare_degree() > 0 {
                self.request_link(leader, MeshScope::TopLevel, false, LinkPurpose::TopLevel, ctx);
            }
        }
    }

    // ------------------------------------------------------------------
    // New-cluster announcements and edge candidacy
    // ------------------------------------------------------------------

    fn on_new_cluster(&mut self, from: NodeId, cluster: ClusterId, leader: NodeId, ctx: &mut Ctx) {
        if leader == self.id || self.views.contains_key(&cluster) {
            return;
        }
        self.note_gossip(leader, true, Some(cluster), ctx.now);
        if let Some(cid) = self.leading {
            // Contacted leaders inform their members of the new cluster.
            if from == leader && !self.flooded_clusters.contains(&cluster) {
                self.flooded_clusters.insert(cluster);
                if let Some(d) = self.mesh.links.get(&leader).map(|l| l.cost) {
                    self.locsys.insert_leader(leader, d, ctx.now, ctx.params.keepalive_us);
                }
                let members: Vec<NodeId> = self
                    .views
                    .get(&cid)
                    .map(|v| v.members.keys().copied().filter(|&m| m != self.id).collect())
                    .unwrap_or_default();
                for m in members {
                    ctx.send(self.id, m, Message::NewCluster { cluster, leader }, None, false);
                }
            }
            return;
        }
        if self.views.len() >= ctx.params.cfg.edge_max_memberships || self.spare_degree() == 0 {
            return;
        }
        // Members verify whether they sit in the new leader's scope.
        let token = self.token();
        self.pending.insert(token, Pending::EdgeScopePing { leader, cluster });
        ctx.ping(self.id, leader, token, None, false);
    }

    fn on_edge_scope_ping(&mut self, leader: NodeId, cluster: ClusterId, rtt_ms: Option<f64>, ctx: &mut Ctx) {
        let Some(rtt) = rtt_ms else { return };
        let d = Distance::ms(rtt);
        self.locsys.insert_leader(leader, d, ctx.now, ctx.params.keepalive_us);
        if d <= ctx.params.r_max
            && self.joined
            && self.join_attempt.is_none()
            && self.views.len() < ctx.params.cfg.edge_max_memberships
            && !self.views.contains_key(&cluster)
            && self.spare_degree() > 0
        {
            // Potential edge node: ask to join the new leader's cluster.
            let token = self.token();
            self.pending.insert(token, Pending::JoinWait { leader });
            let mut attempt = JoinAttempt {
                targets: BTreeMap::new(),
                dists: BTreeMap::new(),
                accepted: Vec::new(),
                initial: false,
                requested_count: 0,
            };
            attempt.targets.insert(leader, TargetState::Waiting);
            attempt.dists.insert(leader, d);
            self.join_attempt = Some(attempt);
            ctx.send(
                self.id,
                leader,
                Message::JoinRequest {
                    fanout: self.profile.fanout_max,
                    other_leaders: self.views.values().map(|v| v.leader).collect(),
                },
                None,
                false,
            );
            ctx.timer(self.id, ctx.now + ctx.params.join_timeout_us, Timer::RequestTimeout { token });
        }
    }

    // ------------------------------------------------------------------
    // Keep-alive, liveness, election
    // ------------------------------------------------------------------

    fn arm_periodic_timers(&mut self, ctx: &mut Ctx) {
        let ka_jitter = self.rng.gen::<u64>() % ctx.params.keepalive_us;
        ctx.timer(self.id, ctx.now + ctx.params.keepalive_us / 2 + ka_jitter / 2, Timer::KeepAlive);
        let g_jitter = self.rng.gen::<u64>() % ctx.params.gossip_us;
        ctx.timer(self.id, ctx.now + ctx.params.gossip_us / 2 + g_jitter / 2, Timer::Gossip);
        let r_jitter = self.rng.gen::<u64>() % ctx.params.refine_us;
        ctx.timer(self.id, ctx.now + ctx.params.refine_us + r_jitter, Timer::Refine);
    }

    fn own_pv(&self, ctx: &Ctx) -> PriorityVector {
        let dl = self.routing.dist.map(|d| d.as_ms().max(0.001));
        let own_leaders: BTreeSet<NodeId> = self.views.values().map(|v| v.leader).collect();
        let cd = self
            .locsys
            .tracked()
            .filter(|(n, _)| !own_leaders.contains(n))
            .map(|(_, d)| d.as_ms())
            .fold(f64::INFINITY, f64::min);
        PriorityVector {
            fanout_max: self.profile.fanout_max,
            inv_delivery_latency: dl.map(|d| 1.0 / d).unwrap_or(0.0),
            lifetime_s: (ctx.now.saturating_sub(self.profile.joined_at)) as f64 / 1e6,
            inv_leader_distance: if cd.is_finite() { 1.0 / cd.max(0.001) } else { 0.0 },
            migrated: self.views.values().any(|v| v.migrated_set.contains(&self.id)),
        }
    }

    fn on_keepalive_timer(&mut self, ctx: &mut Ctx) {
        if !self.joined {
            ctx.timer(self.id, ctx.now + ctx.params.keepalive_us, Timer::KeepAlive);
            return;
        }
        let pv = self.own_pv(ctx);
        let mut covered = BTreeSet::new();
        covered.insert(self.id);
        // Leader: publish PV plus the ranked successor digest to every member.
        if let Some(cid) = self.leading {
            let digest = self.build_digest(cid, ctx);
            let members: Vec<NodeId> = self
                .views
                .get(&cid)
                .map(|v| v.members.keys().copied().filter(|&m| m != self.id).collect())
                .unwrap_or_default();
            for m in members {
                covered.insert(m);
                ctx.send(
                    self.id,
                    m,
                    Message::KeepAlive { cluster: Some(cid), pv, is_leader: true, digest: digest.clone() },
                    None,
                    false,
                );
            }
        }
        // Member: report to each cluster leader.
        let leaders: Vec<(ClusterId, NodeId)> = self
            .views
            .iter()
            .filter(|(c, _)| Some(**c) != self.leading)
            .map(|(&c, v)| (c, v.leader))
            .collect();
        for (cid, leader) in leaders {
            if leader != self.id && covered.insert(leader) {
                ctx.send(
                    self.id,
                    leader,
                    Message::KeepAlive { cluster: Some(cid), pv, is_leader: false, digest: Vec::new() },
                    None,
                    false,
                );
            }
        }
        // Mesh neighbors: liveness plus PV sharing.
        let neighbors: Vec<(NodeId, MeshScope)> =
            self.mesh.links.iter().map(|(&n, l)| (n, l.scope)).collect();
        for (n, scope) in neighbors {
            if covered.insert(n) {
                let cluster = match scope {
                    MeshScope::IntraCluster(c) => Some(c),
                    MeshScope::TopLevel => None,
                };
                ctx.send(
                    self.id,
                    n,
                    Message::KeepAlive { cluster, pv, is_leader: self.profile.is_leader, digest: Vec::new() },
                    None,
                    false,
                );
            }
        }
        self.liveness_sweep(ctx);
        self.migration_checks(ctx);
        ctx.timer(self.id, ctx.now + ctx.params.keepalive_us, Timer::KeepAlive);
    }

    fn build_digest(&mut self, cid: ClusterId, ctx: &Ctx) -> Vec<DigestEntry> {
        let Some(view) = self.views.get_mut(&cid) else { return Vec::new() };
        view.cache.resort(&ctx.params.cfg.pv_weights, ctx.now);
        let migrated = view.migrated_set.clone();
        view.cache
            .entries()
            .iter()
            .filter(|e| e.node != self.id)
            .take(DIGEST_LEN)
            .map(|e| DigestEntry { node: e.node, priority: e.priority, migrated: migrated.contains(&e.node) })
            .collect()
    }

    fn on_keepalive(
        &mut self,
        from: NodeId,
        cluster: Option<ClusterId>,
        pv: PriorityVector,
        is_leader: bool,
        digest: Vec<DigestEntry>,
        ctx: &mut Ctx,
    ) {
        self.peer_last_heard.insert(from, ctx.now);
        self.note_gossip(from, is_leader, cluster, ctx.now);
        let Some(cid) = cluster else { return };
        // Two leaders for one cluster resolve deterministically: the lower
        // id keeps it, the other abdicates.
        if is_leader && self.leading == Some(cid) && from != self.id {
            if from.0 < self.id.0 {
                self.leading = None;
                self.profile.is_leader = false;
                ctx.send_rv(self.id, Message::RvUnregister, None);
                if let Some(view) = self.views.get_mut(&cid) {
                    view.leader = from;
                    view.leader_dist = None;
                    view.leader_last_heard_us = ctx.now;
                }
            } else {
                return;
            }
        }
        let now = ctx.now;
        let weights = ctx.params.cfg.pv_weights;
        let mut ping_new_leader = false;
        {
            let Some(view) = self.views.get_mut(&cid) else { return };
            if is_leader {
                if view.leader != from {
                    // Leadership change observed; measure the new leader.
                    view.leader = from;
                    view.leader_dist = None;
                    ping_new_leader = true;
                }
                view.leader_last_heard_us = now;
                if !digest.is_empty() {
                    view.digest = digest.iter().map(|d| d.node).collect();
                    let migrated_now: BTreeSet<NodeId> =
                        digest.iter().filter(|d| d.migrated).map(|d| d.node).collect();
                    view.migrated_set.extend(migrated_now.iter().copied());
                }
            }
        }
        if ping_new_leader {
            let token = self.token();
            self.pending.insert(token, Pending::LeaderDistPing { cluster: cid, leader: from });
            ctx.ping(self.id, from, token, None, false);
        }
        let Some(view) = self.views.get_mut(&cid) else { return };

        // Unknown senders are learned; gossip may lag membership.
        let joined_at = view.members.get(&from).map(|m| m.last_heard_us).unwrap_or(now);
        let entry = view.members.entry(from).or_insert(MemberInfo {
            pv,
            last_heard_us: now,
            memberships: BTreeSet::new(),
        });
        entry.pv = pv;
        entry.last_heard_us = now;
        view.cache.upsert(from, pv, now, joined_at, &weights);

        if pv.migrated {
            view.migrated_set.insert(from);
            if view.state == ClusterState::Stabilized {
                view.state = ClusterState::Temporary;
            }
        } else if view.migrated_set.remove(&from) && view.migrated_set.is_empty() {
            if view.state == ClusterState::Temporary {
                view.state = ClusterState::Stabilized;
            }
        }
        self.migration_checks(ctx);
        self.maybe_schedule_recovery(cid, ctx);
    }

    fn on_leader_dist_ping(&mut self, cid: ClusterId, leader: NodeId, rtt_ms: Option<f64>, ctx: &mut Ctx) {
        let r_max = ctx.params.r_max;
        let Some(view) = self.views.get_mut(&cid) else { return };
        if view.leader != leader {
            return;
        }
        match rtt_ms {
            Some(rtt) => {
                let d = Distance::ms(rtt);
                view.leader_dist = Some(d);
                self.locsys.insert_leader(leader, d, ctx.now, ctx.params.keepalive_us);
                let _ = r_max;
                self.migration_checks(ctx);
                self.maybe_schedule_recovery(cid, ctx);
            }
            None => {}
        }
    }

    /// Verify, at cache update points, whether each cluster leader is still
    /// within scope; flag or clear migration accordingly.
    fn migration_checks(&mut self, ctx: &mut Ctx) {
        let r_max = ctx.params.r_max;
        let me = self.id;
        for (&cid, view) in self.views.iter_mut() {
            if Some(cid) == self.leading {
                continue;
            }
            let Some(d) = view.leader_dist else { continue };
            if d > r_max {
                if view.migrated_set.insert(me) {
                    view.state = ClusterState::Temporary;
                }
                if view.state == ClusterState::Stabilized {
                    view.state = ClusterState::Temporary;
                }
            } else if view.migrated_set.remove(&me) {
                // Leader back in scope before recovery started.
                if view.migrated_set.is_empty() && view.state == ClusterState::Temporary {
                    view.state = ClusterState::Stabilized;
                }
            }
        }
    }

    fn liveness_sweep(&mut self, ctx: &mut Ctx) {
        let timeout = ctx.params.leader_timeout_us;
        let now = ctx.now;

        // Mesh neighbor liveness.
        let dead_neighbors: Vec<NodeId> = self
            .mesh
            .links
            .keys()
            .copied()
            .filter(|n| {
                let last = self.peer_last_heard.get(n).copied().unwrap_or(0);
                now.saturating_sub(last) > timeout
            })
            .collect();
        for n in dead_neighbors {
            self.on_neighbor_dead(n, ctx);
        }

        // Member liveness, as leader.
        if let Some(cid) = self.leading {
            let me = self.id;
            let mut gone = Vec::new();
            if let Some(view) = self.views.get_mut(&cid) {
                for (&m, info) in view.members.iter() {
                    if m != me && now.saturating_sub(info.last_heard_us) > timeout {
                        gone.push(m);
                    }
                }
                for m in &gone {
                    view.members.remove(m);
                    view.cache.remove(*m);
                    view.migrated_set.remove(m);
                }
            }
        }

        // Leader liveness, as member.
        let mut timeouts: Vec<ClusterId> = Vec::new();
        for (&cid, view) in self.views.iter() {
            if Some(cid) == self.leading || view.leader == self.id {
                continue;
            }
            if now.saturating_sub(view.leader_last_heard_us) > timeout {
                timeouts.push(cid);
            }
        }
        for cid in timeouts {
            self.on_leader_timeout(cid, ctx);
        }
    }

    fn on_leader_timeout(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        let me = self.id;
        let weights = ctx.params.cfg.pv_weights;
        let now = ctx.now;
        let own_pv = self.own_pv(ctx);
        let can_lead = self.leading.is_none();
        let Some(view) = self.views.get_mut(&cid) else { return };
        let dead = view.leader;
        view.members.remove(&dead);
        view.cache.remove(dead);
        view.migrated_set.remove(&dead);
        self.peer_last_heard.remove(&dead);
        self.locsys.remove(dead);

        // Successor order: the leader-published digest (shared by every
        // member, so at most one node stands up per round), falling back to
        // the local cache ranking including ourselves.
        let mut successors: Vec<NodeId> = view.digest.iter().copied().filter(|&n| n != dead).collect();
        if successors.is_empty() {
            view.cache.resort(&weights, now);
            successors = view.cache.order().into_iter().filter(|&n| n != dead).collect();
            if !successors.contains(&me) {
                let mut entries: Vec<(NodeId, crate::clustering::PriorityVector)> = view
                    .cache
                    .entries()
                    .iter()
                    .filter(|e| e.node != dead)
                    .map(|e| (e.node, e.pv))
                    .collect();
                entries.push((me, own_pv));
                successors = rank_by_priority(&entries, &weights).into_iter().map(|(n, _)| n).collect();
            }
        }
        // An expected successor that cannot lead (it already leads another
        // cluster) is skipped by everyone deterministically.
        let expected = successors.iter().copied().find(|&n| n != me || can_lead);

        let Some(expected) = expected else {
            // Nobody left to lead: rejoin the overlay as a fresh newcomer.
            self.views.remove(&cid);
            self.profile.edge_memberships.remove(&cid);
            let links: Vec<NodeId> = self
                .mesh
                .links
                .iter()
                .filter(|(_, l)| l.scope == MeshScope::IntraCluster(cid))
                .map(|(&n, _)| n)
                .collect();
            for peer in links {
                self.drop_link(peer, false, AdjustReason::Repair, ctx);
            }
            if self.views.is_empty() && self.leading.is_none() {
                self.joined = false;
                self.start_join(ctx);
            }
            return;
        };

        if expected == me {
            self.promote_to_leader(cid, ctx);
        } else {
            // Give the expected successor one timeout round to stand up.
            view.leader = expected;
            view.leader_last_heard_us = now;
            view.leader_dist = None;
            view.digest.retain(|&n| n != expected);
            let token = self.token_counter + 1;
            self.token_counter = token;
            self.pending.insert(token, Pending::LeaderDistPing { cluster: cid, leader: expected });
            ctx.ping(self.id, expected, token, None, false);
        }
    }

    fn promote_to_leader(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        if self.leading.is_some() {
            // Already leading another cluster; treat as a merge by simply
            // serving both is not supported: decline and let the next
            // successor stand up.
            return;
        }
        self.profile.is_leader = true;
        self.leading = Some(cid);
        let now = ctx.now;
        let pv = self.own_pv(ctx);
        if let Some(view) = self.views.get_mut(&cid) {
            view.leader = self.id;
            view.leader_dist = Some(Distance::ZERO);
            view.leader_last_heard_us = now;
            view.migrated_set.remove(&self.id);
            view.members.insert(
                self.id,
                MemberInfo { pv, last_heard_us: now, memberships: BTreeSet::new() },
            );
        }
        ctx.send_rv(self.id, Message::RvRegister, None);
        // Stand up immediately: keep-alive to every known member.
        let digest = self.build_digest(cid, ctx);
        let members: Vec<NodeId> = self
            .views
            .get(&cid)
            .map(|v| v.members.keys().copied().filter(|&m| m != self.id).collect())
            .unwrap_or_default();
        for m in &members {
            ctx.send(
                self.id,
                *m,
                Message::KeepAlive { cluster: Some(cid), pv, is_leader: true, digest: digest.clone() },
                None,
                false,
            );
        }
        // Connect the cluster to the top level.
        let own_leaders: BTreeSet<NodeId> = self.views.values().map(|v| v.leader).collect();
        let near: Vec<NodeId> = self
            .locsys
            .nearest(usize::MAX)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !own_leaders.contains(n) && *n != self.id)
            .take(2)
            .collect();
        for leader in near {
            if self.spare_degree() == 0 {
                break;
            }
            self.request_link(leader, MeshScope::TopLevel, true, LinkPurpose::TopLevel, ctx);
        }
    }

    // ------------------------------------------------------------------
    // Migrated-node recovery
    // ------------------------------------------------------------------

    fn migrated_rank_order(&self, cid: ClusterId) -> Vec<NodeId> {
        let Some(view) = self.views.get(&cid) else { return Vec::new() };
        let mut order: Vec<NodeId> = view
            .digest
            .iter()
            .copied()
            .filter(|n| view.migrated_set.contains(n))
            .collect();
        for &n in &view.migrated_set {
            if !order.contains(&n) {
                order.push(n);
            }
        }
        order
    }

    fn maybe_schedule_recovery(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        if ctx.params.cfg.recovery_scheme != RecoveryScheme::Lcc {
            return;
        }
        let Some(view) = self.views.get(&cid) else { return };
        if view.state != ClusterState::Temporary || !view.migrated_set.contains(&self.id) {
            return;
        }
        let order = self.migrated_rank_order(cid);
        if order.first() == Some(&self.id) && !self.recovery.contains_key(&cid) {
            self.recovery.insert(cid, RecoveryLocal::default());
            ctx.timer(self.id, ctx.now + ctx.params.settle_us, Timer::RecoverySettle { cluster: cid });
        }
    }

    fn on_recovery_settle(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        let Some(view) = self.views.get(&cid) else {
            self.recovery.remove(&cid);
            return;
        };
        if view.state != ClusterState::Temporary || !view.migrated_set.contains(&self.id) {
            self.recovery.remove(&cid);
            return;
        }
        let order = self.migrated_rank_order(cid);
        if order.first() != Some(&self.id) {
            self.recovery.remove(&cid);
            return;
        }
        self.initiate_recovery(cid, order, ctx);
    }

    fn initiate_recovery(&mut self, old_cid: ClusterId, order: Vec<NodeId>, ctx: &mut Ctx) {
        if self.leading.is_some() {
            return;
        }
        if let Some(view) = self.views.get_mut(&old_cid) {
            view.state = ClusterState::Recovering;
        }
        let new_cid = ctx.mint_cluster();
        let local = self.recovery.entry(old_cid).or_default();
        local.walk = Some(RecoveryWalk {
            old_cluster: old_cid,
            new_cluster: new_cid,
            rank_order: order,
            next_index: 0,
            members: Vec::new(),
        });
        // Leave the old delivery links in place until the new cluster's tree
        // is live; the old view is dropped when the walk completes.
        self.profile.is_leader = true;
        self.leading = Some(new_cid);
        let mut view = ClusterView::new(new_cid, self.id, ctx.now, ctx.params.stability_us);
        view.leader_dist = Some(Distance::ZERO);
        view.members.insert(
            self.id,
            MemberInfo { pv: self.own_pv(ctx), last_heard_us: ctx.now, memberships: BTreeSet::new() },
        );
        self.views.insert(new_cid, view);
        self.profile.edge_memberships.insert(new_cid);
        ctx.send_rv(self.id, Message::RvRegister, None);
        self.recovery_walk_step(old_cid, ctx);
    }

    fn recovery_walk_step(&mut self, old_cid: ClusterId, ctx: &mut Ctx) {
        let me = self.id;
        let (target, new_cid, in_scope) = {
            let Some(local) = self.recovery.get_mut(&old_cid) else { return };
            let Some(walk) = local.walk.as_mut() else { return };
            // Find our own position, then the next migrated node after it.
            let my_pos = walk.rank_order.iter().position(|&n| n == me).unwrap_or(0);
            let start = walk.next_index.max(my_pos + 1);
            let mut target = None;
            for (i, &n) in walk.rank_order.iter().enumerate().skip(start) {
                if !walk.members.contains(&n) {
                    target = Some((i, n));
                    break;
                }
            }
            match target {
                Some((i, n)) => {
                    walk.next_index = i + 1;
                    (n, walk.new_cluster, walk.members.clone())
                }
                None => {
                    self.finish_recovery_walk(old_cid, ctx);
                    return;
                }
            }
        };
        let token = self.token();
        self.pending.insert(token, Pending::RecoveryAckWait { target, old_cluster: old_cid });
        ctx.send(
            self.id,
            target,
            Message::RecoveringRequest { new_cluster: new_cid, in_scope },
            None,
            false,
        );
        ctx.timer(self.id, ctx.now + ctx.params.recovery_ack_timeout_us, Timer::RequestTimeout { token });
    }

    fn finish_recovery_walk(&mut self, old_cid: ClusterId, ctx: &mut Ctx) {
        let Some(local) = self.recovery.get_mut(&old_cid) else { return };
        let Some(walk) = local.walk.take() else { return };
        // Inform the previous cluster leader of the split, then detach.
        let mut moved = walk.members.clone();
        moved.push(self.id);
        if let Some(old_view) = self.views.get(&old_cid) {
            let old_leader = old_view.leader;
            if old_leader != self.id {
                ctx.send(
                    self.id,
                    old_leader,
                    Message::ClusterSplit { old_cluster: old_cid, moved },
                    None,
                    false,
                );
            }
        }
        self.detach_from_cluster(old_cid, ctx);
        self.recovery.remove(&old_cid);
        if let Some(view) = self.views.get_mut(&walk.new_cluster) {
            view.state = ClusterState::Stabilized;
        }
        // Connect the new cluster to the top level.
        let own_leaders: BTreeSet<NodeId> = self.views.values().map(|v| v.leader).collect();
        let near: Vec<NodeId> = self
            .locsys
            .nearest(usize::MAX)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !own_leaders.contains(n) && *n != self.id)
            .take(2)
            .collect();
        for leader in near {
            if self.spare_degree() == 0 {
                break;
            }
            self.request_link(leader, MeshScope::TopLevel, true, LinkPurpose::TopLevel, ctx);
        }
    }

    /// Drop a cluster view and its mesh links, keeping the routing alive on
    /// remaining links (make-before-break is handled by joining the new
    /// cluster before detaching).
    fn detach_from_cluster(&mut self, cid: ClusterId, ctx: &mut Ctx) {
        self.views.remove(&cid);
        self.profile.edge_memberships.remove(&cid);
        self.recovery.remove(&cid);
        let links: Vec<NodeId> = self
            .mesh
            .links
            .iter()
            .filter(|(_, l)| l.scope == MeshScope::IntraCluster(cid))
            .map(|(&n, _)| n)
            .collect();
        for peer in links {
            self.drop_link(peer, true, AdjustReason::Repair, ctx);
        }
    }

    fn on_recovering_request(&mut self, from: NodeId, new_cluster: ClusterId, in_scope: Vec<NodeId>, ctx: &mut Ctx) {
        // Locate the temporary view this recovery belongs to.
        let old_cid = self
            .views
            .iter()
            .find(|(_, v)| {
                (v.state != ClusterState::Stabilized || v.migrated_set.contains(&self.id))
                    && (v.migrated_set.contains(&from) || v.migrated_set.contains(&self.id))
            })
            .map(|(&c, _)| c);
        let Some(old_cid) = old_cid else {
            ctx.send(
                self.id,
                from,
                Message::RecoveringAck { new_cluster, positive: false },
                None,
                false,
            );
            return;
        };
        if let Some(view) = self.views.get_mut(&old_cid) {
            view.state = ClusterState::Recovering;
        }
        let local = self.recovery.entry(old_cid).or_default();
        local.books.on_request(from, &in_scope);
        // Measure the requester to decide scope membership.
        let token = self.token();
        self.pending.insert(
            token,
            Pending::RecoveryScopePing { requester: from, old_cluster: old_cid, new_cluster },
        );
        ctx.ping(self.id, from, token, None, false);
    }

    fn on_recovery_scope_ping(
        &mut self,
        requester: NodeId,
        old_cid: ClusterId,
        new_cluster: ClusterId,
        rtt_ms: Option<f64>,
        ctx: &mut Ctx,
    ) {
        let in_scope = rtt_ms.map(|r| Distance::ms(r) <= ctx.params.r_max).unwrap_or(false);
        if in_scope && self.leading.is_none() {
            ctx.send(
                self.id,
                requester,
                Message::RecoveringAck { new_cluster, positive: true },
                None,
                false,
            );
            // Join the requester's new cluster and return to stabilized state.
            let d = Distance::ms(rtt_ms.unwrap());
            let mut view = ClusterView::new(new_cluster, requester, ctx.now, ctx.params.stability_us);
            view.leader_dist = Some(d);
            self.views.insert(new_cluster, view);
            self.profile.edge_memberships.insert(new_cluster);
            self.request_link(
                requester,
                MeshScope::IntraCluster(new_cluster),
                true,
                LinkPurpose::ClusterBootstrap { cluster: new_cluster },
                ctx,
            );
            self.detach_from_cluster(old_cid, ctx);
            return;
        }
        ctx.send(
            self.id,
            requester,
            Message::RecoveringAck { new_cluster, positive: false },
            None,
            false,
        );
        // Contacted by all prior-ranked eligible nodes? Then stand up.
        let order = self.migrated_rank_order(old_cid);
        let promote = self
            .recovery
            .get(&old_cid)
            .map(|l| l.books.should_self_promote(self.id, &order))
            .unwrap_or(false);
        if promote && self.leading.is_none() {
            self.initiate_recovery(old_cid, order, ctx);
        }
    }

    fn on_recovering_ack(&mut self, from: NodeId, positive: bool, token: u64, ctx: &mut Ctx) {
        let Some(Pending::RecoveryAckWait { target, old_cluster }) = self.pending.remove(&token) else {
            return;
        };
        if target != from {
            return;
        }
        if positive {
            if let Some(local) = self.recovery.get_mut(&old_cluster) {
                if let Some(walk) = local.walk.as_mut() {
                    walk.members.push(from);
                    let new_cid = walk.new_cluster;
                    let pv = PriorityVector {
                        fanout_max: 0,
                        inv_delivery_latency: 0.0,
                        lifetime_s: 0.0,
                        inv_leader_distance: 0.0,
                        migrated: false,
                    };
                    if let Some(view) = self.views.get_mut(&new_cid) {
                        view.members.insert(
                            from,
                            MemberInfo { pv, last_heard_us: ctx.now, memberships: BTreeSet::new() },
                        );
                    }
                }
            }
        }
        self.recovery_walk_step(old_cluster, ctx);
    }

    fn on_cluster_split(&mut self, old_cluster: ClusterId, moved: Vec<NodeId>, _ctx: &mut Ctx) {
        if self.leading != Some(old_cluster) {
            return;
        }
        if let Some(view) = self.views.get_mut(&old_cluster) {
            for m in moved {
                view.members.remove(&m);
                view.cache.remove(m);
                view.migrated_set.remove(&m);
            }
            if view.migrated_set.is_empty() && view.state != ClusterState::Stabilized {
                view.state = ClusterState::Stabilized;
            }
        }
    }

    // ------------------------------------------------------------------
    // Gossip
    // ------------------------------------------------------------------

    fn note_gossip(&mut self, node: NodeId, is_leader: bool, cluster: Option<ClusterId>, now: u64) {
        if node == self.id {
            return;
        }
        let entry = self.gossip_view.entry(node).or_insert(GossipInfo {
            last_heard_us: now,
            is_leader,
            cluster,
            misses: 0,
        });
        entry.last_heard_us = now;
        entry.is_leader = is_leader;
        if cluster.is_some() {
            entry.cluster = cluster;
        }
        entry.misses = 0;
    }

    fn evict_gossip_overflow(&mut self, bound: usize) {
        while self.gossip_view.len() > bound {
            let victim = self
                .gossip_view
                .iter()
                .min_by_key(|(n, e)| (e.last_heard_us, n.0))
                .map(|(&n, _)| n);
            match victim {
                Some(v) => {
                    self.gossip_view.remove(&v);
                }
                None => break,
            }
        }
    }

    fn gossip_entries(&mut self, peer: NodeId, size: usize) -> Vec<GossipEntryWire> {
        let mut pool: Vec<NodeId> = self.gossip_view.keys().copied().filter(|&n| n != peer).collect();
        let mut out = Vec::new();
        // Always advertise ourselves, with our home cluster.
        let own_cluster = self.leading.or_else(|| self.views.keys().next().copied());
        out.push(GossipEntryWire { node: self.id, is_leader: self.profile.is_leader, cluster: own_cluster });
        while out.len() < size && !pool.is_empty() {
            let i = self.rng.gen_range(0..pool.len());
            let n = pool.swap_remove(i);
            let info = &self.gossip_view[&n];
            out.push(GossipEntryWire { node: n, is_leader: info.is_leader, cluster: info.cluster });
        }
        out
    }

    fn on_gossip_timer(&mut self, ctx: &mut Ctx) {
        if self.joined && !self.gossip_view.is_empty() {
            let peers: Vec<NodeId> = self.gossip_view.keys().copied().collect();
            let peer = peers[self.rng.gen_range(0..peers.len())];
            let entries = self.gossip_entries(peer, ctx.params.cfg.gossip_fanout);
            let token = self.token();
            self.pending.insert(token, Pending::GossipWait { peer });
            ctx.send(
                self.id,
                peer,
                Message::GossipExchange { token, entries, reply_wanted: true },
                None,
                false,
            );
            ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token });
        }
        ctx.timer(self.id, ctx.now + ctx.params.gossip_us, Timer::Gossip);
    }

    fn on_gossip_exchange(
        &mut self,
        from: NodeId,
        token: u64,
        entries: Vec<GossipEntryWire>,
        reply_wanted: bool,
        ctx: &mut Ctx,
    ) {
        self.merge_gossip(&entries, ctx);
        self.note_gossip(from, false, None, ctx.now);
        if reply_wanted {
            let reply = self.gossip_entries(from, ctx.params.cfg.gossip_fanout);
            ctx.send(
                self.id,
                from,
                Message::GossipExchange { token, entries: reply, reply_wanted: false },
                None,
                false,
            );
        }
    }

    fn merge_gossip(&mut self, entries: &[GossipEntryWire], ctx: &mut Ctx) {
        for e in entries {
            if e.node == self.id {
                continue;
            }
            self.note_gossip(e.node, e.is_leader, e.cluster, ctx.now);
            // Leaders are candidates for the locating system; probe sparsely.
            if e.is_leader
                && !self.locsys.contains(e.node)
                && !self.insert_ping_outstanding
                && (self.profile.is_leader || self.locsys.tracked_count() < MEMBER_LOCSYS_TARGET)
            {
                self.insert_ping_outstanding = true;
                let token = self.token();
                self.pending.insert(token, Pending::InsertPing { leader: e.node });
                ctx.ping(self.id, e.node, token, None, false);
            }
        }
        self.evict_gossip_overflow(ctx.params.cfg.gossip_view_bound);
    }

    fn on_insert_ping(&mut self, leader: NodeId, rtt_ms: Option<f64>, ctx: &mut Ctx) {
        self.insert_ping_outstanding = false;
        if let Some(rtt) = rtt_ms {
            self.locsys.insert_leader(leader, Distance::ms(rtt), ctx.now, ctx.params.keepalive_us);
        } else {
            self.gossip_view.remove(&leader);
        }
    }

    // ------------------------------------------------------------------
    // Mesh links
    // ------------------------------------------------------------------

    fn request_link(&mut self, peer: NodeId, scope: MeshScope, backbone: bool, purpose: LinkPurpose, ctx: &mut Ctx) {
        if peer == self.id || self.mesh.links.contains_key(&peer) {
            return;
        }
        let token = self.token();
        self.pending.insert(token, Pending::LinkWait { peer, scope, backbone, purpose });
        ctx.send(
            self.id,
            peer,
            Message::LinkRequest { scope, backbone, cost_ms: 0.0, token },
            None,
            false,
        );
        ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token });
    }

    fn on_link_request(&mut self, from: NodeId, scope: MeshScope, backbone: bool, token: u64, ctx: &mut Ctx) {
        let acceptable = match scope {
            MeshScope::TopLevel => self.profile.is_leader || self.toplevel_allowed,
            MeshScope::IntraCluster(cid) => self.views.contains_key(&cid),
        };
        // Backbone requests may evict a refinement link to keep the mesh
        // connected; plain requests need spare degree.
        let mut can_take = self.spare_degree() > 0;
        if !can_take && backbone {
            let children = self.routing.children(self.id);
            if let Some(victim) = self.mesh.droppable(self.routing.parent, &children) {
                self.drop_link(victim, true, AdjustReason::Repair, ctx);
                can_take = self.spare_degree() > 0;
            }
        }
        if !acceptable || !can_take || self.mesh.links.contains_key(&from) || !self.joined {
            ctx.send(self.id, from, Message::LinkReject { token }, None, false);
            return;
        }
        let cost = ctx.oracle_rtt(self.id, from);
        self.add_link(from, scope, backbone, cost, ctx);
        ctx.send(
            self.id,
            from,
            Message::LinkAccept { scope, backbone, cost_ms: cost, token },
            None,
            false,
        );
    }

    fn on_link_accept(&mut self, from: NodeId, cost_ms: f64, token: u64, ctx: &mut Ctx) {
        let Some(Pending::LinkWait { peer, scope, backbone, purpose }) = self.pending.remove(&token) else {
            return;
        };
        if peer != from {
            return;
        }
        if self.spare_degree() == 0 {
            // Degree got consumed while the handshake was in flight.
            let children = self.routing.children(self.id);
            match self.mesh.droppable(self.routing.parent, &children) {
                Some(victim) if backbone => {
                    self.drop_link(victim, true, AdjustReason::Repair, ctx);
                }
                _ => {
                    ctx.send(self.id, from, Message::LinkDrop, None, false);
                    return;
                }
            }
        }
        self.add_link(from, scope, backbone, cost_ms, ctx);
        match purpose {
            LinkPurpose::ClusterBootstrap { cluster } => {
                ctx.acct.adjustments.push(crate::sim::accounting::Adjustment {
                    at_us: ctx.now,
                    node: self.id,
                    added: true,
                    reason: AdjustReason::Bootstrap,
                });
                // Pull cluster maintenance information from the boot member.
                let entries = self.gossip_entries(from, ctx.params.cfg.gossip_fanout);
                let gtoken = self.token();
                ctx.send(
                    self.id,
                    from,
                    Message::GossipExchange { token: gtoken, entries, reply_wanted: true },
                    None,
                    false,
                );
                let _ = cluster;
            }
            LinkPurpose::Refine => {
                ctx.acct.adjustments.push(crate::sim::accounting::Adjustment {
                    at_us: ctx.now,
                    node: self.id,
                    added: true,
                    reason: AdjustReason::Refine,
                });
                // Drop the worst redundant link after switching.
                let children = self.routing.children(self.id);
                if let Some(victim) = self.mesh.droppable(self.routing.parent, &children) {
                    if victim != from {
                        self.drop_link(victim, true, AdjustReason::Refine, ctx);
                    }
                }
            }
            LinkPurpose::Repair | LinkPurpose::Attach => {
                ctx.acct.adjustments.push(crate::sim::accounting::Adjustment {
                    at_us: ctx.now,
                    node: self.id,
                    added: true,
                    reason: AdjustReason::Repair,
                });
                if ctx.params.cfg.protocol == Protocol::Flat && !self.joined {
                    self.complete_flat_join(ctx, 0);
                }
            }
            LinkPurpose::TopLevel => {
                // A new cluster announces itself over its fresh top-level
                // links; contacted leaders flood it to their members.
                if let Some(cid) = self.leading {
                    ctx.send(
                        self.id,
                        from,
                        Message::NewCluster { cluster: cid, leader: self.id },
                        None,
                        false,
                    );
                }
            }
        }
    }

    fn add_link(&mut self, peer: NodeId, scope: MeshScope, backbone: bool, cost_ms: f64, ctx: &mut Ctx) {
        self.mesh.links.insert(peer, MeshLink { scope, cost: Distance::ms(cost_ms), backbone });
        self.peer_last_heard.insert(peer, ctx.now);
        // Share our route with the new neighbor right away.
        if let Some(adv) = self.routing.own_advert(self.id, self.is_source(ctx)) {
            ctx.send(
                self.id,
                peer,
                Message::RouteAdvert { dist_ms: adv.dist.as_ms(), path: adv.path },
                None,
                false,
            );
        }
    }

    fn drop_link(&mut self, peer: NodeId, notify: bool, reason: AdjustReason, ctx: &mut Ctx) {
        if self.mesh.links.remove(&peer).is_none() {
            return;
        }
        if notify {
            ctx.send(self.id, peer, Message::LinkDrop, None, false);
            ctx.acct.adjustments.push(crate::sim::accounting::Adjustment {
                at_us: ctx.now,
                node: self.id,
                added: false,
                reason,
            });
        }
        self.routing.forget_neighbor(peer);
        if self.routing.reselect(self.id, &self.mesh.links) {
            self.advert_dirty = true;
        }
        self.after_routing_change(ctx);
    }

    fn on_neighbor_dead(&mut self, peer: NodeId, ctx: &mut Ctx) {
        let was_parent = self.routing.parent == Some(peer);
        let old_path = self.routing.path.clone();
        self.mesh.links.remove(&peer);
        self.peer_last_heard.remove(&peer);
        self.routing.forget_neighbor(peer);
        self.gossip_view.remove(&peer);
        if ctx.params.cfg.recovery_scheme == RecoveryScheme::Grandparent && was_parent {
            // Baseline: orphans attach to their grandparent rather than
            // rerouting over mesh alternates.
            self.routing.adverts.clear();
            self.routing.reselect(self.id, &self.mesh.links);
            self.advert_dirty = true;
            self.after_routing_change(ctx);
            self.start_grandparent_attach(old_path, ctx);
            return;
        }
        if self.routing.reselect(self.id, &self.mesh.links) {
            self.advert_dirty = true;
        }
        self.after_routing_change(ctx);
    }

    fn after_routing_change(&mut self, ctx: &mut Ctx) {
        if self.routing.is_routed() || self.is_source(ctx) {
            self.unrouted_since = None;
        } else if self.joined && self.unrouted_since.is_none() {
            self.unrouted_since = Some(ctx.now);
        }
        self.flush_adverts(ctx);
    }

    // ------------------------------------------------------------------
    // Routing
    // ------------------------------------------------------------------

    fn on_route_advert(&mut self, from: NodeId, dist_ms: f64, path: Vec<NodeId>, ctx: &mut Ctx) {
        if !self.mesh.links.contains_key(&from) {
            return;
        }
        self.peer_last_heard.insert(from, ctx.now);
        self.routing.adverts.insert(from, RouteAdvert { dist: Distance::ms(dist_ms), path });
        if self.routing.reselect(self.id, &self.mesh.links) {
            self.advert_dirty = true;
        }
        self.after_routing_change(ctx);
    }

    fn flush_adverts(&mut self, ctx: &mut Ctx) {
        if !self.advert_dirty {
            return;
        }
        let min_interval = ctx.params.advert_min_interval_us;
        if ctx.now.saturating_sub(self.last_advert_us) < min_interval {
            if !self.advert_timer_armed {
                self.advert_timer_armed = true;
                ctx.timer(self.id, self.last_advert_us + min_interval, Timer::AdvertFlush);
            }
            return;
        }
        let Some(adv) = self.routing.own_advert(self.id, self.is_source(ctx)) else {
            // Nothing to advertise while unrouted.
            self.advert_dirty = false;
            return;
        };
        self.advert_dirty = false;
        self.last_advert_us = ctx.now;
        let neighbors: Vec<NodeId> = self.mesh.links.keys().copied().collect();
        for n in neighbors {
            ctx.send(
                self.id,
                n,
                Message::RouteAdvert { dist_ms: adv.dist.as_ms(), path: adv.path.clone() },
                None,
                false,
            );
        }
    }

    // ------------------------------------------------------------------
    // Refinement
    // ------------------------------------------------------------------

    fn on_refine_timer(&mut self, ctx: &mut Ctx) {
        ctx.timer(self.id, ctx.now + ctx.params.refine_us, Timer::Refine);
        if !self.joined || self.is_source(ctx) {
            return;
        }
        if !self.routing.is_routed() {
            self.try_repair(ctx);
            return;
        }
        let Some(scope) = self.home_scope() else { return };
        let candidates = self.refine_pool(scope);
        if candidates.is_empty() {
            return;
        }
        let candidate = candidates[self.rng.gen_range(0..candidates.len())];
        let token = self.token();
        self.pending.insert(token, Pending::RefineInfoWait { candidate, scope });
        ctx.send(self.id, candidate, Message::RefineQuery { token }, None, true);
        ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token });
    }

    fn refine_pool(&self, scope: MeshScope) -> Vec<NodeId> {
        let mut pool: BTreeSet<NodeId> = BTreeSet::new();
        match scope {
            MeshScope::IntraCluster(cid) => {
                if let Some(view) = self.views.get(&cid) {
                    pool.extend(view.members.keys().copied());
                    pool.extend(view.digest.iter().copied());
                    pool.insert(view.leader);
                }
                for (n, info) in &self.gossip_view {
                    if info.cluster == Some(cid) {
                        pool.insert(*n);
                    }
                }
            }
            MeshScope::TopLevel => {
                pool.extend(self.locsys.tracked().map(|(n, _)| n));
                for (n, info) in &self.gossip_view {
                    if info.is_leader {
                        pool.insert(*n);
                    }
                }
            }
        }
        pool.remove(&self.id);
        for n in self.mesh.links.keys() {
            pool.remove(n);
        }
        if let Some(p) = self.routing.parent {
            pool.remove(&p);
        }
        pool.into_iter().collect()
    }

    fn on_refine_query(&mut self, from: NodeId, token: u64, ctx: &mut Ctx) {
        let (dist_ms, path) = match self.routing.own_advert(self.id, self.is_source(ctx)) {
            Some(adv) => (Some(adv.dist.as_ms()), adv.path),
            None => (None, Vec::new()),
        };
        ctx.send(self.id, from, Message::RefineInfo { token, dist_ms, path }, None, true);
    }

    fn on_refine_info(&mut self, from: NodeId, token: u64, dist_ms: Option<f64>, path: Vec<NodeId>, ctx: &mut Ctx) {
        let Some(Pending::RefineInfoWait { candidate, scope }) = self.pending.remove(&token) else {
            return;
        };
        if candidate != from {
            return;
        }
        let Some(cand_dist) = dist_ms else { return };
        if path.contains(&self.id) {
            // Descendant: never a legal parent.
            return;
        }
        let Some(cur) = self.routing.dist else { return };
        let link_cost = ctx.oracle_rtt(self.id, from);
        let improves = crate::meshtree::refinement_improves(
            cur,
            Distance::ms(cand_dist),
            Distance::ms(link_cost),
            Distance::ms(ctx.params.cfg.refine_epsilon_ms),
        );
        if !improves {
            return;
        }
        // Make room if needed; refinement links are droppable later.
        if self.spare_degree() == 0 {
            let children = self.routing.children(self.id);
            let Some(victim) = self.mesh.droppable(self.routing.parent, &children) else {
                return;
            };
            self.drop_link(victim, true, AdjustReason::Refine, ctx);
        }
        self.request_link(from, scope, false, LinkPurpose::Refine, ctx);
    }

    fn try_repair(&mut self, ctx: &mut Ctx) {
        let Some(since) = self.unrouted_since else { return };
        if ctx.now.saturating_sub(since) < ctx.params.keepalive_us {
            return;
        }
        if ctx.params.cfg.protocol == Protocol::Flat {
            let pool: Vec<NodeId> = self
                .gossip_view
                .keys()
                .copied()
                .filter(|n| !self.mesh.links.contains_key(n))
                .collect();
            if let Some(&pick) = pool.get(self.rng.gen_range(0..pool.len().max(1)).min(pool.len().saturating_sub(1))) {
                if self.spare_degree() > 0 {
                    self.request_link(pick, MeshScope::TopLevel, true, LinkPurpose::Repair, ctx);
                }
            }
            return;
        }
        // Reconnect within the home cluster, or the top level for leaders.
        if let Some(scope) = self.home_scope() {
            let pool = self.refine_pool(scope);
            if !pool.is_empty() && self.spare_degree() > 0 {
                let pick = pool[self.rng.gen_range(0..pool.len())];
                self.request_link(pick, scope, true, LinkPurpose::Repair, ctx);
                return;
            }
        }
        // Last resort: fall back to the leader of any cluster we belong to.
        let leaders: Vec<NodeId> = self.views.values().map(|v| v.leader).filter(|&l| l != self.id).collect();
        if let Some(&l) = leaders.first() {
            if self.spare_degree() > 0 {
                self.request_link(l, self.home_scope().unwrap_or(MeshScope::TopLevel), true, LinkPurpose::Repair, ctx);
            }
        }
    }

    // ------------------------------------------------------------------
    // Grandparent recovery baseline
    // ------------------------------------------------------------------

    fn start_grandparent_attach(&mut self, old_path: Vec<NodeId>, ctx: &mut Ctx) {
        // old_path ends [..., grandparent, parent, me]; climb from the
        // grandparent upward on failures.
        if old_path.len() < 3 {
            self.unrouted_since = Some(ctx.now);
            return;
        }
        let mut ladder: Vec<NodeId> = old_path[..old_path.len() - 2].to_vec();
        let Some(gp) = ladder.pop() else { return };
        let token = self.token();
        self.pending.insert(token, Pending::AttachWait { target: gp, ladder });
        ctx.send(self.id, gp, Message::AttachRequest, None, false);
        ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token });
    }

    fn on_attach_request(&mut self, from: NodeId, ctx: &mut Ctx) {
        if self.spare_degree() > 0 && self.joined {
            ctx.send(self.id, from, Message::AttachReply { accept: true, redirect: Vec::new() }, None, false);
        } else {
            // Redirect to our tree descendants, nearest ranks first.
            let redirect: Vec<NodeId> = self.routing.children(self.id).into_iter().take(4).collect();
            ctx.send(self.id, from, Message::AttachReply { accept: false, redirect }, None, false);
        }
    }

    fn on_attach_reply(&mut self, from: NodeId, accept: bool, redirect: Vec<NodeId>, token: u64, ctx: &mut Ctx) {
        let Some(Pending::AttachWait { target, mut ladder }) = self.pending.remove(&token) else {
            return;
        };
        if target != from {
            return;
        }
        if accept {
            self.request_link(from, MeshScope::TopLevel, true, LinkPurpose::Attach, ctx);
            return;
        }
        // Try the redirected descendants first, then climb the ladder.
        let next = redirect.into_iter().find(|n| *n != self.id && !self.mesh.links.contains_key(n));
        let next = next.or_else(|| ladder.pop());
        match next {
            Some(n) => {
                let t = self.token();
                self.pending.insert(t, Pending::AttachWait { target: n, ladder });
                ctx.send(self.id, n, Message::AttachRequest, None, false);
                ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token: t });
            }
            None => {
                self.unrouted_since = Some(ctx.now);
            }
        }
    }

    // ------------------------------------------------------------------
    // Dispatch
    // ------------------------------------------------------------------

    pub fn on_message(&mut self, from: NodeId, msg: Message, ctx: &mut Ctx) {
        match msg {
            Message::RvBootReply { boots } => self.on_boot_reply(boots, ctx),
            Message::LocalizationRequest { newcomer, d_to_requested } => {
                self.on_localization_request(newcomer, d_to_requested, ctx)
            }
            Message::ProbeRequest { newcomer, token } => self.on_probe_request(from, newcomer, token, ctx),
            Message::ProbeReply { token, distance_ms, .. } => {
                self.on_probe_reply(from, token, distance_ms, ctx)
            }
            Message::CandidateList { entries, ok, .. } => self.on_candidate_list(from, entries, ok, ctx),
            Message::JoinRequest { fanout, other_leaders } => {
                self.on_join_request(from, fanout, other_leaders, ctx)
            }
            Message::JoinNotification { cluster, boot, saturated } => {
                let token = self
                    .pending
                    .iter()
                    .find(|(_, p)| matches!(p, Pending::JoinWait { leader } if *leader == from))
                    .map(|(&t, _)| t)
                    .unwrap_or(0);
                self.on_join_notification(from, cluster, boot, saturated, token, ctx)
            }
            Message::JoinAck { clusters } => self.on_join_ack(from, clusters, ctx),
            Message::LeaveCluster { cluster } => {
                if self.leading == Some(cluster) {
                    if let Some(view) = self.views.get_mut(&cluster) {
                        view.members.remove(&from);
                        view.cache.remove(from);
                        view.migrated_set.remove(&from);
                    }
                }
            }
            Message::KeepAlive { cluster, pv, is_leader, digest } => {
                self.on_keepalive(from, cluster, pv, is_leader, digest, ctx)
            }
            Message::NewCluster { cluster, leader } => self.on_new_cluster(from, cluster, leader, ctx),
            Message::EdgeReclaim { cluster } => self.on_edge_reclaim(from, cluster, ctx),
            Message::EdgeReclaimAck { ok, .. } => {
                let token = self
                    .pending
                    .iter()
                    .find(|(_, p)| matches!(p, Pending::ReclaimWait { edge, .. } if *edge == from))
                    .map(|(&t, _)| t);
                if let Some(t) = token {
                    self.on_edge_reclaim_ack(t, ok, ctx);
                }
            }
            Message::EdgeGrant { .. } => self.on_edge_grant(ctx),
            Message::RecoveringRequest { new_cluster, in_scope } => {
                self.on_recovering_request(from, new_cluster, in_scope, ctx)
            }
            Message::RecoveringAck { positive, .. } => {
                let token = self
                    .pending
                    .iter()
                    .find(|(_, p)| matches!(p, Pending::RecoveryAckWait { target, .. } if *target == from))
                    .map(|(&t, _)| t);
                if let Some(t) = token {
                    self.on_recovering_ack(from, positive, t, ctx);
                }
            }
            Message::ClusterSplit { old_cluster, moved } => self.on_cluster_split(old_cluster, moved, ctx),
            Message::GossipExchange { token, entries, reply_wanted } => {
                if !reply_wanted {
                    // A reply: clear the matching wait.
                    let tok = self
                        .pending
                        .iter()
                        .find(|(_, p)| matches!(p, Pending::GossipWait { peer } if *peer == from))
                        .map(|(&t, _)| t);
                    if let Some(t) = tok {
                        self.pending.remove(&t);
                    }
                }
                self.on_gossip_exchange(from, token, entries, reply_wanted, ctx)
            }
            Message::LinkRequest { scope, backbone, token, .. } => {
                self.on_link_request(from, scope, backbone, token, ctx)
            }
            Message::LinkAccept { cost_ms, token, .. } => self.on_link_accept(from, cost_ms, token, ctx),
            Message::LinkReject { token } => {
                if let Some(Pending::LinkWait { purpose, .. }) = self.pending.remove(&token) {
                    if purpose == LinkPurpose::Repair && ctx.params.cfg.protocol == Protocol::Flat && !self.joined
                    {
                        self.retry_join_later(ctx);
                    }
                }
            }
            Message::LinkDrop => {
                self.drop_link(from, false, AdjustReason::Refine, ctx);
            }
            Message::RouteAdvert { dist_ms, path } => self.on_route_advert(from, dist_ms, path, ctx),
            Message::RefineQuery { token } => self.on_refine_query(from, token, ctx),
            Message::RefineInfo { token, dist_ms, path } => {
                self.on_refine_info(from, token, dist_ms, path, ctx)
            }
            Message::AttachRequest => self.on_attach_request(from, ctx),
            Message::AttachReply { accept, redirect } => {
                let token = self
                    .pending
                    .iter()
                    .find(|(_, p)| matches!(p, Pending::AttachWait { target, .. } if *target == from))
                    .map(|(&t, _)| t);
                if let Some(t) = token {
                    self.on_attach_reply(from, accept, redirect, t, ctx);
                }
            }
            Message::RvRegister
            | Message::RvUnregister
            | Message::RvBootRequest { .. }
            | Message::RvComplaint { .. } => {}
        }
    }

    pub fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        match timer {
            Timer::KeepAlive => self.on_keepalive_timer(ctx),
            Timer::Gossip => self.on_gossip_timer(ctx),
            Timer::Refine => self.on_refine_timer(ctx),
            Timer::AdvertFlush => {
                self.advert_timer_armed = false;
                self.flush_adverts(ctx);
            }
            Timer::PingDone { token, target, rtt_ms } => self.on_ping_result(token, target, Some(rtt_ms), ctx),
            Timer::PingFailed { token, target } => self.on_ping_result(token, target, None, ctx),
            Timer::RequestTimeout { token } => self.on_request_timeout(token, ctx),
            Timer::RecoverySettle { cluster } => self.on_recovery_settle(cluster, ctx),
            Timer::JoinRetry => {
                if !self.joined {
                    self.start_join(ctx);
                }
            }
        }
    }

    fn on_ping_result(&mut self, token: u64, target: NodeId, rtt_ms: Option<f64>, ctx: &mut Ctx) {
        let Some(pending) = self.pending.remove(&token) else { return };
        match pending {
            Pending::BootPing { boot } => {
                debug_assert_eq!(boot, target);
                self.on_boot_ping(boot, rtt_ms, ctx);
            }
            Pending::ProbeEcho { requested, newcomer, probe_token } => {
                self.on_probe_echo(requested, newcomer, probe_token, rtt_ms, ctx)
            }
            Pending::EdgeScopePing { leader, cluster } => self.on_edge_scope_ping(leader, cluster, rtt_ms, ctx),
            Pending::LeaderDistPing { cluster, leader } => self.on_leader_dist_ping(cluster, leader, rtt_ms, ctx),
            Pending::InsertPing { leader } => self.on_insert_ping(leader, rtt_ms, ctx),
            Pending::RecoveryScopePing { requester, old_cluster, new_cluster } => {
                self.on_recovery_scope_ping(requester, old_cluster, new_cluster, rtt_ms, ctx)
            }
            other => {
                self.pending.insert(token, other);
            }
        }
    }

    fn on_request_timeout(&mut self, token: u64, ctx: &mut Ctx) {
        let Some(pending) = self.pending.remove(&token) else { return };
        match pending {
            Pending::LocateRequest { target } => {
                // Requested node is gone; fall through to the next candidate.
                self.locsys.remove(target);
                if let Some(ctl) = self.locate.as_mut() {
                    if ctl.outstanding.map(|(n, _)| n) == Some(target) {
                        ctl.outstanding = None;
                        let step = ctl.run.on_request_failed(target);
                        self.locate_step(step, ctx);
                    }
                }
            }
            Pending::ProbeDeadline => self.finish_probe_job(token, ctx),
            Pending::JoinWait { leader } => {
                if let Some(attempt) = self.join_attempt.as_mut() {
                    if let Some(s) = attempt.targets.get_mut(&leader) {
                        if *s == TargetState::Waiting {
                            *s = TargetState::Rejected { saturated: false };
                        }
                    }
                }
                self.maybe_resolve_join(ctx);
            }
            Pending::GossipWait { peer } => {
                if let Some(info) = self.gossip_view.get_mut(&peer) {
                    info.misses += 1;
                    if info.misses >= GOSSIP_MISS_LIMIT {
                        self.gossip_view.remove(&peer);
                    }
                }
            }
            Pending::LinkWait { peer, purpose, .. } => {
                if purpose == LinkPurpose::Repair && ctx.params.cfg.protocol == Protocol::Flat && !self.joined {
                    self.retry_join_later(ctx);
                }
                let _ = peer;
            }
            Pending::ReclaimWait { newcomer, .. } => {
                if let Some(cid) = self.leading {
                    ctx.send(
                        self.id,
                        newcomer,
                        Message::JoinNotification { cluster: cid, boot: None, saturated: true },
                        Some(newcomer),
                        false,
                    );
                }
            }
            Pending::RecoveryAckWait { old_cluster, .. } => {
                // Dead migrated node: skipped, walk continues.
                self.recovery_walk_step(old_cluster, ctx);
            }
            Pending::AttachWait { mut ladder, .. } => {
                let next = ladder.pop();
                match next {
                    Some(n) => {
                        let t = self.token();
                        self.pending.insert(t, Pending::AttachWait { target: n, ladder });
                        ctx.send(self.id, n, Message::AttachRequest, None, false);
                        ctx.timer(self.id, ctx.now + ctx.params.request_timeout_us, Timer::RequestTimeout { token: t });
                    }
                    None => self.unrouted_since = Some(ctx.now),
                }
            }
            Pending::RefineInfoWait { .. } | Pending::BootPing { .. } | Pending::ProbeEcho { .. } => {}
            Pending::EdgeScopePing { .. }
            | Pending::LeaderDistPing { .. }
            | Pending::InsertPing { .. }
            | Pending::RecoveryScopePing { .. } => {}
        }
    }
}

enum Admission {
    Accept(NodeId),
    NeedReclaim(NodeId),
    Saturated,
}
