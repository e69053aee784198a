//! Cluster lifecycle: priority vectors and leader-election ranking, the
//! local-cache rescue plan, cluster view state, and the migrated-node
//! recovery procedure.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::types::{ClusterId, Distance, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("priority weights must be strictly decreasing and positive")]
    InvalidWeights,
}

/// The five-component leader-election record. The first four feed the scalar
/// priority; `migrated` is only a flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityVector {
    pub fanout_max: u32,
    /// 1/DL where DL is the perceived delivery-tree latency (ms). A floor
    /// epsilon applies before the first data path exists.
    pub inv_delivery_latency: f64,
    /// Time in the overlay, seconds.
    pub lifetime_s: f64,
    /// 1/CD where CD is the minimum distance to a known foreign leader (ms).
    pub inv_leader_distance: f64,
    pub migrated: bool,
}

impl PriorityVector {
    pub fn components(&self) -> [f64; 4] {
        [
            self.fanout_max as f64,
            self.inv_delivery_latency,
            self.lifetime_s,
            self.inv_leader_distance,
        ]
    }
}

/// Strictly decreasing positive weights for the four scored PV components.
#[derive(Debug, Clone, Copy)]
pub struct PvWeights([f64; 4]);

impl PvWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, ClusteringError> {
        let ok = w.iter().all(|x| x.is_finite() && *x > 0.0) && w[0] > w[1] && w[1] > w[2] && w[2] > w[3];
        if !ok {
            return Err(ClusteringError::InvalidWeights);
        }
        Ok(PvWeights(w))
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for PvWeights {
    fn default() -> Self {
        PvWeights([0.4, 0.3, 0.2, 0.1])
    }
}

/// Weighted sum of already-normalized PV components.
pub fn compute_priority(normalized: [f64; 4], weights: &PvWeights) -> f64 {
    normalized.iter().zip(weights.as_array()).map(|(c, w)| c * w).sum()
}

/// Min-max normalization of each component over the PVs in view. A component
/// with no spread maps to 0.5 for everyone.
pub fn normalize_components(pvs: &[PriorityVector]) -> Vec<[f64; 4]> {
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for pv in pvs {
        for (i, c) in pv.components().iter().enumerate() {
            lo[i] = lo[i].min(*c);
            hi[i] = hi[i].max(*c);
        }
    }
    pvs.iter()
        .map(|pv| {
            let mut out = [0.0; 4];
            for (i, c) in pv.components().iter().enumerate() {
                out[i] = if hi[i] > lo[i] { (c - lo[i]) / (hi[i] - lo[i]) } else { 0.5 };
            }
            out
        })
        .collect()
}

/// Rank PVs by priority, descending, ties broken by ascending node id so all
/// members derive the same order from the same inputs.
pub fn rank_by_priority(entries: &[(NodeId, PriorityVector)], weights: &PvWeights) -> Vec<(NodeId, f64)> {
    let pvs: Vec<PriorityVector> = entries.iter().map(|&(_, pv)| pv).collect();
    let normalized = normalize_components(&pvs);
    let mut ranked: Vec<(NodeId, f64)> = entries
        .iter()
        .zip(normalized)
        .map(|(&(id, _), norm)| (id, compute_priority(norm, weights)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0 .0.cmp(&b.0 .0)));
    ranked
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub node: NodeId,
    pub pv: PriorityVector,
    pub priority: f64,
    pub last_heard_us: u64,
    /// Set when the entry topped the cache at its own joining; cleared once
    /// its cluster lifetime passes the stability threshold.
    pub pinned: bool,
    pub joined_cluster_us: u64,
}

/// Priority-sorted list of election-eligible cluster nodes: the proactive
/// rescue plan. A fresh join-time winner is held at the second position
/// until its lifetime in the cluster passes the stability threshold.
#[derive(Debug, Clone)]
pub struct LocalCache {
    entries: Vec<CacheEntry>,
    stability_threshold_us: u64,
}

impl LocalCache {
    pub fn new(stability_threshold_us: u64) -> Self {
        LocalCache { entries: Vec::new(), stability_threshold_us }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn get(&self, node: NodeId) -> Option<&CacheEntry> {
        self.entries.iter().find(|e| e.node == node)
    }

    pub fn remove(&mut self, node: NodeId) {
        self.entries.retain(|e| e.node != node);
    }

    pub fn order(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Insert or refresh a member's PV and re-sort. Returns the entry's
    /// resulting position.
    pub fn upsert(
        &mut self,
        node: NodeId,
        pv: PriorityVector,
        now_us: u64,
        joined_cluster_us: u64,
        weights: &PvWeights,
    ) -> usize {
        let is_new = !self.entries.iter().any(|e| e.node == node);
        if is_new {
            self.entries.push(CacheEntry {
                node,
                pv,
                priority: 0.0,
                last_heard_us: now_us,
                pinned: false,
                joined_cluster_us,
            });
        } else {
            for e in &mut self.entries {
                if e.node == node {
                    e.pv = pv;
                    e.last_heard_us = now_us;
                }
            }
        }
        self.resort(weights, now_us);
        let pos = self.entries.iter().position(|e| e.node == node).unwrap();
        if is_new && pos == 0 && self.entries.len() > 1 && self.is_fresh(node, now_us) {
            // Won the election at its own joining: pin behind the head.
            for e in &mut self.entries {
                if e.node == node {
                    e.pinned = true;
                }
            }
            self.resort(weights, now_us);
            return self.entries.iter().position(|e| e.node == node).unwrap();
        }
        pos
    }

    fn is_fresh(&self, node: NodeId, now_us: u64) -> bool {
        self.entries
            .iter()
            .find(|e| e.node == node)
            .map(|e| now_us.saturating_sub(e.joined_cluster_us) < self.stability_threshold_us)
            .unwrap_or(false)
    }

    /// Re-rank all entries. Pinned fresh winners are demoted to the second
    /// position; pins expire once the stability threshold is reached.
    pub fn resort(&mut self, weights: &PvWeights, now_us: u64) {
        for e in &mut self.entries {
            if e.pinned && now_us.saturating_sub(e.joined_cluster_us) >= self.stability_threshold_us {
                e.pinned = false;
            }
        }
        let ranked = rank_by_priority(
            &self.entries.iter().map(|e| (e.node, e.pv)).collect::<Vec<_>>(),
            weights,
        );
        let pos: BTreeMap<NodeId, usize> = ranked.iter().enumerate().map(|(i, &(n, _))| (n, i)).collect();
        let prio: BTreeMap<NodeId, f64> = ranked.into_iter().collect();
        for e in &mut self.entries {
            e.priority = prio[&e.node];
        }
        self.entries.sort_by_key(|e| pos[&e.node]);
        // Demote pinned entries out of the head slot, preserving relative order.
        let mut i = 0;
        while i < self.entries.len() {
            if i == 0 && self.entries[i].pinned && self.entries.len() > 1 && !self.entries[1].pinned {
                self.entries.swap(0, 1);
            }
            i += 1;
        }
    }
}

/// Cluster lifecycle state as seen by one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterState {
    Stabilized,
    Temporary,
    Recovering,
}

#[derive(Debug, Clone)]
pub struct MemberInfo {
    pub pv: PriorityVector,
    pub last_heard_us: u64,
    /// Other clusters this member reported belonging to.
    pub memberships: BTreeSet<ClusterId>,
}

/// One node's picture of one of its clusters.
#[derive(Debug, Clone)]
pub struct ClusterView {
    pub cluster: ClusterId,
    pub leader: NodeId,
    pub leader_dist: Option<Distance>,
    pub leader_last_heard_us: u64,
    pub members: BTreeMap<NodeId, MemberInfo>,
    pub state: ClusterState,
    pub cache: LocalCache,
    pub migrated_set: BTreeSet<NodeId>,
    /// Leader-published ranking, freshest first successor at index 0.
    pub digest: Vec<NodeId>,
    pub joined_at_us: u64,
}

impl ClusterView {
    pub fn new(cluster: ClusterId, leader: NodeId, now_us: u64, stability_threshold_us: u64) -> Self {
        ClusterView {
            cluster,
            leader,
            leader_dist: None,
            leader_last_heard_us: now_us,
            members: BTreeMap::new(),
            state: ClusterState::Stabilized,
            cache: LocalCache::new(stability_threshold_us),
            migrated_set: BTreeSet::new(),
            digest: Vec::new(),
            joined_at_us: now_us,
        }
    }
}

/// Shared bookkeeping for the recovering procedure, used identically by the
/// synchronous planner and the message-driven handlers: which ranked-above
/// nodes have contacted us, and which nodes are known to be absorbed into a
/// leader's scope (hence no longer eligible to lead).
#[derive(Debug, Clone, Default)]
pub struct RecoveryBookkeeping {
    pub contacted_by: BTreeSet<NodeId>,
    pub known_inscope: BTreeSet<NodeId>,
}

impl RecoveryBookkeeping {
    pub fn on_request(&mut self, from: NodeId, in_scope_of_from: &[NodeId]) {
        self.contacted_by.insert(from);
        self.known_inscope.extend(in_scope_of_from.iter().copied());
    }

    /// A negative-ACK node self-promotes once every prior-ranked migrated
    /// node either contacted it (is a leader) or is known absorbed into some
    /// leader's scope (cannot lead).
    pub fn should_self_promote(&self, me: NodeId, rank_order: &[NodeId]) -> bool {
        for &above in rank_order.iter().take_while(|&&n| n != me) {
            let accounted = self.contacted_by.contains(&above) || self.known_inscope.contains(&above);
            if !accounted {
                return false;
            }
        }
        rank_order.contains(&me)
    }
}

/// Terminal assignment of the recovery procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    /// New clusters in creation order: (leader, members joined to it).
    pub clusters: Vec<(NodeId, Vec<NodeId>)>,
    pub requests_sent: usize,
}

/// Synchronous execution of the recovering procedure over a ranked migrated
/// set and an in-scope relation: the top-ranked node creates a cluster and
/// walks the ranks below it; in-scope receivers join, others self-promote
/// once all prior-ranked eligibles have contacted them.
pub fn plan_recovery<F>(rank_order: &[NodeId], mut in_scope: F) -> RecoveryOutcome
where
    F: FnMut(NodeId, NodeId) -> bool,
{
    let mut assigned: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut books: BTreeMap<NodeId, RecoveryBookkeeping> =
        rank_order.iter().map(|&n| (n, RecoveryBookkeeping::default())).collect();
    let mut clusters: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    let mut requests_sent = 0;
    if rank_order.is_empty() {
        return RecoveryOutcome { clusters, requests_sent };
    }

    // Leaders run their walks in rank order; a walk can promote nodes below.
    let mut pending: BTreeSet<usize> = BTreeSet::new();
    pending.insert(0);
    assigned.insert(rank_order[0], rank_order[0]);
    while let Some(&start) = pending.iter().next() {
        pending.remove(&start);
        let leader = rank_order[start];
        let mut members = Vec::new();
        for (offset, &next) in rank_order[start + 1..].iter().enumerate() {
            requests_sent += 1;
            // The request carries the requester's confirmed in-scope members.
            let scope_list: Vec<NodeId> = members.clone();
            books.get_mut(&next).unwrap().on_request(leader, &scope_list);
            if !assigned.contains_key(&next) && in_scope(leader, next) {
                assigned.insert(next, leader);
                members.push(next);
            } else if !assigned.contains_key(&next) && books[&next].should_self_promote(next, rank_order) {
                assigned.insert(next, next);
                pending.insert(start + 1 + offset);
            }
        }
        clusters.push((leader, members));
    }

    // Every rank resolves: each prior either joined (carried in a later
    // request's scope list) or promoted and sent its own requests.
    debug_assert!(rank_order.iter().all(|n| assigned.contains_key(n)));
    for &n in rank_order {
        if !assigned.contains_key(&n) {
            assigned.insert(n, n);
            clusters.push((n, Vec::new()));
        }
    }
    clusters.sort_by_key(|(l, _)| rank_order.iter().position(|&n| n == *l).unwrap());
    RecoveryOutcome { clusters, requests_sent }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(f: u32, idl: f64, t: f64, icd: f64) -> PriorityVector {
        PriorityVector {
            fanout_max: f,
            inv_delivery_latency: idl,
            lifetime_s: t,
            inv_leader_distance: icd,
            migrated: false,
        }
    }

    #[test]
    fn weights_must_decrease() {
        assert!(PvWeights::new([0.4, 0.3, 0.2, 0.1]).is_ok());
        assert!(PvWeights::new([0.3, 0.3, 0.2, 0.1]).is_err());
        assert!(PvWeights::new([0.1, 0.2, 0.3, 0.4]).is_err());
        assert!(PvWeights::new([0.4, 0.3, 0.2, 0.0]).is_err());
    }

    #[test]
    fn identical_pvs_equal_priority() {
        let w = PvWeights::default();
        let a = compute_priority([0.3, 0.3, 0.3, 0.3], &w);
        let b = compute_priority([0.3, 0.3, 0.3, 0.3], &w);
        assert_eq!(a, b);
    }

    #[test]
    fn dominance_wins() {
        let w = PvWeights::default();
        let a = compute_priority([0.9, 0.8, 0.7, 0.6], &w);
        let b = compute_priority([0.5, 0.4, 0.3, 0.2], &w);
        assert!(a > b);
    }

    #[test]
    fn crafted_priorities() {
        let w = PvWeights::default();
        let a = compute_priority([1.0, 0.5, 0.2, 0.1], &w);
        let b = compute_priority([0.2, 1.0, 1.0, 1.0], &w);
        assert!((a - 0.60).abs() < 1e-12);
        assert!((b - 0.68).abs() < 1e-12);
        assert!(b > a);
    }

    #[test]
    fn ranking_is_deterministic_under_ties() {
        let w = PvWeights::default();
        let entries = vec![(NodeId(9), pv(2, 0.1, 10.0, 0.1)), (NodeId(3), pv(2, 0.1, 10.0, 0.1))];
        let ranked = rank_by_priority(&entries, &w);
        assert_eq!(ranked[0].0, NodeId(3));
    }

    const HOUR: u64 = 3_600_000_000;
    const STAB: u64 = 60_000_000;

    #[test]
    fn cache_pins_fresh_winner_at_second() {
        let w = PvWeights::default();
        let mut cache = LocalCache::new(STAB);
        cache.upsert(NodeId(1), pv(2, 0.1, 100.0, 0.1), 0, 0, &w);
        cache.upsert(NodeId(2), pv(1, 0.05, 80.0, 0.05), 0, 0, &w);
        assert_eq!(cache.order(), vec![NodeId(1), NodeId(2)]);
        // A brand-new member with a dominating PV tops the ranking but is
        // held at position 2.
        let now = 1_000_000;
        let pos = cache.upsert(NodeId(3), pv(8, 0.5, 120.0, 0.5), now, now, &w);
        assert_eq!(pos, 1);
        assert_eq!(cache.order()[0], NodeId(1));
        assert_eq!(cache.order()[1], NodeId(3));
        // Once its lifetime passes the threshold the pin expires.
        let later = now + STAB;
        cache.upsert(NodeId(3), pv(8, 0.5, 180.0, 0.5), later, now, &w);
        assert_eq!(cache.order()[0], NodeId(3));
    }

    #[test]
    fn cache_reorders_on_pv_updates_except_pinned() {
        let w = PvWeights::default();
        let mut cache = LocalCache::new(STAB);
        cache.upsert(NodeId(1), pv(4, 0.2, 200.0, 0.2), 0, 0, &w);
        cache.upsert(NodeId(2), pv(1, 0.01, 50.0, 0.01), 0, 0, &w);
        cache.upsert(NodeId(4), pv(2, 0.1, 100.0, 0.1), 0, 0, &w);
        assert_eq!(cache.order(), vec![NodeId(1), NodeId(4), NodeId(2)]);
        // Node 2's PV improves past node 4.
        cache.upsert(NodeId(2), pv(3, 0.15, 150.0, 0.15), HOUR, 0, &w);
        assert_eq!(cache.order(), vec![NodeId(1), NodeId(2), NodeId(4)]);
    }

    #[test]
    fn migrated_flag_excluded_from_scalar() {
        let w = PvWeights::default();
        let mut a = pv(2, 0.1, 10.0, 0.1);
        let mut b = a;
        a.migrated = true;
        b.migrated = false;
        let ranked = rank_by_priority(&[(NodeId(1), a), (NodeId(2), b)], &w);
        assert_eq!(ranked[0].1, ranked[1].1);
    }

    fn scope_from_pairs(pairs: &[(u32, u32)]) -> impl Fn(NodeId, NodeId) -> bool + '_ {
        move |a, b| {
            a == b || pairs.iter().any(|&(x, y)| (x == a.0 && y == b.0) || (x == b.0 && y == a.0))
        }
    }

    #[test]
    fn recovery_single_node() {
        let out = plan_recovery(&[NodeId(1)], |_, _| true);
        assert_eq!(out.clusters, vec![(NodeId(1), vec![])]);
        assert_eq!(out.requests_sent, 0);
    }

    #[test]
    fn recovery_all_mutually_in_scope() {
        let order = [NodeId(1), NodeId(2), NodeId(3)];
        let scope = scope_from_pairs(&[(1, 2), (1, 3), (2, 3)]);
        let out = plan_recovery(&order, scope);
        assert_eq!(out.clusters, vec![(NodeId(1), vec![NodeId(2), NodeId(3)])]);
        assert_eq!(out.requests_sent, 2);
    }

    #[test]
    fn recovery_splits_out_of_scope_tail() {
        // a reaches b only; c is contacted by a (negative), b is known
        // in-scope so c's prior eligibles are exhausted and c stands up.
        let order = [NodeId(1), NodeId(2), NodeId(3)];
        let scope = scope_from_pairs(&[(1, 2)]);
        let out = plan_recovery(&order, scope);
        assert_eq!(
            out.clusters,
            vec![(NodeId(1), vec![NodeId(2)]), (NodeId(3), vec![])]
        );
    }

    #[test]
    fn recovery_request_bound() {
        // At most one request per ordered pair.
        for k in 1..=5usize {
            let order: Vec<NodeId> = (0..k as u32).map(NodeId).collect();
            let out = plan_recovery(&order, |_, _| false);
            assert!(out.requests_sent <= k * (k - 1));
        }
    }
}
