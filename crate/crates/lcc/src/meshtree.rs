//! Degree-bounded mesh overlay with a low-cost backbone, path-vector routing
//! toward the source, and delay-driven refinement. Used at the top level and
//! inside clusters; the delivery tree is the converged parent pointers.

use std::collections::{BTreeMap, BTreeSet};

use crate::types::{ClusterId, Distance, NodeId};

/// Which mesh a link belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MeshScope {
    TopLevel,
    IntraCluster(ClusterId),
}

#[derive(Debug, Clone, Copy)]
pub struct MeshLink {
    pub scope: MeshScope,
    pub cost: Distance,
    /// Backbone links come from join bootstraps and partition repairs; they
    /// keep the mesh connected and are never dropped by refinement.
    pub backbone: bool,
}

/// One node's mesh neighbor set across all scopes it participates in.
#[derive(Debug, Clone, Default)]
pub struct MeshState {
    pub links: BTreeMap<NodeId, MeshLink>,
}

impl MeshState {
    pub fn degree_used(&self) -> usize {
        self.links.len()
    }

    pub fn neighbors_in(&self, scope: MeshScope) -> impl Iterator<Item = (NodeId, &MeshLink)> + '_ {
        self.links.iter().filter(move |(_, l)| l.scope == scope).map(|(&n, l)| (n, l))
    }

    /// Worst-cost droppable link: non-backbone, not the current parent, not
    /// serving any known child.
    pub fn droppable(&self, parent: Option<NodeId>, children: &BTreeSet<NodeId>) -> Option<NodeId> {
        self.links
            .iter()
            .filter(|(n, l)| !l.backbone && Some(**n) != parent && !children.contains(n))
            .max_by(|a, b| a.1.cost.cmp(&b.1.cost).then(a.0 .0.cmp(&b.0 .0)))
            .map(|(&n, _)| n)
    }
}

/// Route advertisement as carried on the wire: distance to the source and
/// the node path used to reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteAdvert {
    pub dist: Distance,
    pub path: Vec<NodeId>,
}

/// Per-node path-vector routing state toward the source.
#[derive(Debug, Clone, Default)]
pub struct RoutingState {
    pub parent: Option<NodeId>,
    pub dist: Option<Distance>,
    pub path: Vec<NodeId>,
    /// Last advertisement heard per mesh neighbor.
    pub adverts: BTreeMap<NodeId, RouteAdvert>,
}

impl RoutingState {
    pub fn is_routed(&self) -> bool {
        self.dist.is_some()
    }

    /// Recompute the best loop-free parent from stored adverts. Returns true
    /// when parent/dist/path changed.
    pub fn reselect(&mut self, me: NodeId, links: &BTreeMap<NodeId, MeshLink>) -> bool {
        let mut best: Option<(NodeId, Distance)> = None;
        for (&n, adv) in &self.adverts {
            let Some(link) = links.get(&n) else { continue };
            if adv.path.contains(&me) {
                continue; // loop suppression
            }
            let total = Distance::ms(adv.dist.as_ms() + link.cost.as_ms());
            let better = match best {
                None => true,
                Some((bn, bd)) => total < bd || (total == bd && n.0 < bn.0),
            };
            if better {
                best = Some((n, total));
            }
        }
        let (new_parent, new_dist, new_path) = match best {
            Some((n, d)) => {
                let mut path = self.adverts[&n].path.clone();
                path.push(me);
                (Some(n), Some(d), path)
            }
            None => (None, None, Vec::new()),
        };
        let changed = new_parent != self.parent
            || new_dist != self.dist
            || new_path != self.path;
        self.parent = new_parent;
        self.dist = new_dist;
        self.path = new_path;
        changed
    }

    /// Drop everything learned from a detached neighbor.
    pub fn forget_neighbor(&mut self, n: NodeId) {
        self.adverts.remove(&n);
    }

    /// The advertisement this node sends to its neighbors.
    pub fn own_advert(&self, me: NodeId, is_source: bool) -> Option<RouteAdvert> {
        if is_source {
            return Some(RouteAdvert { dist: Distance::ZERO, path: vec![me] });
        }
        self.dist.map(|d| RouteAdvert { dist: d, path: self.path.clone() })
    }

    /// Known children: neighbors whose last advert routes through us.
    pub fn children(&self, me: NodeId) -> BTreeSet<NodeId> {
        self.adverts
            .iter()
            .filter(|(_, adv)| adv.path.len() >= 2 && adv.path[adv.path.len() - 2] == me)
            .map(|(&n, _)| n)
            .collect()
    }
}

/// Refinement switch test: a candidate parent must beat the current distance
/// by more than `epsilon` to suppress oscillation.
pub fn refinement_improves(current: Distance, candidate_dist: Distance, link_cost: Distance, epsilon: Distance) -> bool {
    candidate_dist.as_ms() + link_cost.as_ms() < current.as_ms() - epsilon.as_ms()
}

/// A global snapshot of parent pointers, used for metrics and invariants.
#[derive(Debug, Clone)]
pub struct TreeSnapshot {
    pub source: NodeId,
    /// child -> parent over all overlay members (source excluded).
    pub parent: BTreeMap<NodeId, NodeId>,
    /// All overlay members (includes the source).
    pub members: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeCheck {
    /// Members with a live loop-free path to the source.
    pub connected: BTreeSet<NodeId>,
    /// Members with no parent chain to the source.
    pub disconnected: BTreeSet<NodeId>,
    /// Parent chains that loop (always a protocol bug).
    pub loops: Vec<NodeId>,
}

impl TreeSnapshot {
    /// Walk every member's parent chain, classifying connected, disconnected
    /// and looping nodes.
    pub fn check(&self) -> TreeCheck {
        let mut connected = BTreeSet::new();
        let mut disconnected = BTreeSet::new();
        let mut loops = Vec::new();
        connected.insert(self.source);
        for &n in &self.members {
            if n == self.source {
                continue;
            }
            let mut seen = BTreeSet::new();
            let mut cur = n;
            loop {
                if cur == self.source {
                    connected.insert(n);
                    break;
                }
                if !seen.insert(cur) {
                    loops.push(n);
                    break;
                }
                match self.parent.get(&cur) {
                    Some(&p) if self.members.contains(&p) => cur = p,
                    _ => {
                        disconnected.insert(n);
                        break;
                    }
                }
            }
        }
        TreeCheck { connected, disconnected, loops }
    }

    /// Overlay delay from the source to each connected member: the sum of
    /// underlay RTTs along tree edges. Memoized over the parent forest.
    pub fn overlay_delays<F>(&self, mut rtt: F) -> BTreeMap<NodeId, f64>
    where
        F: FnMut(NodeId, NodeId) -> f64,
    {
        let mut delays: BTreeMap<NodeId, f64> = BTreeMap::new();
        delays.insert(self.source, 0.0);
        for &n in &self.members {
            self.delay_of(n, &mut delays, &mut rtt);
        }
        delays
    }

    fn delay_of<F>(&self, n: NodeId, delays: &mut BTreeMap<NodeId, f64>, rtt: &mut F) -> Option<f64>
    where
        F: FnMut(NodeId, NodeId) -> f64,
    {
        if let Some(&d) = delays.get(&n) {
            return Some(d);
        }
        // Iterative chain walk; chains can be long in degenerate trees.
        let mut chain = Vec::new();
        let mut cur = n;
        let mut base = loop {
            if let Some(&d) = delays.get(&cur) {
                break d;
            }
            let Some(&p) = self.parent.get(&cur) else { return None };
            if !self.members.contains(&p) || chain.contains(&cur) {
                return None;
            }
            chain.push(cur);
            cur = p;
        };
        for &c in chain.iter().rev() {
            let p = self.parent[&c];
            base += rtt(c, p);
            delays.insert(c, base);
        }
        delays.get(&n).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.parent.iter().map(|(&c, &p)| (c, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(scope: MeshScope, cost: f64, backbone: bool) -> MeshLink {
        MeshLink { scope, cost: Distance::ms(cost), backbone }
    }

    #[test]
    fn source_advert_is_zero_with_own_path() {
        let r = RoutingState::default();
        let adv = r.own_advert(NodeId(0), true).unwrap();
        assert_eq!(adv.dist, Distance::ZERO);
        assert_eq!(adv.path, vec![NodeId(0)]);
    }

    #[test]
    fn line_topology_routes_through_middle() {
        // a -- b -- c with costs 10 and 20; source a.
        let a = NodeId(0);
        let b = NodeId(1);
        let c = NodeId(2);
        let scope = MeshScope::TopLevel;

        let mut b_links = BTreeMap::new();
        b_links.insert(a, link(scope, 10.0, true));
        b_links.insert(c, link(scope, 20.0, true));
        let mut rb = RoutingState::default();
        rb.adverts.insert(a, RouteAdvert { dist: Distance::ZERO, path: vec![a] });
        assert!(rb.reselect(b, &b_links));
        assert_eq!(rb.parent, Some(a));
        assert_eq!(rb.dist, Some(Distance::ms(10.0)));

        let mut c_links = BTreeMap::new();
        c_links.insert(b, link(scope, 20.0, true));
        let mut rc = RoutingState::default();
        rc.adverts.insert(b, rb.own_advert(b, false).unwrap());
        assert!(rc.reselect(c, &c_links));
        assert_eq!(rc.parent, Some(b));
        assert_eq!(rc.dist, Some(Distance::ms(30.0)));
        assert_eq!(rc.path, vec![a, b, c]);
    }

    #[test]
    fn looping_advert_ignored() {
        let me = NodeId(5);
        let n = NodeId(6);
        let mut links = BTreeMap::new();
        links.insert(n, link(MeshScope::TopLevel, 1.0, false));
        let mut r = RoutingState::default();
        // The neighbor's path already contains us.
        r.adverts.insert(
            n,
            RouteAdvert { dist: Distance::ms(3.0), path: vec![NodeId(0), me, n] },
        );
        assert!(!r.reselect(me, &links));
        assert_eq!(r.parent, None);
    }

    #[test]
    fn refinement_threshold() {
        let eps = Distance::ms(5.0);
        // 50 -> 30 via a 0-cost link is a clear win.
        assert!(refinement_improves(Distance::ms(50.0), Distance::ms(25.0), Distance::ms(5.0), eps));
        // Marginal gains under epsilon are rejected.
        assert!(!refinement_improves(Distance::ms(50.0), Distance::ms(40.0), Distance::ms(6.0), eps));
        assert!(!refinement_improves(Distance::ms(50.0), Distance::ms(50.0), Distance::ms(0.0), eps));
    }

    #[test]
    fn droppable_skips_backbone_parent_and_children() {
        let mut m = MeshState::default();
        m.links.insert(NodeId(1), link(MeshScope::TopLevel, 50.0, true));
        m.links.insert(NodeId(2), link(MeshScope::TopLevel, 40.0, false));
        m.links.insert(NodeId(3), link(MeshScope::TopLevel, 90.0, false));
        m.links.insert(NodeId(4), link(MeshScope::TopLevel, 99.0, false));
        let children = [NodeId(4)].into_iter().collect();
        // 4 serves a child, 1 is backbone, 2 is the parent; 3 is the worst
        // remaining link.
        assert_eq!(m.droppable(Some(NodeId(2)), &children), Some(NodeId(3)));
    }

    #[test]
    fn tree_check_classifies() {
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(1), s);
        parent.insert(NodeId(2), NodeId(1));
        parent.insert(NodeId(3), NodeId(9)); // dangling parent
        parent.insert(NodeId(4), NodeId(5)); // 4 <-> 5 loop
        parent.insert(NodeId(5), NodeId(4));
        let members = [0, 1, 2, 3, 4, 5].into_iter().map(NodeId).collect();
        let t = TreeSnapshot { source: s, parent, members };
        let check = t.check();
        assert!(check.connected.contains(&NodeId(2)));
        assert!(check.disconnected.contains(&NodeId(3)));
        assert_eq!(check.loops.len(), 2);
    }

    #[test]
    fn overlay_delays_sum_edges() {
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(1), s);
        parent.insert(NodeId(2), NodeId(1));
        let members = [0, 1, 2].into_iter().map(NodeId).collect();
        let t = TreeSnapshot { source: s, parent, members };
        let delays = t.overlay_delays(|a, b| (a.0 + b.0) as f64);
        assert_eq!(delays[&NodeId(1)], 1.0);
        assert_eq!(delays[&NodeId(2)], 4.0);
    }

    #[test]
    fn routing_converges_to_shortest_paths_on_complete_mesh() {
        // Small-instance optimality: on a complete mesh with unbounded
        // degree, synchronous advert exchange converges to the shortest-path
        // tree, checked against Dijkstra.
        let n = 7usize;
        let mut rtt = vec![vec![0.0f64; n]; n];
        let mut seed = 1u64;
        let mut next = || {
            // xorshift, deterministic
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed % 1000) as f64 / 10.0 + 1.0
        };
        for i in 0..n {
            for j in (i + 1)..n {
                let d = next();
                rtt[i][j] = d;
                rtt[j][i] = d;
            }
        }
        let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let links_of = |me: usize| -> BTreeMap<NodeId, MeshLink> {
            (0..n)
                .filter(|&j| j != me)
                .map(|j| (ids[j], link(MeshScope::TopLevel, rtt[me][j], false)))
                .collect()
        };
        let mut states: Vec<RoutingState> = (0..n).map(|_| RoutingState::default()).collect();
        // Synchronous rounds of advertisement until fixpoint.
        for _ in 0..n + 2 {
            let adverts: Vec<Option<RouteAdvert>> =
                (0..n).map(|i| states[i].own_advert(ids[i], i == 0)).collect();
            for i in 1..n {
                for j in 0..n {
                    if i != j {
                        if let Some(adv) = &adverts[j] {
                            states[i].adverts.insert(ids[j], adv.clone());
                        }
                    }
                }
                let links = links_of(i);
                states[i].reselect(ids[i], &links);
            }
        }
        // Dijkstra from node 0.
        let mut dist = vec![f64::INFINITY; n];
        dist[0] = 0.0;
        let mut done = vec![false; n];
        for _ in 0..n {
            let u = (0..n)
                .filter(|&u| !done[u])
                .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                .unwrap();
            done[u] = true;
            for v in 0..n {
                if v != u && dist[u] + rtt[u][v] < dist[v] {
                    dist[v] = dist[u] + rtt[u][v];
                }
            }
        }
        for i in 1..n {
            let got = states[i].dist.unwrap().as_ms();
            assert!((got - dist[i]).abs() < 1e-9, "node {i}: {got} vs {}", dist[i]);
        }
    }
}
