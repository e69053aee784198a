//! Evaluation metrics over simulator output: relative delay penalty, link
//! stress, convergence time, link-adjustment rate, control overhead and
//! failure recovery times. All pure functions of their inputs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::meshtree::TreeSnapshot;
use crate::topology::{Topology, TopologyError};
use crate::types::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ARDP needs at least two connected nodes")]
    TooSmall,
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// One periodic measurement row. `stress_*` is only present on topologies
/// with underlay hop paths.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSnapshot {
    pub at_s: f64,
    pub ardp: Option<f64>,
    pub connected_fraction: f64,
    pub stress_mean: Option<f64>,
    pub stress_max: Option<u32>,
    pub adjustments_per_node_per_hour: f64,
    pub control_kbps_per_node: f64,
    pub live_nodes: usize,
    pub clusters: usize,
    pub leaders: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArdpResult {
    /// Mean of d'(s,i)/d(s,i) over connected receivers; None when fewer than
    /// one receiver is connected.
    pub ardp: Option<f64>,
    pub connected_fraction: f64,
    pub counted: usize,
    pub disconnected: usize,
}

/// Average relative delay penalty of a delivery tree: overlay delay divided
/// by underlay shortest-path delay, averaged over all receivers reachable
/// from the source. Disconnected nodes are excluded and reported.
pub fn ardp(tree: &TreeSnapshot, topo: &Topology, source: NodeId) -> ArdpResult {
    let check = tree.check();
    let delays = tree.overlay_delays(|a, b| topo.rtt(a, b));
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &node in &check.connected {
        if node == source {
            continue;
        }
        let overlay = delays[&node];
        let underlay = topo.shortest_rtt(source, node);
        if underlay > 0.0 {
            sum += overlay / underlay;
            counted += 1;
        }
    }
    let receivers = tree.members.len().saturating_sub(1);
    let connected_fraction = if receivers == 0 {
        1.0
    } else {
        (check.connected.len().saturating_sub(1)) as f64 / receivers as f64
    };
    ArdpResult {
        ardp: if counted > 0 { Some(sum / counted as f64) } else { None },
        connected_fraction,
        counted,
        disconnected: check.disconnected.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressSummary {
    /// Mean copies over underlay links that carry at least one copy.
    pub mean: f64,
    pub max: u32,
    pub links_used: usize,
    /// Total underlay-hop traversals; equals the sum of per-link counts.
    pub total_traversals: u64,
}

/// Copies of an identical packet crossing each underlay link: each overlay
/// tree edge traverses its underlay hop path once.
pub fn link_stress(tree: &TreeSnapshot, topo: &Topology) -> Result<StressSummary, MetricsError> {
    let mut per_link: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for (child, parent) in tree.edges() {
        for link in topo.underlay_path(parent, child)? {
            *per_link.entry(link).or_insert(0) += 1;
        }
    }
    let links_used = per_link.len();
    let total: u64 = per_link.values().map(|&c| c as u64).sum();
    let max = per_link.values().copied().max().unwrap_or(0);
    let mean = if links_used > 0 { total as f64 / links_used as f64 } else { 0.0 };
    Ok(StressSummary { mean, max, links_used, total_traversals: total })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Convergence {
    /// First snapshot time after the last join with ARDP under the threshold
    /// and staying under it for the rest of the run.
    At(f64),
    NotConverged { final_ardp: Option<f64> },
}

pub fn convergence_time(snapshots: &[MetricSnapshot], threshold: f64, last_join_s: f64) -> Convergence {
    let mut candidate: Option<f64> = None;
    for snap in snapshots {
        let below = snap.ardp.map(|a| a < threshold).unwrap_or(false);
        if snap.at_s < last_join_s || !below {
            candidate = None;
            continue;
        }
        if candidate.is_none() {
            candidate = Some(snap.at_s);
        }
    }
    match candidate {
        Some(t) => Convergence::At(t),
        None => Convergence::NotConverged { final_ardp: snapshots.last().and_then(|s| s.ardp) },
    }
}

/// Sliding-window link adjustment rate, per live node per hour.
pub fn adjustment_rate(count_in_window: usize, live_nodes: usize, window_s: f64) -> f64 {
    if live_nodes == 0 || window_s <= 0.0 {
        return 0.0;
    }
    count_in_window as f64 / live_nodes as f64 / (window_s / 3600.0)
}

/// Control overhead in kbps per live node over a window.
pub fn control_kbps(bytes_in_window: u64, live_nodes: usize, window_s: f64) -> f64 {
    if live_nodes == 0 || window_s <= 0.0 {
        return 0.0;
    }
    (bytes_in_window as f64 * 8.0 / 1000.0) / window_s / live_nodes as f64
}

/// Mean after dropping the top and bottom `frac` of observations, reported
/// alongside the untrimmed mean.
pub fn trimmed_mean(values: &[f64], frac: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let cut = (v.len() as f64 * frac).floor() as usize;
    let kept = &v[cut..v.len() - cut.min(v.len() - cut)];
    if kept.is_empty() {
        return None;
    }
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Recovery observations for one failure script entry.
#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub failure_at_s: f64,
    pub affected: usize,
    /// Per-node time to regain a loop-free path to the source, seconds.
    pub resume_s: Vec<f64>,
    /// Nodes that never resumed within the horizon.
    pub censored: usize,
    /// Clusters that lost their leader but ended with a live one.
    pub clusters_recovered: usize,
    pub clusters_affected: usize,
}

impl RecoveryReport {
    pub fn mean_resume_s(&self) -> Option<f64> {
        mean(&self.resume_s)
    }

    pub fn max_resume_s(&self) -> Option<f64> {
        self.resume_s.iter().copied().max_by(|a, b| a.total_cmp(b))
    }
}

/// Frozen CSV column order for snapshot streams.
pub const CSV_HEADER: &str =
    "time_s,ardp,connected_fraction,stress_mean,stress_max,adjustments_per_node_per_hour,control_kbps_per_node,live_nodes,clusters,leaders";

pub fn snapshot_csv_row(s: &MetricSnapshot) -> String {
    fn opt_f(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "na".to_string())
    }
    fn opt_u(v: Option<u32>) -> String {
        v.map(|x| x.to_string()).unwrap_or_else(|| "na".to_string())
    }
    format!(
        "{:.1},{},{:.6},{},{},{:.6},{:.6},{},{},{}",
        s.at_s,
        opt_f(s.ardp),
        s.connected_fraction,
        opt_f(s.stress_mean),
        opt_u(s.stress_max),
        s.adjustments_per_node_per_hour,
        s.control_kbps_per_node,
        s.live_nodes,
        s.clusters,
        s.leaders
    )
}

pub fn snapshots_to_csv(snapshots: &[MetricSnapshot]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in snapshots {
        out.push_str(&snapshot_csv_row(s));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn snap(at_s: f64, ardp: Option<f64>) -> MetricSnapshot {
        MetricSnapshot {
            at_s,
            ardp,
            connected_fraction: 1.0,
            stress_mean: None,
            stress_max: None,
            adjustments_per_node_per_hour: 0.0,
            control_kbps_per_node: 0.0,
            live_nodes: 10,
            clusters: 1,
            leaders: 1,
        }
    }

    #[test]
    fn ardp_star_overlay_is_one() {
        // Overlay identical to the underlay shortest paths.
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        let mut members = BTreeSet::new();
        members.insert(s);
        for i in 1..5u32 {
            parent.insert(NodeId(i), s);
            members.insert(NodeId(i));
        }
        let tree = TreeSnapshot { source: s, parent, members };
        let topo = Topology::generate(5, crate::topology::TopologyModel::Euclidean2D, 8).unwrap();
        let r = ardp(&tree, &topo, s);
        assert_eq!(r.ardp, Some(1.0));
        assert_eq!(r.connected_fraction, 1.0);
    }

    #[test]
    fn ardp_chain_hand_value() {
        // s--a--b: overlay edges cost 20 + 20, underlay d(s,b) = 30,
        // d(s,a) = 20, so ARDP = (1 + 4/3) / 2.
        let m = vec![
            vec![0.0, 20.0, 30.0],
            vec![20.0, 0.0, 20.0],
            vec![30.0, 20.0, 0.0],
        ];
        let topo = Topology::from_matrix(m).unwrap();
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(1), s);
        parent.insert(NodeId(2), NodeId(1));
        let members = [0, 1, 2].into_iter().map(NodeId).collect();
        let tree = TreeSnapshot { source: s, parent, members };
        let r = ardp(&tree, &topo, s);
        let expect = (1.0 + 40.0 / 30.0) / 2.0;
        assert!((r.ardp.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ardp_excludes_disconnected() {
        let m = vec![
            vec![0.0, 20.0, 30.0],
            vec![20.0, 0.0, 20.0],
            vec![30.0, 20.0, 0.0],
        ];
        let topo = Topology::from_matrix(m).unwrap();
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(1), s);
        // node 2 has no parent: disconnected.
        let members: BTreeSet<NodeId> = [0, 1, 2].into_iter().map(NodeId).collect();
        let tree = TreeSnapshot { source: s, parent, members };
        let r = ardp(&tree, &topo, s);
        assert_eq!(r.ardp, Some(1.0));
        assert!(r.connected_fraction < 1.0);
        assert_eq!(r.disconnected, 1);
    }

    #[test]
    fn stress_single_edge_all_ones() {
        let topo = Topology::generate(20, crate::topology::TopologyModel::TransitStub, 2).unwrap();
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(7), s);
        let members = [0, 7].into_iter().map(NodeId).collect();
        let tree = TreeSnapshot { source: s, parent, members };
        let st = link_stress(&tree, &topo).unwrap();
        assert_eq!(st.max, 1);
        assert_eq!(st.mean, 1.0);
        assert_eq!(st.total_traversals as usize, st.links_used);
    }

    #[test]
    fn stress_conservation() {
        // Total traversals equal the sum of each edge's underlay path length.
        let topo = Topology::generate(30, crate::topology::TopologyModel::TransitStub, 3).unwrap();
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        let mut members: BTreeSet<NodeId> = BTreeSet::new();
        members.insert(s);
        for i in 1..10u32 {
            parent.insert(NodeId(i), NodeId(i / 2));
            members.insert(NodeId(i));
        }
        let tree = TreeSnapshot { source: s, parent: parent.clone(), members };
        let st = link_stress(&tree, &topo).unwrap();
        let mut expect = 0u64;
        for (&c, &p) in &parent {
            expect += topo.underlay_path(p, c).unwrap().len() as u64;
        }
        assert_eq!(st.total_traversals, expect);
    }

    #[test]
    fn stress_requires_hop_paths() {
        let topo = Topology::generate(4, crate::topology::TopologyModel::Euclidean2D, 2).unwrap();
        let s = NodeId(0);
        let mut parent = BTreeMap::new();
        parent.insert(NodeId(1), s);
        let members = [0, 1].into_iter().map(NodeId).collect();
        let tree = TreeSnapshot { source: s, parent, members };
        assert!(matches!(link_stress(&tree, &topo), Err(MetricsError::Topology(_))));
    }

    #[test]
    fn stress_shared_transit_link() {
        // Two hosts in the same stub reached from a far source share the
        // transit hops: the topology is explicit so we script it through
        // from_matrix? Hop paths need transit-stub; craft via generation and
        // pick two hosts attached to the same stub router (same first hop).
        let topo = Topology::generate(40, crate::topology::TopologyModel::TransitStub, 11).unwrap();
        // Find two hosts whose paths from host 0 share at least one link.
        let mut found = false;
        'outer: for a in 1..40u32 {
            for b in (a + 1)..40u32 {
                let pa = topo.underlay_path(NodeId(0), NodeId(a)).unwrap();
                let pb = topo.underlay_path(NodeId(0), NodeId(b)).unwrap();
                if pa.iter().any(|l| pb.contains(l)) {
                    let mut parent = BTreeMap::new();
                    parent.insert(NodeId(a), NodeId(0));
                    parent.insert(NodeId(b), NodeId(0));
                    let members = [0, a, b].into_iter().map(NodeId).collect();
                    let tree = TreeSnapshot { source: NodeId(0), parent, members };
                    let st = link_stress(&tree, &topo).unwrap();
                    assert!(st.max >= 2, "shared link must carry two copies");
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found, "expected at least one pair sharing a link");
    }

    #[test]
    fn convergence_immediate() {
        let snaps = vec![snap(10.0, Some(1.5)), snap(20.0, Some(1.4))];
        assert_eq!(convergence_time(&snaps, 2.0, 0.0), Convergence::At(10.0));
    }

    #[test]
    fn convergence_requires_sustained() {
        let snaps = vec![
            snap(10.0, Some(1.5)),
            snap(20.0, Some(2.5)), // dips back up
            snap(30.0, Some(1.8)),
            snap(40.0, Some(1.7)),
        ];
        assert_eq!(convergence_time(&snaps, 2.0, 0.0), Convergence::At(30.0));
    }

    #[test]
    fn convergence_waits_for_last_join() {
        let snaps = vec![snap(10.0, Some(1.5)), snap(20.0, Some(1.5))];
        assert_eq!(convergence_time(&snaps, 2.0, 15.0), Convergence::At(20.0));
    }

    #[test]
    fn convergence_never() {
        let snaps = vec![snap(10.0, Some(3.0))];
        assert_eq!(
            convergence_time(&snaps, 2.0, 0.0),
            Convergence::NotConverged { final_ardp: Some(3.0) }
        );
    }

    #[test]
    fn adjustment_rate_arithmetic() {
        // 10 adjustments by 5 nodes in a 30-minute window: 4 per node-hour.
        assert_eq!(adjustment_rate(10, 5, 1800.0), 4.0);
        assert_eq!(adjustment_rate(0, 5, 1800.0), 0.0);
        assert_eq!(adjustment_rate(10, 0, 1800.0), 0.0);
    }

    #[test]
    fn control_kbps_arithmetic() {
        // One 40-byte message per second per node: 0.32 kbps/node.
        let nodes = 7;
        let window = 10.0;
        let bytes = 40 * nodes as u64 * 10;
        assert!((control_kbps(bytes, nodes, window) - 0.32).abs() < 1e-12);
        assert_eq!(control_kbps(0, nodes, window), 0.0);
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let vals: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        let untrimmed = mean(&vals).unwrap();
        let trimmed = trimmed_mean(&vals, 0.2).unwrap();
        assert_eq!(untrimmed, 5.5);
        assert_eq!(trimmed, 5.5); // symmetric data: same center
        let skewed = vec![1.0, 1.0, 1.0, 1.0, 100.0];
        assert!(trimmed_mean(&skewed, 0.2).unwrap() < mean(&skewed).unwrap());
    }

    #[test]
    fn csv_rows_are_stable() {
        let row = snapshot_csv_row(&snap(10.0, Some(1.234567891)));
        assert_eq!(row, "10.0,1.234568,1.000000,na,na,0.000000,0.000000,10,1,1");
    }
}
