//! Shared identities, the distance metric and fan-out/capacity arithmetic.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Unique node identity within one simulation run. Ids are never reused
/// after a permanent departure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Cluster identity, minted only by cluster creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Round-trip network delay in milliseconds. Non-negative and finite by
/// construction; symmetric within one measurement oracle.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Distance(f64);

/// Sentinel for unknown learned distances. Large enough that an unknown
/// pair can never fall under any representable selection threshold.
pub const INF_DISCARD: Distance = Distance((1u64 << 31) as f64);

impl Distance {
    pub fn from_ms(ms: f64) -> Result<Self, TypeError> {
        if !ms.is_finite() || ms < 0.0 {
            return Err(TypeError::InvalidDistance(ms));
        }
        Ok(Distance(ms))
    }

    /// Panics on negative/non-finite input; for literals and oracle reads.
    pub fn ms(ms: f64) -> Self {
        Self::from_ms(ms).expect("distance must be finite and non-negative")
    }

    pub const ZERO: Distance = Distance(0.0);

    pub fn as_ms(self) -> f64 {
        self.0
    }

    pub fn is_unknown(self) -> bool {
        self.0 >= INF_DISCARD.0
    }
}

impl Eq for Distance {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for Distance {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("playback rate must be positive")]
    ZeroPlaybackRate,
    #[error("a cluster always contains at least its leader")]
    EmptyCluster,
    #[error("invalid distance: {0}")]
    InvalidDistance(f64),
    #[error("fan-out distribution must have positive weights and at least one entry")]
    InvalidFanoutDistribution,
}

/// A node's protocol-relevant identity card.
#[derive(Debug, Clone)]
pub struct NodeProfile {
    pub id: NodeId,
    /// Max simultaneous overlay connections (mesh links and tree links alike).
    pub fanout_max: u32,
    /// R_max: the RTT radius inside which a leader counts as "nearby".
    pub scope_radius: Distance,
    /// Simulation time of overlay entry, microseconds.
    pub joined_at: u64,
    pub is_leader: bool,
    pub edge_memberships: BTreeSet<ClusterId>,
}

impl NodeProfile {
    pub fn new(id: NodeId, fanout_max: u32, scope_radius: Distance, joined_at: u64) -> Self {
        NodeProfile {
            id,
            fanout_max,
            scope_radius,
            joined_at,
            is_leader: false,
            edge_memberships: BTreeSet::new(),
        }
    }

    /// A node is an edge node iff it holds two or more accepted memberships.
    pub fn is_edge(&self) -> bool {
        self.edge_memberships.len() >= 2
    }
}

/// Streams a node can serve: floor(access capacity / playback rate).
pub fn fanout_from_capacity(access_capacity_kbps: u32, playback_rate_kbps: u32) -> Result<u32, TypeError> {
    if playback_rate_kbps == 0 {
        return Err(TypeError::ZeroPlaybackRate);
    }
    Ok(access_capacity_kbps / playback_rate_kbps)
}

/// Cluster overall capacity: sum of member fan-outs minus member count.
/// May be negative when members have zero fan-out.
pub fn cluster_overall_capacity(member_fanouts: &[u32]) -> Result<i64, TypeError> {
    if member_fanouts.is_empty() {
        return Err(TypeError::EmptyCluster);
    }
    let sum: i64 = member_fanouts.iter().map(|&f| f as i64).sum();
    Ok(sum - member_fanouts.len() as i64)
}

/// Discrete fan-out distribution, standing in for a peer bandwidth model.
/// Weights are normalized at construction.
#[derive(Debug, Clone)]
pub struct FanoutDistribution {
    entries: Vec<(u32, f64)>,
}

impl FanoutDistribution {
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self, TypeError> {
        if entries.is_empty() || entries.iter().any(|&(_, w)| !(w > 0.0) || !w.is_finite()) {
            return Err(TypeError::InvalidFanoutDistribution);
        }
        let total: f64 = entries.iter().map(|&(_, w)| w).sum();
        let entries = entries.into_iter().map(|(f, w)| (f, w / total)).collect();
        Ok(FanoutDistribution { entries })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let x: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for &(fanout, w) in &self.entries {
            acc += w;
            if x < acc {
                return fanout;
            }
        }
        self.entries.last().unwrap().0
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }
}

impl Default for FanoutDistribution {
    fn default() -> Self {
        FanoutDistribution::new(vec![(1, 0.2), (2, 0.4), (4, 0.3), (8, 0.1)]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fanout_single_stream_capacity() {
        // A node with exactly one stream's worth of capacity serves one child.
        assert_eq!(fanout_from_capacity(560, 560), Ok(1));
    }

    #[test]
    fn fanout_zero_capacity() {
        assert_eq!(fanout_from_capacity(0, 560), Ok(0));
    }

    #[test]
    fn fanout_floors() {
        assert_eq!(fanout_from_capacity(1500, 560), Ok(2));
    }

    #[test]
    fn fanout_zero_rate_rejected() {
        assert_eq!(fanout_from_capacity(1500, 0), Err(TypeError::ZeroPlaybackRate));
    }

    #[test]
    fn capacity_saturated_cluster() {
        // All members with fan-out 1 saturate the cluster.
        assert_eq!(cluster_overall_capacity(&[1, 1, 1]), Ok(0));
    }

    #[test]
    fn capacity_single_member() {
        assert_eq!(cluster_overall_capacity(&[3]), Ok(2));
    }

    #[test]
    fn capacity_mixed() {
        assert_eq!(cluster_overall_capacity(&[2, 4, 1, 1]), Ok(4));
    }

    #[test]
    fn capacity_empty_rejected() {
        assert_eq!(cluster_overall_capacity(&[]), Err(TypeError::EmptyCluster));
    }

    #[test]
    fn capacity_join_deltas() {
        // A zero fan-out joiner costs exactly 1; a fan-out f joiner adds f - 1.
        let base = cluster_overall_capacity(&[2, 4]).unwrap();
        assert_eq!(cluster_overall_capacity(&[2, 4, 0]).unwrap(), base - 1);
        for f in 1..10u32 {
            let with = cluster_overall_capacity(&[2, 4, f]).unwrap();
            assert_eq!(with, base + f as i64 - 1);
        }
    }

    #[test]
    fn fanout_monotonicity() {
        for cap in (0..4000).step_by(97) {
            for rate in (1..2000).step_by(83) {
                let f = fanout_from_capacity(cap, rate).unwrap();
                assert!(fanout_from_capacity(cap + 1, rate).unwrap() >= f);
                assert!(fanout_from_capacity(cap, rate + 1).unwrap() <= f);
            }
        }
    }

    #[test]
    fn distance_rejects_negative() {
        assert!(Distance::from_ms(-1.0).is_err());
        assert!(Distance::from_ms(f64::NAN).is_err());
    }

    #[test]
    fn fanout_distribution_sampling() {
        let dist = FanoutDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..10_000 {
            *counts.entry(dist.sample(&mut rng)).or_insert(0u32) += 1;
        }
        // Every configured fan-out shows up roughly per its weight.
        assert!(counts[&1] > 1500 && counts[&1] < 2500);
        assert!(counts[&2] > 3400 && counts[&2] < 4600);
        assert!(counts[&4] > 2400 && counts[&4] < 3600);
        assert!(counts[&8] > 600 && counts[&8] < 1400);
    }

    #[test]
    fn edge_requires_two_memberships() {
        let mut p = NodeProfile::new(NodeId(1), 2, Distance::ms(50.0), 0);
        assert!(!p.is_edge());
        p.edge_memberships.insert(ClusterId(0));
        assert!(!p.is_edge());
        p.edge_memberships.insert(ClusterId(1));
        assert!(p.is_edge());
    }
}
