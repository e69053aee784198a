//! Synthetic underlay delay models: a Euclidean plane scaled to a target
//! median RTT, and a two-level transit-stub hierarchy with true hop paths
//! for link-stress accounting.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("topology needs at least one node")]
    Empty,
    #[error("link stress needs underlay hop paths; use the transit_stub model")]
    NoHopPaths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyModel {
    Euclidean2D,
    TransitStub,
}

/// An undirected underlay link between two router-graph vertices.
pub type UnderlayLink = (u32, u32);

#[derive(Debug, Clone)]
enum Backend {
    /// Points on a plane; RTT is the (scaled) Euclidean distance and the
    /// direct line is the shortest path.
    Euclidean { points: Vec<(f64, f64)> },
    /// Host -> stub router -> transit backbone. RTTs are shortest paths over
    /// the router graph; hop paths are available for stress accounting.
    /// Graph vertices: hosts 0..n, then stub routers, then transit.
    TransitStub {
        dist: Vec<f64>,   // n x n host RTT matrix
        parent: Vec<u32>, // n x v parent forest per source host
        vertices: usize,
    },
    /// Explicit matrix, for scripted tests.
    Explicit { dist: Vec<f64>, n: usize },
}

#[derive(Debug, Clone)]
pub struct Topology {
    n: usize,
    model: TopologyModel,
    backend: Backend,
    overrides: BTreeMap<(u32, u32), f64>,
}

impl Topology {
    pub fn generate(n: usize, model: TopologyModel, seed: u64) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let backend = match model {
            TopologyModel::Euclidean2D => euclidean(n, seed),
            TopologyModel::TransitStub => transit_stub(n, seed),
        };
        Ok(Topology { n, model, backend, overrides: BTreeMap::new() })
    }

    /// Explicit symmetric RTT matrix, for scripted tests.
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self, TopologyError> {
        let n = matrix.len();
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut dist = vec![0.0; n * n];
        for (i, row) in matrix.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                dist[i * n + j] = d;
            }
        }
        Ok(Topology {
            n,
            model: TopologyModel::Euclidean2D,
            backend: Backend::Explicit { dist, n },
            overrides: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn model(&self) -> TopologyModel {
        self.model
    }

    /// Round-trip delay between two hosts in milliseconds.
    pub fn rtt(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            return 0.0;
        }
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        if let Some(&d) = self.overrides.get(&key) {
            return d;
        }
        match &self.backend {
            Backend::Euclidean { points } => {
                let (x1, y1) = points[a.0 as usize];
                let (x2, y2) = points[b.0 as usize];
                ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt()
            }
            Backend::TransitStub { dist, .. } => dist[a.0 as usize * self.n + b.0 as usize],
            Backend::Explicit { dist, n } => dist[a.0 as usize * n + b.0 as usize],
        }
    }

    /// Underlay shortest-path delay; identical to `rtt` in every model here
    /// (the underlay routes on shortest paths).
    pub fn shortest_rtt(&self, a: NodeId, b: NodeId) -> f64 {
        self.rtt(a, b)
    }

    /// Scripted delay inflation between a pair, for migration tests.
    pub fn override_rtt(&mut self, a: NodeId, b: NodeId, rtt_ms: f64) {
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        self.overrides.insert(key, rtt_ms);
    }

    pub fn clear_override(&mut self, a: NodeId, b: NodeId) {
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        self.overrides.remove(&key);
    }

    /// The underlay links traversed between two hosts, for stress accounting.
    pub fn underlay_path(&self, a: NodeId, b: NodeId) -> Result<Vec<UnderlayLink>, TopologyError> {
        match &self.backend {
            Backend::TransitStub { parent, vertices, .. } => {
                let v = *vertices;
                let src = a.0 as usize;
                let mut links = Vec::new();
                let mut cur = b.0;
                while cur != a.0 {
                    let p = parent[src * v + cur as usize];
                    let link = if p <= cur { (p, cur) } else { (cur, p) };
                    links.push(link);
                    cur = p;
                }
                Ok(links)
            }
            _ => Err(TopologyError::NoHopPaths),
        }
    }
}

fn euclidean(n: usize, seed: u64) -> Backend {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_706f);
    let raw: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    // Scale so the median pairwise RTT lands at ~60 ms.
    let mut sample = Vec::new();
    if n >= 2 {
        let pairs = (n * (n - 1)) / 2;
        if pairs <= 100_000 {
            for i in 0..n {
                for j in (i + 1)..n {
                    sample.push(dist2(raw[i], raw[j]));
                }
            }
        } else {
            for _ in 0..100_000 {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if i != j {
                    sample.push(dist2(raw[i], raw[j]));
                }
            }
        }
    }
    let scale = if sample.is_empty() {
        1.0
    } else {
        sample.sort_by(|a, b| a.total_cmp(b));
        let median = sample[sample.len() / 2];
        if median > 0.0 {
            60.0 / median
        } else {
            1.0
        }
    };
    let points = raw.into_iter().map(|(x, y)| (x * scale, y * scale)).collect();
    Backend::Euclidean { points }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn transit_stub(n: usize, seed: u64) -> Backend {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7473_7462);
    let transit = ((n as f64).sqrt() as usize / 2).clamp(3, 24);
    let stubs = (n / 8).clamp(transit, 256);
    let hosts = n;
    let vertices = hosts + stubs + transit;
    let stub_base = hosts as u32;
    let transit_base = (hosts + stubs) as u32;

    // adjacency: vertex -> (peer, one-way-ish cost treated as RTT share)
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); vertices];
    let mut add = |adj: &mut Vec<Vec<(u32, f64)>>, a: u32, b: u32, w: f64| {
        adj[a as usize].push((b, w));
        adj[b as usize].push((a, w));
    };

    // Transit backbone: ring plus a few chords, 20-80 ms.
    for t in 0..transit {
        let a = transit_base + t as u32;
        let b = transit_base + ((t + 1) % transit) as u32;
        if transit > 1 {
            add(&mut adj, a, b, rng.gen_range(20.0..80.0));
        }
    }
    for _ in 0..transit / 2 {
        let a = transit_base + rng.gen_range(0..transit) as u32;
        let b = transit_base + rng.gen_range(0..transit) as u32;
        if a != b {
            add(&mut adj, a, b, rng.gen_range(20.0..80.0));
        }
    }

    // Each stub router hangs off one transit node, 20-80 ms.
    for s in 0..stubs {
        let t = transit_base + rng.gen_range(0..transit) as u32;
        add(&mut adj, stub_base + s as u32, t, rng.gen_range(20.0..80.0));
    }

    // Hosts attach to a stub router, 2-10 ms.
    for h in 0..hosts {
        let s = stub_base + rng.gen_range(0..stubs) as u32;
        add(&mut adj, h as u32, s, rng.gen_range(2.0..10.0));
    }

    // Dijkstra from every host over the router graph. Non-negative float
    // bits order the same as the values, so the heap keys on raw bits.
    let mut dist = vec![0.0f64; hosts * hosts];
    let mut parent = vec![u32::MAX; hosts * vertices];
    let mut dv = vec![f64::INFINITY; vertices];
    let mut heap = std::collections::BinaryHeap::new();
    for src in 0..hosts {
        dv.iter_mut().for_each(|d| *d = f64::INFINITY);
        heap.clear();
        dv[src] = 0.0;
        heap.push(std::cmp::Reverse((0.0f64.to_bits(), src as u32)));
        while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
            let d = f64::from_bits(d);
            if d > dv[u as usize] {
                continue;
            }
            for &(v, w) in &adj[u as usize] {
                let nd = d + w;
                if nd < dv[v as usize] {
                    dv[v as usize] = nd;
                    parent[src * vertices + v as usize] = u;
                    heap.push(std::cmp::Reverse((nd.to_bits(), v)));
                }
            }
        }
        for dst in 0..hosts {
            dist[src * hosts + dst] = dv[dst];
        }
    }

    Backend::TransitStub { dist, parent, vertices }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_nodes_rejected() {
        assert_eq!(Topology::generate(0, TopologyModel::Euclidean2D, 1).unwrap_err(), TopologyError::Empty);
    }

    #[test]
    fn single_node_trivial() {
        let t = Topology::generate(1, TopologyModel::Euclidean2D, 1).unwrap();
        assert_eq!(t.rtt(NodeId(0), NodeId(0)), 0.0);
    }

    #[test]
    fn two_nodes_symmetric_positive() {
        let t = Topology::generate(2, TopologyModel::Euclidean2D, 3).unwrap();
        let d = t.rtt(NodeId(0), NodeId(1));
        assert!(d > 0.0);
        assert_eq!(d, t.rtt(NodeId(1), NodeId(0)));
        // A single pair is its own median: scaled to exactly 60.
        assert!((d - 60.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic() {
        for model in [TopologyModel::Euclidean2D, TopologyModel::TransitStub] {
            let a = Topology::generate(64, model, 77).unwrap();
            let b = Topology::generate(64, model, 77).unwrap();
            for i in 0..64u32 {
                for j in 0..64u32 {
                    assert_eq!(a.rtt(NodeId(i), NodeId(j)), b.rtt(NodeId(i), NodeId(j)));
                }
            }
        }
    }

    #[test]
    fn euclidean_median_near_60ms() {
        let t = Topology::generate(300, TopologyModel::Euclidean2D, 5).unwrap();
        let mut ds = Vec::new();
        for i in 0..300u32 {
            for j in (i + 1)..300u32 {
                ds.push(t.rtt(NodeId(i), NodeId(j)));
            }
        }
        ds.sort_by(|a, b| a.total_cmp(b));
        let median = ds[ds.len() / 2];
        assert!((median - 60.0).abs() < 2.0, "median {median}");
    }

    #[test]
    fn transit_stub_metric_properties() {
        let t = Topology::generate(120, TopologyModel::TransitStub, 9).unwrap();
        for i in 0..120u32 {
            assert_eq!(t.rtt(NodeId(i), NodeId(i)), 0.0);
            for j in 0..120u32 {
                let d = t.rtt(NodeId(i), NodeId(j));
                assert_eq!(d, t.rtt(NodeId(j), NodeId(i)));
                if i != j {
                    assert!(d > 0.0);
                    assert!(d.is_finite());
                }
            }
        }
        // Shortest-path metrics respect the triangle inequality.
        for i in (0..120u32).step_by(17) {
            for j in (0..120u32).step_by(13) {
                for k in (0..120u32).step_by(11) {
                    let via = t.rtt(NodeId(i), NodeId(k)) + t.rtt(NodeId(k), NodeId(j));
                    assert!(t.rtt(NodeId(i), NodeId(j)) <= via + 1e-9);
                }
            }
        }
    }

    #[test]
    fn transit_stub_paths_connect_endpoints() {
        let t = Topology::generate(60, TopologyModel::TransitStub, 4).unwrap();
        let path = t.underlay_path(NodeId(3), NodeId(44)).unwrap();
        assert!(!path.is_empty());
        // Endpoints show up exactly once each across the walk.
        let count3 = path.iter().filter(|&&(a, b)| a == 3 || b == 3).count();
        let count44 = path.iter().filter(|&&(a, b)| a == 44 || b == 44).count();
        assert_eq!(count3, 1);
        assert_eq!(count44, 1);
    }

    #[test]
    fn euclidean_has_no_hop_paths() {
        let t = Topology::generate(4, TopologyModel::Euclidean2D, 1).unwrap();
        assert_eq!(t.underlay_path(NodeId(0), NodeId(1)).unwrap_err(), TopologyError::NoHopPaths);
    }

    #[test]
    fn overrides_apply_and_clear() {
        let mut t = Topology::from_matrix(vec![vec![0.0, 10.0], vec![10.0, 0.0]]).unwrap();
        assert_eq!(t.rtt(NodeId(0), NodeId(1)), 10.0);
        t.override_rtt(NodeId(0), NodeId(1), 99.0);
        assert_eq!(t.rtt(NodeId(1), NodeId(0)), 99.0);
        t.clear_override(NodeId(0), NodeId(1));
        assert_eq!(t.rtt(NodeId(0), NodeId(1)), 10.0);
    }
}
