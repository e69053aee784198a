//! Ring-based locating: per-node level structure over known cluster leaders,
//! learned-distance matrices, the representative-selection algorithm run by a
//! requested node, and the newcomer's iterative locating loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::types::{Distance, NodeId, INF_DISCARD};

#[derive(Debug, Error, PartialEq)]
pub enum LocatingError {
    #[error("invalid ring parameters: alpha must be positive, max_level >= 1")]
    InvalidRings,
    #[error("negative distance")]
    NegativeDistance,
}

/// Exponentially increasing ring levels: r_0 = 0, r_i = alpha * e^(i-1).
/// Level i covers [r_i, r_{i+1}); distances at or past r_max_level fall into
/// the overflow level max_level.
#[derive(Debug, Clone)]
pub struct RingLevels {
    alpha_ms: f64,
    max_level: usize,
    radii: Vec<f64>, // r_0 ..= r_{max_level + 1}
}

impl RingLevels {
    pub fn new(alpha_ms: f64, max_level: usize) -> Result<Self, LocatingError> {
        if !(alpha_ms > 0.0) || !alpha_ms.is_finite() || max_level < 1 {
            return Err(LocatingError::InvalidRings);
        }
        let mut radii = Vec::with_capacity(max_level + 2);
        radii.push(0.0);
        for i in 1..=max_level + 1 {
            radii.push(alpha_ms * ((i - 1) as f64).exp());
        }
        Ok(RingLevels { alpha_ms, max_level, radii })
    }

    pub fn alpha_ms(&self) -> f64 {
        self.alpha_ms
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// r_i, defined up to max_level + 1.
    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i]
    }

    /// The unique level i with r_i <= d < r_{i+1}, clamped to the overflow
    /// level for d >= r_{max_level}.
    pub fn assign_level(&self, d: Distance) -> usize {
        let ms = d.as_ms();
        // Rings grow exponentially so a linear scan is at most ~10 steps.
        for i in 0..self.max_level {
            if ms < self.radii[i + 1] {
                return i;
            }
        }
        self.max_level
    }

    /// Selection criterion gamma_i = |d - r_i| / r_{i+1} * d for the level d
    /// falls in. Zero exactly at the level frontier, where fine-grained
    /// selection is wanted.
    pub fn selection_threshold(&self, d: Distance) -> Distance {
        let level = self.assign_level(d);
        let ms = d.as_ms();
        let r_i = self.radii[level];
        let r_next = self.radii[level + 1];
        Distance::ms((ms - r_i).abs() / r_next * ms)
    }
}

/// Learned distances for one level: a square matrix over the leaders known at
/// this level and its adjacent levels. Unknown pairs hold `INF_DISCARD`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    level: usize,
    index: Vec<NodeId>,
    entries: Vec<Distance>, // row-major n*n
}

impl DistanceMatrix {
    pub fn new<F>(level: usize, index: Vec<NodeId>, mut lookup: F) -> Self
    where
        F: FnMut(NodeId, NodeId) -> Option<Distance>,
    {
        let n = index.len();
        let mut entries = vec![INF_DISCARD; n * n];
        for j in 0..n {
            entries[j * n + j] = Distance::ZERO;
            for k in 0..n {
                if j != k {
                    if let Some(d) = lookup(index[j], index[k]) {
                        entries[j * n + k] = d;
                        entries[k * n + j] = d;
                    }
                }
            }
        }
        DistanceMatrix { level, index, entries }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.index
    }

    pub fn get(&self, j: usize, k: usize) -> Distance {
        self.entries[j * self.len() + k]
    }

    /// Representative selection: repeatedly pick a random not-yet-covered
    /// node j, mark every remaining node with a known distance to j under
    /// `gamma` as represented, and keep j as a representative. Terminates
    /// when every node is a representative or represented by one.
    pub fn select_representatives<R: Rng>(&self, gamma: Distance, rng: &mut R) -> Vec<NodeId> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        let mut pending: Vec<usize> = (0..n).collect();
        let mut reps = Vec::new();
        while !pending.is_empty() {
            let pick = rng.gen_range(0..pending.len());
            let j = pending.swap_remove(pick);
            reps.push(self.index[j]);
            pending.retain(|&k| !(self.get(j, k) < gamma));
        }
        reps
    }
}

#[derive(Debug, Clone, Copy)]
struct LevelEntry {
    dist: Distance,
    last_refresh: u64,
}

/// Per-node locating system: ring levels over known cluster leaders plus a
/// store of third-party distances learned while serving locating requests.
#[derive(Debug, Clone)]
pub struct LocatingSystem {
    owner: NodeId,
    rings: RingLevels,
    k_per_level: usize,
    levels: Vec<BTreeMap<NodeId, LevelEntry>>,
    pairs: PairStore,
}

impl LocatingSystem {
    pub fn new(owner: NodeId, rings: RingLevels, k_per_level: usize, pair_cap: usize) -> Self {
        let levels = vec![BTreeMap::new(); rings.max_level() + 1];
        LocatingSystem { owner, rings, k_per_level, levels, pairs: PairStore::new(pair_cap) }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn rings(&self) -> &RingLevels {
        &self.rings
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.distance_to(node).is_some()
    }

    pub fn distance_to(&self, node: NodeId) -> Option<Distance> {
        self.levels.iter().find_map(|lv| lv.get(&node).map(|e| e.dist))
    }

    pub fn tracked_count(&self) -> usize {
        self.levels.iter().map(|lv| lv.len()).sum()
    }

    pub fn tracked(&self) -> impl Iterator<Item = (NodeId, Distance)> + '_ {
        self.levels.iter().flat_map(|lv| lv.iter().map(|(&n, e)| (n, e.dist)))
    }

    /// Closest known leaders, ascending by distance.
    pub fn nearest(&self, count: usize) -> Vec<(NodeId, Distance)> {
        let mut all: Vec<(NodeId, Distance)> = self.tracked().collect();
        all.sort_by(|a, b| a.1.cmp(&b.1).then(a.0 .0.cmp(&b.0 .0)));
        all.truncate(count);
        all
    }

    /// Insert or refresh a leader at the level its measured distance selects.
    /// A full level evicts its stalest entry, but never one refreshed within
    /// `fresh_horizon_us`; insertion fails instead.
    pub fn insert_leader(&mut self, node: NodeId, d: Distance, now_us: u64, fresh_horizon_us: u64) -> bool {
        if node == self.owner {
            return false;
        }
        let level = self.rings.assign_level(d);
        // Distance changes can move a node between levels; drop any old slot.
        for (i, lv) in self.levels.iter_mut().enumerate() {
            if i != level {
                lv.remove(&node);
            }
        }
        let lv = &mut self.levels[level];
        if let Some(e) = lv.get_mut(&node) {
            e.dist = d;
            e.last_refresh = now_us;
            return true;
        }
        if lv.len() >= self.k_per_level {
            let stalest = lv
                .iter()
                .min_by_key(|(n, e)| (e.last_refresh, n.0))
                .map(|(&n, e)| (n, e.last_refresh));
            match stalest {
                Some((victim, at)) if now_us.saturating_sub(at) > fresh_horizon_us => {
                    lv.remove(&victim);
                }
                _ => return false,
            }
        }
        lv.insert(node, LevelEntry { dist: d, last_refresh: now_us });
        true
    }

    pub fn remove(&mut self, node: NodeId) {
        for lv in &mut self.levels {
            lv.remove(&node);
        }
    }

    pub fn record_pair(&mut self, a: NodeId, b: NodeId, d: Distance, now_us: u64) {
        self.pairs.record(a, b, d, now_us);
    }

    pub fn pair_distance(&self, a: NodeId, b: NodeId) -> Option<Distance> {
        self.pairs.get(a, b)
    }

    /// Known leaders in `level` and both adjacent levels (the non-selective
    /// query set).
    pub fn level_neighborhood(&self, level: usize) -> Vec<(NodeId, Distance)> {
        let lo = level.saturating_sub(1);
        let hi = (level + 1).min(self.rings.max_level());
        let mut out = Vec::new();
        for lv in lo..=hi {
            for (&n, e) in &self.levels[lv] {
                out.push((n, e.dist));
            }
        }
        out
    }

    /// The level matrix M^i: indexed over leaders in levels i-1, i, i+1 with
    /// learned pairwise distances.
    pub fn matrix_for(&self, level: usize) -> DistanceMatrix {
        let index: Vec<NodeId> = self.level_neighborhood(level).into_iter().map(|(n, _)| n).collect();
        DistanceMatrix::new(level, index, |a, b| self.pairs.get(a, b))
    }
}

/// Bounded store of learned distances between pairs of other nodes, evicting
/// the oldest entries first.
#[derive(Debug, Clone)]
struct PairStore {
    map: BTreeMap<(NodeId, NodeId), (Distance, u64)>,
    cap: usize,
}

impl PairStore {
    fn new(cap: usize) -> Self {
        PairStore { map: BTreeMap::new(), cap }
    }

    fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        if a.0 <= b.0 {
            (a, b)
        } else {
            (b, a)
        }
    }

    fn record(&mut self, a: NodeId, b: NodeId, d: Distance, now_us: u64) {
        if a == b {
            return;
        }
        let key = Self::key(a, b);
        if self.map.len() >= self.cap && !self.map.contains_key(&key) {
            if let Some(&victim) = self.map.iter().min_by_key(|(k, (_, at))| (*at, k.0 .0, k.1 .0)).map(|(k, _)| k) {
                self.map.remove(&victim);
            }
        }
        self.map.insert(key, (d, now_us));
    }

    fn get(&self, a: NodeId, b: NodeId) -> Option<Distance> {
        self.map.get(&Self::key(a, b)).map(|&(d, _)| d)
    }
}

/// Query-set policy for a requested node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocatingMode {
    Selective,
    NonSelective,
}

/// Queried-node choice made by a requested node for a newcomer at measured
/// distance `d`: all neighborhood leaders in non-selective mode, Algorithm
/// "Selection" representatives in selective mode.
pub fn choose_queried<R: Rng>(
    sys: &LocatingSystem,
    d: Distance,
    mode: LocatingMode,
    rng: &mut R,
) -> Vec<NodeId> {
    let level = sys.rings().assign_level(d);
    match mode {
        LocatingMode::NonSelective => sys.level_neighborhood(level).into_iter().map(|(n, _)| n).collect(),
        LocatingMode::Selective => {
            let matrix = sys.matrix_for(level);
            let gamma = sys.rings().selection_threshold(d);
            matrix.select_representatives(gamma, rng)
        }
    }
}

/// Filter probe results down to candidates: queried nodes strictly closer to
/// the newcomer than the requested node, ascending by distance (ties by id).
pub fn candidates_from_probes(probes: &[(NodeId, Distance)], d_requested: Distance) -> Vec<(NodeId, Distance)> {
    let mut out: Vec<(NodeId, Distance)> = probes.iter().copied().filter(|&(_, d)| d < d_requested).collect();
    out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0 .0.cmp(&b.0 .0)));
    out
}

/// Terminal decision of a locating run.
#[derive(Debug, Clone, PartialEq)]
pub enum LocateDecision {
    /// Leaders within scope, ascending by distance; never empty.
    JoinClusters(Vec<(NodeId, Distance)>),
    CreateOwnCluster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatingOutcome {
    pub decision: LocateDecision,
    pub requested_count: usize,
    pub probes_sent: usize,
    pub elapsed_us: u64,
}

/// Next action the locating loop asks its driver to perform.
#[derive(Debug, Clone, PartialEq)]
pub enum LocateStep {
    /// Send a Localization_Request to this leader (known distance attached).
    Request(NodeId, Distance),
    Done(LocateDecision),
}

#[derive(Debug, Clone)]
struct CandidateInfo {
    dist: Distance,
    suggested_by: NodeId,
    requested: bool,
}

/// Newcomer-side locating loop: a pure state machine fed with the boot
/// measurement and candidate lists; the driver sends the actual messages.
#[derive(Debug, Clone)]
pub struct LocateRun {
    newcomer: NodeId,
    r_max: Distance,
    stop_c: usize,
    working: BTreeMap<NodeId, CandidateInfo>,
    requested_order: Vec<(NodeId, Distance)>,
    pub probes_sent: usize,
    started_us: u64,
}

impl LocateRun {
    pub fn new(newcomer: NodeId, r_max: Distance, stop_c: usize, started_us: u64) -> Self {
        LocateRun {
            newcomer,
            r_max,
            stop_c,
            working: BTreeMap::new(),
            requested_order: Vec::new(),
            probes_sent: 0,
            started_us,
        }
    }

    pub fn newcomer(&self) -> NodeId {
        self.newcomer
    }

    pub fn requested_count(&self) -> usize {
        self.requested_order.len()
    }

    /// Every (requested node, its suggester) pair, for the monotone-progress
    /// property: a requested node is strictly closer than its suggester.
    pub fn requested_trace(&self) -> &[(NodeId, Distance)] {
        &self.requested_order
    }

    /// Feed the measured boot distance. Within scope the process terminates
    /// immediately with zero requested nodes.
    pub fn on_boot(&mut self, boot: NodeId, d: Distance) -> LocateStep {
        if d <= self.r_max {
            return LocateStep::Done(LocateDecision::JoinClusters(vec![(boot, d)]));
        }
        self.working.insert(boot, CandidateInfo { dist: d, suggested_by: boot, requested: false });
        self.next_step()
    }

    /// Merge a candidate list returned by `from`. Aborts into a join as soon
    /// as any working-list candidate falls within scope.
    pub fn on_candidates(&mut self, from: NodeId, list: &[(NodeId, Distance)]) -> LocateStep {
        for &(node, d) in list {
            if node == self.newcomer {
                continue;
            }
            let entry = self.working.entry(node).or_insert(CandidateInfo {
                dist: d,
                suggested_by: from,
                requested: false,
            });
            if d < entry.dist {
                entry.dist = d;
            }
        }
        self.next_step()
    }

    /// A requested node failed (no longer a leader, timeout): fall through to
    /// the next closest candidate.
    pub fn on_request_failed(&mut self, _node: NodeId) -> LocateStep {
        self.next_step()
    }

    fn next_step(&mut self) -> LocateStep {
        let in_scope: Vec<(NodeId, Distance)> = {
            let mut v: Vec<(NodeId, Distance)> = self
                .working
                .iter()
                .filter(|(_, c)| c.dist <= self.r_max)
                .map(|(&n, c)| (n, c.dist))
                .collect();
            v.sort_by(|a, b| a.1.cmp(&b.1).then(a.0 .0.cmp(&b.0 .0)));
            v
        };
        if !in_scope.is_empty() {
            return LocateStep::Done(LocateDecision::JoinClusters(in_scope));
        }
        if self.requested_order.len() >= self.stop_c {
            return LocateStep::Done(LocateDecision::CreateOwnCluster);
        }
        let next = self
            .working
            .iter()
            .filter(|(_, c)| !c.requested)
            .map(|(&n, c)| (n, c.dist))
            .min_by(|a, b| a.1.cmp(&b.1).then(a.0 .0.cmp(&b.0 .0)));
        match next {
            Some((node, d)) => {
                self.working.get_mut(&node).unwrap().requested = true;
                self.requested_order.push((node, d));
                LocateStep::Request(node, d)
            }
            None => LocateStep::Done(LocateDecision::CreateOwnCluster),
        }
    }

    pub fn finish(&self, decision: LocateDecision, now_us: u64) -> LocatingOutcome {
        LocatingOutcome {
            decision,
            requested_count: self.requested_order.len(),
            probes_sent: self.probes_sent,
            elapsed_us: now_us.saturating_sub(self.started_us),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rings10() -> RingLevels {
        RingLevels::new(10.0, 9).unwrap()
    }

    #[test]
    fn level_zero_boundary() {
        assert_eq!(rings10().assign_level(Distance::ZERO), 0);
    }

    #[test]
    fn level_at_alpha() {
        // r_1 = 10 * e^0 = 10, r_2 = 10 * e ~ 27.18.
        assert_eq!(rings10().assign_level(Distance::ms(10.0)), 1);
        assert_eq!(rings10().assign_level(Distance::ms(27.0)), 1);
        assert_eq!(rings10().assign_level(Distance::ms(27.2)), 2);
    }

    #[test]
    fn level_just_below_alpha() {
        assert_eq!(rings10().assign_level(Distance::ms(9.99)), 0);
    }

    #[test]
    fn level_overflow_clamps() {
        let r = rings10();
        assert_eq!(r.assign_level(Distance::ms(1e9)), 9);
    }

    #[test]
    fn level_partition_property() {
        let r = RingLevels::new(4.0, 9).unwrap();
        let mut d = 0.0;
        while d < 20_000.0 {
            let dist = Distance::ms(d);
            let level = r.assign_level(dist);
            // Re-derive the interval from the level and check containment.
            assert!(d >= r.radius(level), "d={d} level={level}");
            if level < r.max_level() {
                assert!(d < r.radius(level + 1), "d={d} level={level}");
            }
            d += 3.37;
        }
    }

    #[test]
    fn threshold_zero_at_frontier() {
        let r = rings10();
        assert_eq!(r.selection_threshold(Distance::ms(10.0)), Distance::ZERO);
    }

    #[test]
    fn threshold_formula_values() {
        let r = rings10();
        // d = 15, level 1: |15-10| * 15 / (10e) ~ 2.7591.
        let g = r.selection_threshold(Distance::ms(15.0)).as_ms();
        assert!((g - (5.0 * 15.0 / (10.0 * std::f64::consts::E))).abs() < 1e-12);
        assert!((g - 2.759).abs() < 1e-3);
        // d = 26, level 1: |26-10| * 26 / (10e) ~ 15.30.
        let g = r.selection_threshold(Distance::ms(26.0)).as_ms();
        assert!((g - (16.0 * 26.0 / (10.0 * std::f64::consts::E))).abs() < 1e-12);
        assert!((g - 15.30).abs() < 0.01);
    }

    fn matrix_from(dists: &[(u32, u32, f64)], nodes: &[u32], level: usize) -> DistanceMatrix {
        let index: Vec<NodeId> = nodes.iter().map(|&n| NodeId(n)).collect();
        DistanceMatrix::new(level, index, |a, b| {
            dists
                .iter()
                .find(|&&(x, y, _)| (x == a.0 && y == b.0) || (x == b.0 && y == a.0))
                .map(|&(_, _, d)| Distance::ms(d))
        })
    }

    #[test]
    fn selection_single_node() {
        let m = matrix_from(&[], &[5], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.select_representatives(Distance::ms(10.0), &mut rng), vec![NodeId(5)]);
    }

    #[test]
    fn selection_mutually_close_collapses_to_first_pick() {
        // Three nodes all within gamma of each other: the first random pick
        // represents the rest.
        let m = matrix_from(&[(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)], &[0, 1, 2], 1);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps = m.select_representatives(Distance::ms(5.0), &mut rng);
            assert_eq!(reps.len(), 1);
        }
    }

    #[test]
    fn selection_all_unknown_returns_all() {
        // No pair has a known distance under gamma, so nobody is represented.
        let m = matrix_from(&[], &[3, 7, 11, 13], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reps = m.select_representatives(Distance::ms(100.0), &mut rng);
        reps.sort_by_key(|id| id.0);
        assert_eq!(reps, vec![NodeId(3), NodeId(7), NodeId(11), NodeId(13)]);
    }

    #[test]
    fn selection_zero_gamma_keeps_everyone() {
        let m = matrix_from(&[(0, 1, 0.5), (1, 2, 0.5), (0, 2, 0.5)], &[0, 1, 2], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(m.select_representatives(Distance::ZERO, &mut rng).len(), 3);
    }

    #[test]
    fn selection_soundness_small_instances() {
        // Every non-representative must sit within gamma of some
        // representative, checked by brute force over random full matrices.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..10_000u32 {
            let n = 1 + (case % 6) as usize;
            let nodes: Vec<u32> = (0..n as u32).collect();
            let mut dists = Vec::new();
            for j in 0..n as u32 {
                for k in (j + 1)..n as u32 {
                    dists.push((j, k, rng.gen_range(0.0..50.0)));
                }
            }
            let m = matrix_from(&dists, &nodes, 1);
            let gamma = Distance::ms(rng.gen_range(0.0..30.0));
            let reps = m.select_representatives(gamma, &mut rng);
            assert!(!reps.is_empty());
            assert!(reps.len() <= n);
            for j in 0..n {
                let id = NodeId(j as u32);
                if reps.contains(&id) {
                    continue;
                }
                let covered = reps.iter().any(|r| {
                    let rj = m.nodes().iter().position(|&x| x == *r).unwrap();
                    m.get(rj, j) < gamma
                });
                assert!(covered, "node {id} not covered (case {case})");
            }
        }
    }

    #[test]
    fn candidates_filter_and_sort() {
        let probes = vec![
            (NodeId(1), Distance::ms(30.0)),
            (NodeId(2), Distance::ms(5.0)),
            (NodeId(3), Distance::ms(41.0)),
            (NodeId(4), Distance::ms(12.0)),
        ];
        let got = candidates_from_probes(&probes, Distance::ms(25.0));
        assert_eq!(got, vec![(NodeId(2), Distance::ms(5.0)), (NodeId(4), Distance::ms(12.0))]);
    }

    #[test]
    fn candidates_none_when_all_farther() {
        let probes = vec![(NodeId(1), Distance::ms(30.0))];
        assert!(candidates_from_probes(&probes, Distance::ms(25.0)).is_empty());
    }

    #[test]
    fn locate_boot_in_scope_short_circuits() {
        let mut run = LocateRun::new(NodeId(100), Distance::ms(50.0), 16, 0);
        let step = run.on_boot(NodeId(1), Distance::ms(40.0));
        assert_eq!(
            step,
            LocateStep::Done(LocateDecision::JoinClusters(vec![(NodeId(1), Distance::ms(40.0))]))
        );
        assert_eq!(run.requested_count(), 0);
    }

    #[test]
    fn locate_exhausts_to_create() {
        let mut run = LocateRun::new(NodeId(100), Distance::ms(10.0), 16, 0);
        let mut step = run.on_boot(NodeId(1), Distance::ms(80.0));
        assert_eq!(step, LocateStep::Request(NodeId(1), Distance::ms(80.0)));
        step = run.on_candidates(NodeId(1), &[]);
        assert_eq!(step, LocateStep::Done(LocateDecision::CreateOwnCluster));
        assert_eq!(run.requested_count(), 1);
    }

    #[test]
    fn locate_iterates_toward_scope() {
        let mut run = LocateRun::new(NodeId(100), Distance::ms(10.0), 16, 0);
        let mut step = run.on_boot(NodeId(1), Distance::ms(80.0));
        assert_eq!(step, LocateStep::Request(NodeId(1), Distance::ms(80.0)));
        step = run.on_candidates(NodeId(1), &[(NodeId(2), Distance::ms(40.0)), (NodeId(3), Distance::ms(60.0))]);
        assert_eq!(step, LocateStep::Request(NodeId(2), Distance::ms(40.0)));
        step = run.on_candidates(NodeId(2), &[(NodeId(4), Distance::ms(8.0))]);
        assert_eq!(
            step,
            LocateStep::Done(LocateDecision::JoinClusters(vec![(NodeId(4), Distance::ms(8.0))]))
        );
        assert_eq!(run.requested_count(), 2);
    }

    #[test]
    fn locate_joins_all_in_scope() {
        let mut run = LocateRun::new(NodeId(100), Distance::ms(10.0), 16, 0);
        run.on_boot(NodeId(1), Distance::ms(80.0));
        let step = run.on_candidates(
            NodeId(1),
            &[
                (NodeId(2), Distance::ms(9.0)),
                (NodeId(3), Distance::ms(4.0)),
                (NodeId(4), Distance::ms(30.0)),
            ],
        );
        assert_eq!(
            step,
            LocateStep::Done(LocateDecision::JoinClusters(vec![
                (NodeId(3), Distance::ms(4.0)),
                (NodeId(2), Distance::ms(9.0)),
            ]))
        );
    }

    #[test]
    fn locate_respects_stop_criterion() {
        let c = 5;
        let mut run = LocateRun::new(NodeId(100), Distance::ms(1.0), c, 0);
        let mut step = run.on_boot(NodeId(1), Distance::ms(1000.0));
        let mut next_id = 2u32;
        let mut iterations = 0;
        while let LocateStep::Request(node, d) = step {
            iterations += 1;
            assert!(iterations <= c);
            // Always hand back one strictly closer candidate, never in scope.
            let cand = (NodeId(next_id), Distance::ms(d.as_ms() - 10.0));
            next_id += 1;
            step = run.on_candidates(node, &[cand]);
        }
        assert_eq!(step, LocateStep::Done(LocateDecision::CreateOwnCluster));
        assert_eq!(run.requested_count(), c);
    }

    #[test]
    fn locate_requested_monotone_vs_suggester() {
        // Progress property: each requested node is strictly closer than the
        // requested node that suggested it.
        let mut run = LocateRun::new(NodeId(100), Distance::ms(1.0), 16, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut step = run.on_boot(NodeId(1), Distance::ms(500.0));
        let mut next_id = 10u32;
        let mut suggestions: BTreeMap<NodeId, (NodeId, Distance)> = BTreeMap::new();
        while let LocateStep::Request(node, d) = step {
            if let Some(&(sugg, sugg_d)) = suggestions.get(&node).as_deref() {
                let _ = sugg;
                assert!(d < sugg_d, "requested node not closer than its suggester");
            }
            let mut list = Vec::new();
            for _ in 0..rng.gen_range(0..3) {
                let cd = Distance::ms(rng.gen_range(2.0..d.as_ms() * 0.95));
                let id = NodeId(next_id);
                next_id += 1;
                suggestions.insert(id, (node, d));
                list.push((id, cd));
            }
            step = run.on_candidates(node, &list);
        }
    }

    #[test]
    fn locating_system_levels_and_bounds() {
        let rings = RingLevels::new(4.0, 9).unwrap();
        let mut sys = LocatingSystem::new(NodeId(0), rings, 2, 64);
        assert!(sys.insert_leader(NodeId(1), Distance::ms(3.0), 0, 1_000_000));
        assert!(sys.insert_leader(NodeId(2), Distance::ms(3.5), 100, 1_000_000));
        // Level 0 is full; both entries are fresh, so insertion fails.
        assert!(!sys.insert_leader(NodeId(3), Distance::ms(2.0), 200, 1_000_000));
        // Far in the future the stalest entry may be evicted.
        assert!(sys.insert_leader(NodeId(3), Distance::ms(2.0), 10_000_000, 1_000_000));
        assert!(!sys.contains(NodeId(1)));
        assert!(sys.contains(NodeId(2)));
        // Refreshing an existing entry always succeeds and can move levels.
        assert!(sys.insert_leader(NodeId(2), Distance::ms(100.0), 10_000_100, 1_000_000));
        assert_eq!(sys.rings().assign_level(Distance::ms(100.0)), sys_level(&sys, NodeId(2)));
    }

    fn sys_level(sys: &LocatingSystem, node: NodeId) -> usize {
        let d = sys.distance_to(node).unwrap();
        sys.rings().assign_level(d)
    }

    #[test]
    fn matrix_uses_adjacent_levels_and_pairs() {
        let rings = RingLevels::new(10.0, 9).unwrap();
        let mut sys = LocatingSystem::new(NodeId(0), rings, 8, 64);
        sys.insert_leader(NodeId(1), Distance::ms(5.0), 0, 0); // level 0
        sys.insert_leader(NodeId(2), Distance::ms(15.0), 0, 0); // level 1
        sys.insert_leader(NodeId(3), Distance::ms(30.0), 0, 0); // level 2
        sys.insert_leader(NodeId(4), Distance::ms(100.0), 0, 0); // level 3
        sys.record_pair(NodeId(1), NodeId(2), Distance::ms(12.0), 0);
        let m = sys.matrix_for(1);
        assert_eq!(m.nodes(), &[NodeId(1), NodeId(2), NodeId(3)]);
        let j = 0; // node 1
        let k = 1; // node 2
        assert_eq!(m.get(j, k), Distance::ms(12.0));
        assert!(m.get(0, 2).is_unknown());
    }

    #[test]
    fn choose_queried_modes() {
        let rings = RingLevels::new(10.0, 9).unwrap();
        let mut sys = LocatingSystem::new(NodeId(0), rings, 8, 64);
        sys.insert_leader(NodeId(1), Distance::ms(12.0), 0, 0);
        sys.insert_leader(NodeId(2), Distance::ms(14.0), 0, 0);
        sys.insert_leader(NodeId(3), Distance::ms(16.0), 0, 0);
        // All three are mutual neighbors well under gamma for d = 20.
        sys.record_pair(NodeId(1), NodeId(2), Distance::ms(0.5), 0);
        sys.record_pair(NodeId(1), NodeId(3), Distance::ms(0.5), 0);
        sys.record_pair(NodeId(2), NodeId(3), Distance::ms(0.5), 0);
        let d = Distance::ms(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let non_sel = choose_queried(&sys, d, LocatingMode::NonSelective, &mut rng);
        assert_eq!(non_sel.len(), 3);
        let sel = choose_queried(&sys, d, LocatingMode::Selective, &mut rng);
        assert_eq!(sel.len(), 1);
    }
}
