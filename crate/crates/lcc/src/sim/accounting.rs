//! Message, adjustment and join-phase accounting for the metrics pipeline,
//! plus the optional line-oriented event log.

use std::collections::BTreeMap;

use crate::types::NodeId;

/// One accounted transmission: `time target msg_type bytes`.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub at_us: u64,
    pub target: NodeId,
    pub tag: &'static str,
    pub bytes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustReason {
    Bootstrap,
    Refine,
    Repair,
    Reclaim,
}

#[derive(Debug, Clone, Copy)]
pub struct Adjustment {
    pub at_us: u64,
    pub node: NodeId,
    pub added: bool,
    pub reason: AdjustReason,
}

/// Per-newcomer locating-phase accounting, from the instant it contacts the
/// rendezvous point until its joining decision.
#[derive(Debug, Clone, Default)]
pub struct JoinPhase {
    pub total_bytes: u64,
    pub probe_bytes: u64,
    pub probe_msgs: u32,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinOutcome {
    Joined { leaders: Vec<NodeId> },
    CreatedCluster,
    Failed,
}

/// One completed locating run, with the nearest-leader oracle attached by
/// the engine at decision time.
#[derive(Debug, Clone)]
pub struct JoinRecord {
    pub node: NodeId,
    pub started_us: u64,
    pub decided_us: u64,
    pub outcome: JoinOutcome,
    pub requested_count: usize,
    pub probes_sent: usize,
    pub locate_bytes: u64,
    pub probe_bytes: u64,
    /// Closest live leader at decision time, when any existed.
    pub nearest_leader: Option<NodeId>,
    pub nearest_in_scope: bool,
    pub joined_nearest: bool,
}

/// Raised by a node handler when its locating run decides; the engine
/// resolves the nearest-leader oracle immediately after the event.
#[derive(Debug, Clone)]
pub struct PendingJoinDecision {
    pub node: NodeId,
    pub started_us: u64,
    pub decided_us: u64,
    pub outcome: JoinOutcome,
    pub requested_count: usize,
    pub probes_sent: usize,
}

#[derive(Debug, Default)]
pub struct Accounting {
    pub log: Option<Vec<LogRecord>>,
    pub total_bytes: u64,
    pub window_bytes: u64,
    pub sends: u64,
    pub bytes_by_tag: BTreeMap<&'static str, u64>,
    pub join_phase: BTreeMap<NodeId, JoinPhase>,
    pub join_records: Vec<JoinRecord>,
    pub pending_decisions: Vec<PendingJoinDecision>,
    pub adjustments: Vec<Adjustment>,
}

impl Accounting {
    pub fn new(keep_log: bool) -> Self {
        Accounting { log: if keep_log { Some(Vec::new()) } else { None }, ..Default::default() }
    }

    pub fn on_send(
        &mut self,
        at_us: u64,
        target: NodeId,
        tag: &'static str,
        bytes: u32,
        join_ctx: Option<NodeId>,
        probe: bool,
    ) {
        self.total_bytes += bytes as u64;
        self.window_bytes += bytes as u64;
        self.sends += 1;
        *self.bytes_by_tag.entry(tag).or_insert(0) += bytes as u64;
        if let Some(ctx) = join_ctx {
            if let Some(phase) = self.join_phase.get_mut(&ctx) {
                if phase.active {
                    phase.total_bytes += bytes as u64;
                    if probe {
                        phase.probe_bytes += bytes as u64;
                        if tag == "probe_req" {
                            phase.probe_msgs += 1;
                        }
                    }
                }
            }
        }
        if let Some(log) = &mut self.log {
            log.push(LogRecord { at_us, target, tag, bytes });
        }
    }

    pub fn begin_join_phase(&mut self, node: NodeId) {
        let phase = self.join_phase.entry(node).or_default();
        phase.active = true;
    }

    pub fn end_join_phase(&mut self, node: NodeId) -> (u64, u64) {
        match self.join_phase.get_mut(&node) {
            Some(phase) => {
                phase.active = false;
                (phase.total_bytes, phase.probe_bytes)
            }
            None => (0, 0),
        }
    }

    pub fn take_window_bytes(&mut self) -> u64 {
        std::mem::take(&mut self.window_bytes)
    }

    pub fn event_log_text(&self) -> Option<String> {
        let log = self.log.as_ref()?;
        // Ping replies are logged at their (future) send instant; order the
        // file by time, stable over insertion order.
        let mut order: Vec<usize> = (0..log.len()).collect();
        order.sort_by_key(|&i| log[i].at_us);
        let mut out = String::with_capacity(log.len() * 32);
        for i in order {
            let r = &log[i];
            out.push_str(&format!(
                "{:.3} {} {} {}\n",
                r.at_us as f64 / 1000.0,
                r.target.0,
                r.tag,
                r.bytes
            ));
        }
        Some(out)
    }
}
