//! Protocol wire records and their byte accounting: every message carries a
//! 40-byte header plus 8 bytes per node or (node, value) entry; keep-alives
//! carry a 20-byte priority vector.

use crate::clustering::PriorityVector;
use crate::meshtree::MeshScope;
use crate::types::{ClusterId, NodeId};

pub const HEADER_BYTES: u32 = 40;
pub const ENTRY_BYTES: u32 = 8;
pub const PV_BYTES: u32 = 20;
/// A measurement probe costs one RTT and a header each way.
pub const PING_BYTES_EACH_WAY: u32 = HEADER_BYTES;

/// Gossip view entry as carried on the wire: node id plus leader flag and
/// home cluster, packed into one 8-byte entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GossipEntryWire {
    pub node: NodeId,
    pub is_leader: bool,
    pub cluster: Option<ClusterId>,
}

/// Leader-published cache digest entry: successor ranking with flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigestEntry {
    pub node: NodeId,
    pub priority: f64,
    pub migrated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    // Rendezvous point (nodes never answer these; the engine plays the RP).
    RvRegister,
    RvUnregister,
    RvBootRequest { attempt: u32 },
    RvBootReply { boots: Vec<NodeId> },
    RvComplaint { dead: NodeId },

    // Locating.
    LocalizationRequest { newcomer: NodeId, d_to_requested: f64 },
    ProbeRequest { newcomer: NodeId, token: u64 },
    ProbeReply { newcomer: NodeId, token: u64, distance_ms: f64 },
    CandidateList { newcomer: NodeId, entries: Vec<(NodeId, f64)>, ok: bool },

    // Clustering.
    JoinRequest { fanout: u32, other_leaders: Vec<NodeId> },
    JoinNotification { cluster: ClusterId, boot: Option<NodeId>, saturated: bool },
    JoinAck { clusters: Vec<ClusterId> },
    LeaveCluster { cluster: ClusterId },
    KeepAlive { cluster: Option<ClusterId>, pv: PriorityVector, is_leader: bool, digest: Vec<DigestEntry> },
    NewCluster { cluster: ClusterId, leader: NodeId },
    EdgeReclaim { cluster: ClusterId },
    EdgeReclaimAck { cluster: ClusterId, ok: bool },
    EdgeGrant { cluster: ClusterId },
    RecoveringRequest { new_cluster: ClusterId, in_scope: Vec<NodeId> },
    RecoveringAck { new_cluster: ClusterId, positive: bool },
    ClusterSplit { old_cluster: ClusterId, moved: Vec<NodeId> },
    GossipExchange { token: u64, entries: Vec<GossipEntryWire>, reply_wanted: bool },

    // Mesh and routing.
    LinkRequest { scope: MeshScope, backbone: bool, cost_ms: f64, token: u64 },
    LinkAccept { scope: MeshScope, backbone: bool, cost_ms: f64, token: u64 },
    LinkReject { token: u64 },
    LinkDrop,
    RouteAdvert { dist_ms: f64, path: Vec<NodeId> },
    RefineQuery { token: u64 },
    RefineInfo { token: u64, dist_ms: Option<f64>, path: Vec<NodeId> },

    // Grandparent recovery baseline.
    AttachRequest,
    AttachReply { accept: bool, redirect: Vec<NodeId> },
}

impl Message {
    pub fn wire_bytes(&self) -> u32 {
        let payload = match self {
            Message::RvRegister | Message::RvUnregister | Message::RvBootRequest { .. } => 0,
            Message::RvBootReply { boots } => ENTRY_BYTES * boots.len() as u32,
            Message::RvComplaint { .. } => ENTRY_BYTES,
            Message::LocalizationRequest { .. } => ENTRY_BYTES,
            Message::ProbeRequest { .. } => ENTRY_BYTES,
            Message::ProbeReply { .. } => ENTRY_BYTES,
            Message::CandidateList { entries, .. } => ENTRY_BYTES * entries.len() as u32,
            Message::JoinRequest { other_leaders, .. } => ENTRY_BYTES * (1 + other_leaders.len() as u32),
            Message::JoinNotification { .. } => ENTRY_BYTES,
            Message::JoinAck { clusters } => ENTRY_BYTES * clusters.len() as u32,
            Message::LeaveCluster { .. } => ENTRY_BYTES,
            Message::KeepAlive { digest, .. } => PV_BYTES + ENTRY_BYTES * digest.len() as u32,
            Message::NewCluster { .. } => ENTRY_BYTES,
            Message::EdgeReclaim { .. } | Message::EdgeReclaimAck { .. } | Message::EdgeGrant { .. } => ENTRY_BYTES,
            Message::RecoveringRequest { in_scope, .. } => ENTRY_BYTES * (1 + in_scope.len() as u32),
            Message::RecoveringAck { .. } => ENTRY_BYTES,
            Message::ClusterSplit { moved, .. } => ENTRY_BYTES * (1 + moved.len() as u32),
            Message::GossipExchange { entries, .. } => ENTRY_BYTES * entries.len() as u32,
            Message::LinkRequest { .. } | Message::LinkAccept { .. } | Message::LinkReject { .. } | Message::LinkDrop => 0,
            Message::RouteAdvert { path, .. } => ENTRY_BYTES * path.len() as u32,
            Message::RefineQuery { .. } => 0,
            Message::RefineInfo { path, .. } => ENTRY_BYTES * path.len() as u32,
            Message::AttachRequest => 0,
            Message::AttachReply { redirect, .. } => ENTRY_BYTES * redirect.len() as u32,
        };
        HEADER_BYTES + payload
    }

    /// Short tag for the event log.
    pub fn tag(&self) -> &'static str {
        match self {
            Message::RvRegister => "rv_register",
            Message::RvUnregister => "rv_unregister",
            Message::RvBootRequest { .. } => "rv_boot_req",
            Message::RvBootReply { .. } => "rv_boot_reply",
            Message::RvComplaint { .. } => "rv_complaint",
            Message::LocalizationRequest { .. } => "localization_req",
            Message::ProbeRequest { .. } => "probe_req",
            Message::ProbeReply { .. } => "probe_reply",
            Message::CandidateList { .. } => "candidate_list",
            Message::JoinRequest { .. } => "join_req",
            Message::JoinNotification { .. } => "join_notification",
            Message::JoinAck { .. } => "join_ack",
            Message::LeaveCluster { .. } => "leave_cluster",
            Message::KeepAlive { .. } => "keep_alive",
            Message::NewCluster { .. } => "new_cluster",
            Message::EdgeReclaim { .. } => "edge_reclaim",
            Message::EdgeReclaimAck { .. } => "edge_reclaim_ack",
            Message::EdgeGrant { .. } => "edge_grant",
            Message::RecoveringRequest { .. } => "recovering_req",
            Message::RecoveringAck { .. } => "recovering_ack",
            Message::ClusterSplit { .. } => "cluster_split",
            Message::GossipExchange { .. } => "gossip",
            Message::LinkRequest { .. } => "link_req",
            Message::LinkAccept { .. } => "link_accept",
            Message::LinkReject { .. } => "link_reject",
            Message::LinkDrop => "link_drop",
            Message::RouteAdvert { .. } => "route_advert",
            Message::RefineQuery { .. } => "refine_query",
            Message::RefineInfo { .. } => "refine_info",
            Message::AttachRequest => "attach_req",
            Message::AttachReply { .. } => "attach_reply",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_entry_accounting() {
        assert_eq!(Message::RvRegister.wire_bytes(), 40);
        assert_eq!(
            Message::CandidateList { newcomer: NodeId(1), entries: vec![(NodeId(2), 5.0); 3], ok: true }
                .wire_bytes(),
            40 + 24
        );
        let ka = Message::KeepAlive {
            cluster: None,
            pv: PriorityVector {
                fanout_max: 1,
                inv_delivery_latency: 0.0,
                lifetime_s: 0.0,
                inv_leader_distance: 0.0,
                migrated: false,
            },
            is_leader: false,
            digest: vec![],
        };
        assert_eq!(ka.wire_bytes(), 60);
        assert_eq!(
            Message::RouteAdvert { dist_ms: 1.0, path: vec![NodeId(1), NodeId(2)] }.wire_bytes(),
            56
        );
    }
}
