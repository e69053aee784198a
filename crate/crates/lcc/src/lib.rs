//! LCC: a topology-aware clustered overlay multicast scheme.
//!
//! Newcomers run a ring-based locating process to find nearby cluster
//! leaders before joining; clusters elect leaders by priority vectors and
//! recover from migrations and failures; a degree-bounded mesh with
//! path-vector routing carries the delivery tree at the top level and inside
//! each cluster. A deterministic discrete-event simulator drives the
//! protocol over synthetic delay spaces and feeds the metrics pipeline.

pub mod clustering;
pub mod config;
pub mod locating;
pub mod meshtree;
pub mod metrics;
pub mod sim;
pub mod topology;
pub mod types;

pub use config::ScenarioConfig;
pub use sim::{RunOutput, Simulator};
pub use types::{ClusterId, Distance, NodeId};
