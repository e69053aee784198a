//! Scenario configuration: a flat key-value text format with strict key
//! checking, plus the programmatic run configuration it produces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::clustering::PvWeights;
use crate::locating::LocatingMode;
use crate::topology::TopologyModel;
use crate::types::FanoutDistribution;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Lcc,
    Flat,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Lcc => write!(f, "lcc"),
            Protocol::Flat => write!(f, "flat"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryScheme {
    Lcc,
    Grandparent,
}

/// Which nodes a failure script entry crashes.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureSelector {
    RandomFraction(f64),
    LeadersFraction(f64),
    Nodes(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureEntry {
    pub at_s: f64,
    pub selector: FailureSelector,
    pub rejoin_at_s: Option<f64>,
}

/// Full run configuration. Defaults follow the protocol's documented knobs;
/// every field maps to a config-file key.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub protocol: Protocol,
    pub n: usize,
    pub topology_model: TopologyModel,
    pub seed: u64,
    pub r_max_ms: f64,
    pub alpha_ms: f64,
    pub max_level: usize,
    pub k_per_level: usize,
    pub stop_c: usize,
    pub rt_s: f64,
    pub refine_epsilon_ms: f64,
    pub locating_mode: LocatingMode,
    pub duration_s: f64,
    pub join_window_s: f64,
    pub churn_join_rate: f64,
    pub churn_lifetime_param: f64,
    pub failures: Vec<FailureEntry>,
    pub snapshot_period_s: f64,
    pub keepalive_period_s: f64,
    pub keepalive_miss_limit: u32,
    pub gossip_period_s: f64,
    pub gossip_fanout: usize,
    pub gossip_view_bound: usize,
    pub pv_weights: PvWeights,
    pub pv_stability_threshold_s: f64,
    pub fanout_dist: FanoutDistribution,
    pub edge_max_memberships: usize,
    pub edge_toplevel_per_pair: usize,
    pub recovery_scheme: RecoveryScheme,
    pub recovery_settle_s: f64,
    pub source: u32,
    pub invariants_check: bool,
    pub event_log: bool,
    pub flat_bootstrap_links: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            protocol: Protocol::Lcc,
            n: 100,
            topology_model: TopologyModel::Euclidean2D,
            seed: 1,
            r_max_ms: 50.0,
            alpha_ms: 4.0,
            max_level: 9,
            k_per_level: 8,
            stop_c: 16,
            rt_s: 30.0,
            refine_epsilon_ms: 5.0,
            locating_mode: LocatingMode::Selective,
            duration_s: 600.0,
            join_window_s: 100.0,
            churn_join_rate: 0.0,
            churn_lifetime_param: 0.0,
            failures: Vec::new(),
            snapshot_period_s: 10.0,
            keepalive_period_s: 5.0,
            keepalive_miss_limit: 3,
            gossip_period_s: 10.0,
            gossip_fanout: 8,
            gossip_view_bound: 64,
            pv_weights: PvWeights::default(),
            pv_stability_threshold_s: 60.0,
            fanout_dist: FanoutDistribution::default(),
            edge_max_memberships: 3,
            edge_toplevel_per_pair: 1,
            recovery_scheme: RecoveryScheme::Lcc,
            recovery_settle_s: 10.0,
            source: 0,
            invariants_check: true,
            event_log: true,
            flat_bootstrap_links: 3,
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ScenarioConfig::default();
        let mut seen_n = false;
        let mut failures: BTreeMap<usize, (Option<f64>, Option<FailureSelector>, Option<f64>)> = BTreeMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or(ConfigError::Syntax(lineno + 1))?;
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax(lineno + 1));
            }

            if let Some(rest) = key.strip_prefix("failures[") {
                let (idx, field) = rest
                    .split_once("].")
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                let idx: usize = idx
                    .parse()
                    .map_err(|_| ConfigError::UnknownKey(key.to_string()))?;
                let slot = failures.entry(idx).or_default();
                match field {
                    "at_s" => slot.0 = Some(parse_num(key, value)?),
                    "selector" => slot.1 = Some(parse_selector(key, value)?),
                    "rejoin_at_s" => slot.2 = Some(parse_num(key, value)?),
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                continue;
            }

            match key {
                "protocol" => {
                    cfg.protocol = match value {
                        "lcc" => Protocol::Lcc,
                        "flat" => Protocol::Flat,
                        _ => return Err(bad(key, "expected lcc|flat")),
                    }
                }
                "n" => {
                    cfg.n = parse_num(key, value)?;
                    seen_n = true;
                }
                "topology.model" => {
                    cfg.topology_model = match value {
                        "euclidean2d" => TopologyModel::Euclidean2D,
                        "transit_stub" => TopologyModel::TransitStub,
                        _ => return Err(bad(key, "expected euclidean2d|transit_stub")),
                    }
                }
                "seed" => cfg.seed = parse_num(key, value)?,
                "r_max_ms" => cfg.r_max_ms = parse_num(key, value)?,
                "alpha_ms" => cfg.alpha_ms = parse_num(key, value)?,
                "max_level" => cfg.max_level = parse_num(key, value)?,
                "k_per_level" => cfg.k_per_level = parse_num(key, value)?,
                "stop_c" => cfg.stop_c = parse_num(key, value)?,
                "rt_s" => cfg.rt_s = parse_num(key, value)?,
                "refine.epsilon_ms" => cfg.refine_epsilon_ms = parse_num(key, value)?,
                "locating.mode" => {
                    cfg.locating_mode = match value {
                        "selective" => LocatingMode::Selective,
                        "non_selective" => LocatingMode::NonSelective,
                        _ => return Err(bad(key, "expected selective|non_selective")),
                    }
                }
                "duration_s" => cfg.duration_s = parse_num(key, value)?,
                "join.window_s" => cfg.join_window_s = parse_num(key, value)?,
                "churn.join_rate" => cfg.churn_join_rate = parse_num(key, value)?,
                "churn.lifetime_param" => cfg.churn_lifetime_param = parse_num(key, value)?,
                "metrics.snapshot_period_s" => cfg.snapshot_period_s = parse_num(key, value)?,
                "keepalive.period_s" => cfg.keepalive_period_s = parse_num(key, value)?,
                "keepalive.miss_limit" => cfg.keepalive_miss_limit = parse_num(key, value)?,
                "gossip.period_s" => cfg.gossip_period_s = parse_num(key, value)?,
                "gossip.fanout" => cfg.gossip_fanout = parse_num(key, value)?,
                "gossip.view_bound" => cfg.gossip_view_bound = parse_num(key, value)?,
                "pv.weights" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(key, "expected four comma-separated numbers"))?;
                    if parts.len() != 4 {
                        return Err(bad(key, "expected four weights"));
                    }
                    cfg.pv_weights = PvWeights::new([parts[0], parts[1], parts[2], parts[3]])
                        .map_err(|e| bad(key, &e.to_string()))?;
                }
                "pv.stability_threshold_s" => cfg.pv_stability_threshold_s = parse_num(key, value)?,
                "fanout.dist" => {
                    let mut entries = Vec::new();
                    for part in value.split(',') {
                        let (f, w) = part
                            .split_once(':')
                            .ok_or_else(|| bad(key, "expected fanout:weight pairs"))?;
                        let f: u32 = f.trim().parse().map_err(|_| bad(key, "bad fanout"))?;
                        let w: f64 = w.trim().parse().map_err(|_| bad(key, "bad weight"))?;
                        entries.push((f, w));
                    }
                    cfg.fanout_dist =
                        FanoutDistribution::new(entries).map_err(|e| bad(key, &e.to_string()))?;
                }
                "edge.max_memberships" => cfg.edge_max_memberships = parse_num(key, value)?,
                "edge.toplevel_per_pair" => cfg.edge_toplevel_per_pair = parse_num(key, value)?,
                "recovery.scheme" => {
                    cfg.recovery_scheme = match value {
                        "lcc" => RecoveryScheme::Lcc,
                        "grandparent" => RecoveryScheme::Grandparent,
                        _ => return Err(bad(key, "expected lcc|grandparent")),
                    }
                }
                "recovery.settle_s" => cfg.recovery_settle_s = parse_num(key, value)?,
                "source" => cfg.source = parse_num(key, value)?,
                "invariants.check" => cfg.invariants_check = parse_bool(key, value)?,
                "event_log" => cfg.event_log = parse_bool(key, value)?,
                "flat.bootstrap_links" => cfg.flat_bootstrap_links = parse_num(key, value)?,
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
        }

        if !seen_n {
            return Err(ConfigError::Missing("n".to_string()));
        }
        for (idx, (at, sel, rejoin)) in failures {
            let at_s = at.ok_or_else(|| ConfigError::Missing(format!("failures[{idx}].at_s")))?;
            let selector =
                sel.ok_or_else(|| ConfigError::Missing(format!("failures[{idx}].selector")))?;
            cfg.failures.push(FailureEntry { at_s, selector, rejoin_at_s: rejoin });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Invalid("n must be at least 1".into()));
        }
        if !(self.alpha_ms > 0.0) {
            return Err(ConfigError::Invalid("alpha_ms must be positive".into()));
        }
        if self.max_level < 1 {
            return Err(ConfigError::Invalid("max_level must be at least 1".into()));
        }
        if self.r_max_ms < 0.0 {
            return Err(ConfigError::Invalid("r_max_ms must be non-negative".into()));
        }
        if self.duration_s < 0.0 {
            return Err(ConfigError::Invalid("duration_s must be non-negative".into()));
        }
        if !(self.snapshot_period_s > 0.0) {
            return Err(ConfigError::Invalid("metrics.snapshot_period_s must be positive".into()));
        }
        if !(self.keepalive_period_s > 0.0) || self.keepalive_miss_limit == 0 {
            return Err(ConfigError::Invalid("keepalive settings must be positive".into()));
        }
        if self.stop_c == 0 {
            return Err(ConfigError::Invalid("stop_c must be at least 1".into()));
        }
        if self.churn_join_rate < 0.0 || self.churn_lifetime_param < 0.0 {
            return Err(ConfigError::Invalid("churn parameters must be non-negative".into()));
        }
        if self.churn_join_rate > 0.0 && !(self.churn_lifetime_param > 0.0) {
            return Err(ConfigError::Invalid(
                "churn.lifetime_param must be positive when churn.join_rate is set".into(),
            ));
        }
        if self.source as usize >= self.n {
            return Err(ConfigError::Invalid("source must be one of the initial n nodes".into()));
        }
        for (i, f) in self.failures.iter().enumerate() {
            if f.at_s < 0.0 || f.at_s > self.duration_s {
                return Err(ConfigError::Invalid(format!(
                    "failures[{i}].at_s outside the run horizon"
                )));
            }
            if let Some(r) = f.rejoin_at_s {
                if r <= f.at_s {
                    return Err(ConfigError::Invalid(format!(
                        "failures[{i}].rejoin_at_s must be after at_s"
                    )));
                }
            }
            match f.selector {
                FailureSelector::RandomFraction(p) | FailureSelector::LeadersFraction(p) => {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(ConfigError::Invalid(format!(
                            "failures[{i}] fraction must be within [0, 1]"
                        )));
                    }
                }
                FailureSelector::Nodes(_) => {}
            }
        }
        Ok(())
    }
}

fn bad(key: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), reason: reason.to_string() }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, "not a valid number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(key, "expected true|false")),
    }
}

fn parse_selector(key: &str, value: &str) -> Result<FailureSelector, ConfigError> {
    let inner = |prefix: &str| -> Option<&str> {
        value
            .strip_prefix(prefix)?
            .strip_prefix('(')
            .and_then(|v| v.strip_suffix(')'))
    };
    if let Some(v) = inner("random_fraction") {
        let p: f64 = v.trim().parse().map_err(|_| bad(key, "bad fraction"))?;
        return Ok(FailureSelector::RandomFraction(p));
    }
    if let Some(v) = inner("leaders_fraction") {
        let p: f64 = v.trim().parse().map_err(|_| bad(key, "bad fraction"))?;
        return Ok(FailureSelector::LeadersFraction(p));
    }
    if let Some(v) = inner("nodes") {
        let ids: Vec<u32> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(key, "bad node list"))?;
        return Ok(FailureSelector::Nodes(ids));
    }
    Err(bad(key, "expected random_fraction(p)|leaders_fraction(p)|nodes(a,b,...)"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = r#"
# scenario
protocol = lcc
n = 500
topology.model = transit_stub
seed = 11
r_max_ms = 50
alpha_ms = 4
stop_c = 16
rt_s = 30
duration_s = 900
join.window_s = 100
churn.join_rate = 0
metrics.snapshot_period_s = 10
failures[0].at_s = 600
failures[0].selector = leaders_fraction(0.3)
failures[0].rejoin_at_s = 700
locating.mode = non_selective
pv.weights = 0.5, 0.25, 0.15, 0.1
fanout.dist = 1:0.2, 2:0.4, 4:0.3, 8:0.1
"#;
        let cfg = ScenarioConfig::parse(text).unwrap();
        assert_eq!(cfg.protocol, Protocol::Lcc);
        assert_eq!(cfg.n, 500);
        assert_eq!(cfg.topology_model, TopologyModel::TransitStub);
        assert_eq!(cfg.failures.len(), 1);
        assert_eq!(cfg.failures[0].selector, FailureSelector::LeadersFraction(0.3));
        assert_eq!(cfg.failures[0].rejoin_at_s, Some(700.0));
        assert_eq!(cfg.locating_mode, LocatingMode::NonSelective);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = ScenarioConfig::parse("n = 10\nr_max = 50\n").unwrap_err();
        match err {
            ConfigError::UnknownKey(k) => assert_eq!(k, "r_max"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn requires_n() {
        assert!(matches!(ScenarioConfig::parse("seed = 4\n"), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn rejects_failure_outside_horizon() {
        let text = "n = 10\nduration_s = 100\nfailures[0].at_s = 500\nfailures[0].selector = random_fraction(0.1)\n";
        assert!(ScenarioConfig::parse(text).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(ScenarioConfig::parse("n = 10\npv.weights = 0.1,0.2,0.3,0.4\n").is_err());
    }

    #[test]
    fn node_list_selector() {
        let text = "n = 10\nduration_s = 100\nfailures[0].at_s = 50\nfailures[0].selector = nodes(1, 2, 3)\n";
        let cfg = ScenarioConfig::parse(text).unwrap();
        assert_eq!(cfg.failures[0].selector, FailureSelector::Nodes(vec![1, 2, 3]));
    }
}
