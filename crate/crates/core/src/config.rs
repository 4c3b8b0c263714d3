//! Declarative text configuration: key=value lines grouped into
//! [sections], with one section per node. Drives the simulator and the
//! workload generator from plain files.
//!
//! ```text
//! [cluster]
//! seed = 7
//! streams = 2
//! tablets = 4
//!
//! [node.1]
//! role = rw
//! az = 0
//!
//! [node.11]
//! role = ro
//! az = 0
//!
//! [fault.0]
//! at_ms = 5000
//! target = 1
//! kind = crash
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::sim::{FaultKind, FaultSpec, SimConfig};
use crate::types::NodeId;
use crate::workload::{Distribution, WorkloadSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    BadLine(usize),
    #[error("section [{section}] key {key}: {reason}")]
    BadValue { section: String, key: String, reason: String },
    #[error("missing required section [{0}]")]
    MissingSection(String),
}

pub type Sections = BTreeMap<String, BTreeMap<String, String>>;

/// Parses the key=value/section format. Lines starting with '#' or ';'
/// are comments; keys before any section header land in "".
pub fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current = String::new();
    sections.entry(current.clone()).or_default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine(i + 1));
        };
        sections
            .get_mut(&current)
            .expect("current section exists")
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn get_parsed<T: std::str::FromStr>(
    section: &BTreeMap<String, String>,
    section_name: &str,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match section.get(key) {
        Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
            section: section_name.to_string(),
            key: key.to_string(),
            reason: format!("cannot parse {raw:?}"),
        }),
        None => Ok(default),
    }
}

/// Builds a simulator configuration from parsed sections. [cluster] holds
/// the global knobs, [engine] the storage-engine tuning, per-node
/// sections ([node.<id>]) override the role/zone roster, and [fault.<n>]
/// sections add the fault schedule.
pub fn sim_config_from_sections(sections: &Sections) -> Result<SimConfig, ConfigError> {
    let empty = BTreeMap::new();
    let cluster = sections.get("cluster").unwrap_or(&empty);
    let mut config = SimConfig::default();
    config.seed = get_parsed(cluster, "cluster", "seed", config.seed)?;
    config.streams = get_parsed(cluster, "cluster", "streams", config.streams)?;
    config.tablets = get_parsed(cluster, "cluster", "tablets", config.tablets)?;
    config.azs = get_parsed(cluster, "cluster", "azs", config.azs)?;
    config.store_base_latency_ms =
        get_parsed(cluster, "cluster", "store_base_latency_ms", config.store_base_latency_ms)?;
    config.store_bandwidth_bytes_per_ms = get_parsed(
        cluster,
        "cluster",
        "store_bandwidth_bytes_per_ms",
        config.store_bandwidth_bytes_per_ms,
    )?;
    config.net_jitter_ms = get_parsed(cluster, "cluster", "net_jitter_ms", config.net_jitter_ms)?;
    config.trace_enabled = get_parsed(cluster, "cluster", "trace_enabled", config.trace_enabled)?;

    if let Some(engine) = sections.get("engine") {
        let e = &mut config.engine;
        e.micro_compaction = get_parsed(engine, "engine", "micro_compaction", e.micro_compaction)?;
        e.micro_trigger_fraction =
            get_parsed(engine, "engine", "micro_trigger_fraction", e.micro_trigger_fraction)?;
        e.freeze_threshold_bytes =
            get_parsed(engine, "engine", "freeze_threshold_bytes", e.freeze_threshold_bytes)?;
        e.memory_budget_bytes =
            get_parsed(engine, "engine", "memory_budget_bytes", e.memory_budget_bytes)?;
        e.dump_base_ms = get_parsed(engine, "engine", "dump_base_ms", e.dump_base_ms)?;
        e.dump_bandwidth_bytes_per_ms = get_parsed(
            engine,
            "engine",
            "dump_bandwidth_bytes_per_ms",
            e.dump_bandwidth_bytes_per_ms,
        )?;
        e.minor_trigger_increments =
            get_parsed(engine, "engine", "minor_trigger_increments", e.minor_trigger_increments)?;
        e.major_trigger_minis =
            get_parsed(engine, "engine", "major_trigger_minis", e.major_trigger_minis)?;
    }
    if let Some(cache) = sections.get("cache") {
        config.cache.memory_entries =
            get_parsed(cache, "cache", "memory_entries", config.cache.memory_entries)?;
        config.cache.local_entries =
            get_parsed(cache, "cache", "local_entries", config.cache.local_entries)?;
    }

    // Node roster: explicit sections override the default counts.
    let mut rw = 0u32;
    let mut ro = 0u32;
    let mut saw_nodes = false;
    for (name, body) in sections {
        if let Some(rest) = name.strip_prefix("node.") {
            saw_nodes = true;
            let _id: u64 = rest.parse().map_err(|_| ConfigError::BadValue {
                section: name.clone(),
                key: "node id".to_string(),
                reason: format!("bad node id {rest:?}"),
            })?;
            match body.get("role").map(String::as_str) {
                Some("rw") => rw += 1,
                Some("ro") | None => ro += 1,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        section: name.clone(),
                        key: "role".to_string(),
                        reason: format!("unknown role {other:?}"),
                    })
                }
            }
        }
        if let Some(rest) = name.strip_prefix("fault.") {
            let _idx: u32 = rest.parse().unwrap_or(0);
            let at_ms = get_parsed(body, name, "at_ms", 0u64)?;
            let target = NodeId(get_parsed(body, name, "target", 0u64)?);
            let kind = match body.get("kind").map(String::as_str) {
                Some("crash") | None => FaultKind::Crash,
                Some("restart") => FaultKind::Restart,
                Some("partition") => FaultKind::Partition,
                Some("slow-disk") => FaultKind::SlowDisk,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        section: name.clone(),
                        key: "kind".to_string(),
                        reason: format!("unknown fault kind {other:?}"),
                    })
                }
            };
            config.faults.push(FaultSpec { at_ms, target, kind });
        }
    }
    if saw_nodes {
        config.rw_nodes = rw.max(1);
        config.ro_nodes = ro;
    } else {
        config.rw_nodes = get_parsed(cluster, "cluster", "rw_nodes", config.rw_nodes)?;
        config.ro_nodes = get_parsed(cluster, "cluster", "ro_nodes", config.ro_nodes)?;
    }
    config.faults.sort_by_key(|f| f.at_ms);
    Ok(config)
}

pub fn sim_config_from_str(text: &str) -> Result<SimConfig, ConfigError> {
    sim_config_from_sections(&parse_sections(text)?)
}

/// Builds a workload spec from the [workload] section.
pub fn workload_from_sections(sections: &Sections) -> Result<WorkloadSpec, ConfigError> {
    let w = sections
        .get("workload")
        .ok_or_else(|| ConfigError::MissingSection("workload".to_string()))?;
    let mut spec = WorkloadSpec::default();
    spec.distribution = match w.get("distribution").map(String::as_str) {
        Some("uniform") | None => Distribution::Uniform,
        Some("zipfian") => {
            let theta = get_parsed(w, "workload", "theta", 0.99f64)?;
            Distribution::Zipfian { theta }
        }
        Some(other) => {
            return Err(ConfigError::BadValue {
                section: "workload".to_string(),
                key: "distribution".to_string(),
                reason: format!("unknown distribution {other:?}"),
            })
        }
    };
    spec.put_fraction = get_parsed(w, "workload", "put_fraction", spec.put_fraction)?;
    if !(0.0..=1.0).contains(&spec.put_fraction) {
        return Err(ConfigError::BadValue {
            section: "workload".to_string(),
            key: "put_fraction".to_string(),
            reason: "fractions must sum to 1".to_string(),
        });
    }
    spec.key_space = get_parsed(w, "workload", "key_space", spec.key_space)?;
    spec.op_count = get_parsed(w, "workload", "op_count", spec.op_count)?;
    spec.ops_per_second = get_parsed(w, "workload", "ops_per_second", spec.ops_per_second)?;
    spec.concurrency = get_parsed(w, "workload", "concurrency", spec.concurrency)?;
    spec.value_len = get_parsed(w, "workload", "value_len", spec.value_len)?;
    Ok(spec)
}

pub fn workload_from_str(text: &str) -> Result<WorkloadSpec, ConfigError> {
    workload_from_sections(&parse_sections(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "# comment\nglobal = 1\n[a]\nx = 2\n; more\n[b.c]\ny = hello world\n";
        let s = parse_sections(text).unwrap();
        assert_eq!(s[""]["global"], "1");
        assert_eq!(s["a"]["x"], "2");
        assert_eq!(s["b.c"]["y"], "hello world");
    }

    #[test]
    fn bad_line_is_reported_with_number() {
        assert_eq!(parse_sections("ok = 1\nnot a kv\n"), Err(ConfigError::BadLine(2)));
    }

    #[test]
    fn node_sections_define_the_roster() {
        let text = "\
[cluster]
seed = 9
streams = 1
tablets = 2

[node.1]
role = rw
az = 0

[node.11]
role = ro

[node.12]
role = ro

[fault.0]
at_ms = 500
target = 1
kind = crash
";
        let config = sim_config_from_str(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.rw_nodes, 1);
        assert_eq!(config.ro_nodes, 2);
        assert_eq!(config.faults.len(), 1);
        assert_eq!(config.faults[0].target, NodeId(1));
        assert_eq!(config.faults[0].kind, FaultKind::Crash);
    }

    #[test]
    fn workload_section_round_trips() {
        let text = "\
[workload]
distribution = zipfian
theta = 0.99
put_fraction = 0.25
key_space = 100
op_count = 5000
ops_per_second = 500
";
        let spec = workload_from_str(text).unwrap();
        assert!(matches!(spec.distribution, Distribution::Zipfian { theta } if theta == 0.99));
        assert_eq!(spec.put_fraction, 0.25);
        assert_eq!(spec.key_space, 100);
    }

    #[test]
    fn missing_workload_section_errors() {
        assert!(matches!(
            workload_from_str("[cluster]\nseed = 1\n"),
            Err(ConfigError::MissingSection(s)) if s == "workload"
        ));
    }
}
