//! Workload budget files (JSON).
//!
//! A file holds one workload object or an array of them:
//!
//! ```json
//! {
//!   "workloadName": "analytics-workload",
//!   "nodeConfigs": [{
//!     "nodeType": "SERVER",
//!     "enforcementProfile": { "cpuCostNs": 1.0e9, "memoryCostBytes": 5.0e9 },
//!     "propagationScheme": { "type": "TABLE", "tables": ["tableA", "tableB"] }
//!   }]
//! }
//! ```
//!
//! Costs may be written as floats but must be whole numbers.

use std::collections::BTreeSet;
use std::path::Path;

use olapguard_core::budget::{NodeConfig, NodeType, Propagation, WorkloadConfig, MAX_BUDGET};
use serde::Deserialize;
use serde_json::{Number, Value};

use crate::doc;
use crate::error::{Error, Problem, Result};

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct WorkloadDoc {
    workload_name: String,
    node_configs: Vec<NodeConfigDoc>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct NodeConfigDoc {
    node_type: NodeType,
    enforcement_profile: ProfileDoc,
    propagation_scheme: Propagation,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ProfileDoc {
    cpu_cost_ns: Number,
    memory_cost_bytes: Number,
}

fn budget(n: &Number, path: String, problems: &mut Vec<Problem>) -> u64 {
    let v = match n.as_u64() {
        Some(v) => Some(v),
        None => n
            .as_f64()
            .filter(|f| f.is_finite() && *f >= 0.0 && f.fract() == 0.0 && *f <= MAX_BUDGET as f64)
            .map(|f| f as u64),
    };
    match v {
        Some(0) => problems.push(Problem::new(path, "must be positive")),
        Some(v) if v <= MAX_BUDGET => return v,
        _ => problems.push(Problem::new(
            path,
            format!("{n} is not a whole number between 1 and {MAX_BUDGET}"),
        )),
    }
    0
}

fn convert(d: WorkloadDoc, at: &str, problems: &mut Vec<Problem>) -> WorkloadConfig {
    if d.workload_name.is_empty() {
        problems.push(Problem::new(doc::join(at, "workloadName"), "must not be empty"));
    }
    let mut seen = BTreeSet::new();
    let node_configs = d
        .node_configs
        .into_iter()
        .enumerate()
        .map(|(i, nc)| {
            let p = doc::join(at, &format!("nodeConfigs[{i}]"));
            if !seen.insert(nc.node_type) {
                problems.push(Problem::new(
                    format!("{p}.nodeType"),
                    format!("{} configured twice", node_type_name(nc.node_type)),
                ));
            }
            match &nc.propagation_scheme {
                Propagation::Table { tables } if tables.is_empty() => {
                    problems.push(Problem::new(format!("{p}.propagationScheme.tables"), "must not be empty"))
                }
                Propagation::Tenant { tenant } if tenant.is_empty() => {
                    problems.push(Problem::new(format!("{p}.propagationScheme.tenant"), "must not be empty"))
                }
                _ => {}
            }
            let prof = format!("{p}.enforcementProfile");
            NodeConfig {
                node_type: nc.node_type,
                cpu_cost_ns: budget(&nc.enforcement_profile.cpu_cost_ns, format!("{prof}.cpuCostNs"), problems),
                memory_cost_bytes: budget(
                    &nc.enforcement_profile.memory_cost_bytes,
                    format!("{prof}.memoryCostBytes"),
                    problems,
                ),
                propagation: nc.propagation_scheme,
            }
        })
        .collect();
    WorkloadConfig {
        workload_name: d.workload_name,
        node_configs,
    }
}

pub fn parse_workloads_str(text: &str) -> Result<Vec<WorkloadConfig>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::field("", e.to_string()))?;
    let docs: Vec<(String, Value)> = match value {
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("[{i}]"), v))
            .collect(),
        v => vec![(String::new(), v)],
    };
    let mut problems = Vec::new();
    let mut out: Vec<WorkloadConfig> = Vec::new();
    for (at, v) in docs {
        let d: WorkloadDoc = doc::from_json(v, &at)?;
        let w = convert(d, &at, &mut problems);
        if out.iter().any(|o| o.workload_name == w.workload_name) {
            problems.push(Problem::new(
                doc::join(&at, "workloadName"),
                format!("workload {} defined twice", w.workload_name),
            ));
        }
        out.push(w);
    }
    doc::problems_to_error(problems)?;
    Ok(out)
}

pub fn parse_workloads(path: &Path) -> Result<Vec<WorkloadConfig>> {
    parse_workloads_str(&doc::read(path)?).map_err(|e| e.in_file(path))
}

pub fn node_type_name(t: NodeType) -> &'static str {
    match t {
        NodeType::Broker => "BROKER",
        NodeType::Server => "SERVER",
    }
}

/// Server-side budget of a workload, if it has one.
pub fn server_budget(w: &WorkloadConfig) -> Option<&NodeConfig> {
    w.node_config(NodeType::Server)
}
