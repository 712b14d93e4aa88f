//! Cluster topology files (TOML).
//!
//! ```toml
//! replica_groups = 3        # R
//! instances_per_rg = 2      # optional, defaults to instances / R
//!
//! [[instances]]
//! id = "h1"
//! mz = "az1"
//! tenant = "default"        # optional
//! tables = ["orders"]       # optional
//! node_type = "SERVER"      # optional, SERVER or BROKER
//!
//! [[segments]]
//! id = "orders_0"
//! size_bytes = 1048576      # optional
//!
//! # optional: the current layout, one row of instance ids per mirrored set
//! rows = [["h1", "h2", "h3"], ["h4", "h5", "h6"]]
//!
//! # optional: per-host segments before and after a rebalance
//! [current]
//! h1 = ["orders_0"]
//! [desired]
//! h2 = ["orders_0"]
//!
//! [rebalance]               # optional, every key optional
//! min_serving_replicas = 2
//! progress_batch = 4
//! drain_wait_ms = 30000.0
//! download_bytes_per_ms = 100000.0
//! default_segment_bytes = 104857600
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use olapguard_core::budget::{HostInfo, NodeType};
use olapguard_core::cluster::{
    build_matrix, derive_host_assignment, AssignmentMatrix, HostAssignment, Instance, InstanceId, SegmentId,
    SegmentMap,
};
use olapguard_core::rebalance::RebalanceConfig;
use serde::Deserialize;

use crate::doc;
use crate::error::{Error, Problem, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub replica_groups: usize,
    #[serde(default)]
    pub instances_per_rg: Option<usize>,
    pub instances: Vec<InstanceEntry>,
    #[serde(default)]
    pub segments: Vec<SegmentEntry>,
    #[serde(default)]
    pub rows: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub current: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub desired: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub rebalance: RebalanceParams,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: String,
    pub mz: String,
    #[serde(default = "default_tenant")]
    pub tenant: String,
    #[serde(default)]
    pub tables: Vec<String>,
    #[serde(default = "default_node_type")]
    pub node_type: NodeType,
}

fn default_tenant() -> String {
    "default".into()
}

fn default_node_type() -> NodeType {
    NodeType::Server
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub id: String,
    #[serde(default)]
    pub size_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceParams {
    pub min_serving_replicas: Option<usize>,
    pub progress_batch: Option<usize>,
    pub drain_wait_ms: Option<f64>,
    pub download_bytes_per_ms: Option<f64>,
    pub default_segment_bytes: Option<u64>,
}

/// A checked topology file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    pub file: TopologyFile,
    pub instances_per_rg: usize,
    pub mz_count: usize,
}

fn check_layout(
    name: &str,
    map: &BTreeMap<String, Vec<String>>,
    hosts: &BTreeSet<&str>,
    segments: &BTreeSet<&str>,
    problems: &mut Vec<Problem>,
) {
    for (host, segs) in map {
        if !hosts.contains(host.as_str()) {
            problems.push(Problem::new(format!("{name}.{host}"), "unknown instance"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in segs.iter().enumerate() {
            if !segments.contains(s.as_str()) {
                problems.push(Problem::new(format!("{name}.{host}[{i}]"), format!("unknown segment {s}")));
            } else if !seen.insert(s) {
                problems.push(Problem::new(format!("{name}.{host}[{i}]"), format!("segment {s} listed twice")));
            }
        }
    }
}

impl ClusterTopology {
    pub fn from_file(file: TopologyFile) -> Result<Self> {
        let mut problems = Vec::new();
        let r = file.replica_groups;
        if r == 0 {
            problems.push(Problem::new("replica_groups", "must be at least 1"));
        }
        if file.instances.is_empty() {
            problems.push(Problem::new("instances", "must list at least one instance"));
        }
        let mut hosts = BTreeSet::new();
        for (i, inst) in file.instances.iter().enumerate() {
            if inst.id.is_empty() {
                problems.push(Problem::new(format!("instances[{i}].id"), "must not be empty"));
            }
            if inst.mz.is_empty() {
                problems.push(Problem::new(format!("instances[{i}].mz"), "must not be empty"));
            }
            if !hosts.insert(inst.id.as_str()) {
                problems.push(Problem::new(format!("instances[{i}].id"), format!("duplicate instance {}", inst.id)));
            }
        }
        let mut segments = BTreeSet::new();
        for (i, s) in file.segments.iter().enumerate() {
            if s.id.is_empty() {
                problems.push(Problem::new(format!("segments[{i}].id"), "must not be empty"));
            }
            if !segments.insert(s.id.as_str()) {
                problems.push(Problem::new(format!("segments[{i}].id"), format!("duplicate segment {}", s.id)));
            }
        }
        let per_rg = match (file.instances_per_rg, &file.rows) {
            (Some(0), _) => {
                problems.push(Problem::new("instances_per_rg", "must be at least 1"));
                0
            }
            (Some(n), Some(rows)) if n != rows.len() => {
                problems.push(Problem::new("instances_per_rg", format!("disagrees with the {} listed rows", rows.len())));
                n
            }
            (Some(n), _) => n,
            (None, Some(rows)) => rows.len(),
            (None, None) if r > 0 => {
                let n = file.instances.len() / r;
                if n == 0 {
                    problems.push(Problem::new("instances", format!("{} instances cannot fill {r} replica groups", file.instances.len())));
                }
                n
            }
            (None, None) => 0,
        };
        if r > 0 && per_rg > 0 && r * per_rg > file.instances.len() {
            problems.push(Problem::new(
                "instances",
                format!("{} instances cannot fill {per_rg} rows of {r}", file.instances.len()),
            ));
        }
        if let Some(rows) = &file.rows {
            let mut used = BTreeSet::new();
            for (i, row) in rows.iter().enumerate() {
                if row.len() != r {
                    problems.push(Problem::new(format!("rows[{i}]"), format!("has {} instances, expected {r}", row.len())));
                }
                for (j, id) in row.iter().enumerate() {
                    if !hosts.contains(id.as_str()) {
                        problems.push(Problem::new(format!("rows[{i}][{j}]"), format!("unknown instance {id}")));
                    } else if !used.insert(id.as_str()) {
                        problems.push(Problem::new(format!("rows[{i}][{j}]"), format!("instance {id} placed twice")));
                    }
                }
            }
        }
        for (name, map) in [("current", &file.current), ("desired", &file.desired)] {
            if let Some(map) = map {
                check_layout(name, map, &hosts, &segments, &mut problems);
            }
        }
        let p = &file.rebalance;
        if p.progress_batch == Some(0) {
            problems.push(Problem::new("rebalance.progress_batch", "must be at least 1"));
        }
        for (name, v) in [("drain_wait_ms", p.drain_wait_ms), ("download_bytes_per_ms", p.download_bytes_per_ms)] {
            if let Some(v) = v {
                let ok = if name == "drain_wait_ms" { v >= 0.0 } else { v > 0.0 };
                if !v.is_finite() || !ok {
                    problems.push(Problem::new(format!("rebalance.{name}"), format!("invalid value {v}")));
                }
            }
        }
        doc::problems_to_error(problems)?;
        let mz_count = file.instances.iter().map(|i| i.mz.as_str()).collect::<BTreeSet<_>>().len();
        Ok(Self {
            instances_per_rg: per_rg,
            mz_count,
            file,
        })
    }

    pub fn pool(&self) -> Vec<Instance> {
        self.file.instances.iter().map(|i| Instance::new(i.id.clone(), i.mz.clone())).collect()
    }

    /// The listed layout, or one built from the instance pool.
    pub fn matrix(&self) -> Result<AssignmentMatrix> {
        let by_id: BTreeMap<&str, &InstanceEntry> =
            self.file.instances.iter().map(|i| (i.id.as_str(), i)).collect();
        let m = match &self.file.rows {
            Some(rows) => {
                let rows = rows
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|id| Instance::new(id.clone(), by_id[id.as_str()].mz.clone()))
                            .collect()
                    })
                    .collect();
                AssignmentMatrix::from_rows(rows, self.mz_count)
            }
            None => build_matrix(self.file.replica_groups, self.instances_per_rg, &self.pool()),
        };
        m.map_err(|e| Error::field("instances", e.to_string()))
    }

    pub fn segment_ids(&self) -> Vec<SegmentId> {
        self.file.segments.iter().map(|s| SegmentId::new(s.id.clone())).collect()
    }

    /// Mirrored layout: segments dealt round-robin over the rows.
    pub fn derive_assignment(&self, matrix: &AssignmentMatrix) -> Result<HostAssignment> {
        let map = SegmentMap::round_robin(self.segment_ids(), matrix.num_rows());
        derive_host_assignment(matrix, &map).map_err(|e| Error::field("segments", e.to_string()))
    }

    fn layout(map: &BTreeMap<String, Vec<String>>) -> HostAssignment {
        let mut out = HostAssignment::new();
        for (host, segs) in map {
            out.ensure_host(host.clone());
            for s in segs {
                out.insert(host.clone(), s.clone());
            }
        }
        out
    }

    pub fn current(&self) -> Option<HostAssignment> {
        self.file.current.as_ref().map(Self::layout)
    }

    pub fn desired(&self) -> Option<HostAssignment> {
        self.file.desired.as_ref().map(Self::layout)
    }

    /// `T` defaults to one less than the scarcest segment's desired replica
    /// count, then the file's overrides apply.
    pub fn rebalance_config(&self, desired: &HostAssignment) -> RebalanceConfig {
        let mut c = RebalanceConfig::defaults_for(desired);
        let p = &self.file.rebalance;
        if let Some(t) = p.min_serving_replicas {
            c.min_serving_replicas = t;
        }
        if let Some(b) = p.progress_batch {
            c.progress_batch = b;
        }
        if let Some(v) = p.drain_wait_ms {
            c.drain_wait_ms = v;
        }
        if let Some(v) = p.download_bytes_per_ms {
            c.download_bytes_per_ms = v;
        }
        if let Some(v) = p.default_segment_bytes {
            c.default_segment_bytes = v;
        }
        c.segment_bytes = self
            .file
            .segments
            .iter()
            .filter_map(|s| s.size_bytes.map(|b| (SegmentId::new(s.id.clone()), b)))
            .collect();
        c
    }

    /// Budget propagation view of the cluster.
    pub fn host_info(&self) -> BTreeMap<InstanceId, HostInfo> {
        self.file
            .instances
            .iter()
            .map(|i| {
                (InstanceId::new(i.id.clone()), HostInfo {
                    tables: i.tables.iter().cloned().collect(),
                    tenant: i.tenant.clone(),
                    node_type: Some(i.node_type),
                })
            })
            .collect()
    }
}

pub fn parse_topology_str(text: &str) -> Result<ClusterTopology> {
    ClusterTopology::from_file(doc::from_toml(text)?)
}

pub fn parse_topology(path: &Path) -> Result<ClusterTopology> {
    parse_topology_str(&doc::read(path)?).map_err(|e| e.in_file(path))
}
