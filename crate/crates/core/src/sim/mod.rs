//! Discrete-time broker/server simulator.
//!
//! Servers form an `mss_count x replicas` grid: row `i` is mirrored server
//! set `i`, column `j` is replica group `j`. Every query fans out to one
//! server per row and completes when all rows have answered. Brokers route
//! with their own [`Selector`](crate::selector::Selector) and never share
//! state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::rebalance::RebalanceConfig;
use crate::selector::{SelectionPolicy, SelectorParams};

mod engine;
mod metrics;

pub use engine::{run, Census, SimState};
pub use metrics::{
    measure_degradation_prevention, measure_diversion, nearest_rank, BudgetWindowRecord,
    DiversionReport, DiversionThresholds, MetricsSeries, QueryOutcome, QueryRecord,
    RebalanceAnnotation, WindowLatency,
};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct Topology {
    pub brokers: usize,
    /// Servers per mirrored server set (replica groups).
    pub replicas: usize,
    pub mss_count: usize,
    pub threads_per_server: usize,
    pub segments_per_mss: usize,
    /// One-way broker/server message delay.
    pub message_delay_ticks: u32,
    /// Per-server cap on queued tasks; requests beyond it are refused.
    pub queue_cap: Option<usize>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            brokers: 3,
            replicas: 5,
            mss_count: 1,
            threads_per_server: 4,
            segments_per_mss: 8,
            message_delay_ticks: 1,
            queue_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct WorkloadProfile {
    pub label: String,
    pub qps: f64,
    /// Unloaded server latency. A request becomes `min(threads, segments)`
    /// parallel tasks of `ceil(base_latency_ms / tick_ms)` work units each.
    #[cfg_attr(feature = "serde", serde(default))]
    pub base_latency_ms: Option<f64>,
    /// Work units per task, overriding `base_latency_ms`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub work_units: Option<u32>,
    /// Budgeted workload the queries are tagged with.
    #[cfg_attr(feature = "serde", serde(default))]
    pub workload: Option<String>,
    /// CPU charged per work unit; defaults to the tick length.
    #[cfg_attr(feature = "serde", serde(default))]
    pub cpu_ns_per_unit: Option<u64>,
    #[cfg_attr(feature = "serde", serde(default = "default_mem_per_unit"))]
    pub mem_bytes_per_unit: u64,
}

#[cfg(feature = "serde")]
fn default_mem_per_unit() -> u64 {
    4096
}

impl WorkloadProfile {
    pub fn new(label: &str, qps: f64, base_latency_ms: f64) -> Self {
        Self {
            label: label.into(),
            qps,
            base_latency_ms: Some(base_latency_ms),
            work_units: None,
            workload: None,
            cpu_ns_per_unit: None,
            mem_bytes_per_unit: 4096,
        }
    }

    /// Work units of each task of a server request.
    pub fn units(&self, tick_ms: f64) -> u32 {
        match (self.work_units, self.base_latency_ms) {
            (Some(u), _) => u,
            (None, Some(ms)) => {
                let u = libm::ceil(ms / tick_ms - 1e-9);
                if u < 1.0 {
                    1
                } else {
                    u as u32
                }
            }
            (None, None) => 1,
        }
    }
}

/// Server `replica` of mirrored server set `mss` progresses with probability
/// `p` per tick during `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct DegradationEvent {
    pub mss: usize,
    pub replica: usize,
    pub start_ms: f64,
    pub end_ms: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Routing {
    /// Pick one replica group uniformly per query and use its server in
    /// every row.
    ReplicaGroupRandom,
    /// Select independently within every mirrored server set.
    Mss(SelectionPolicy),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct Policy {
    pub routing: Routing,
    #[cfg_attr(feature = "serde", serde(default))]
    pub selector: SelectorParams,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            routing: Routing::Mss(SelectionPolicy::HYBRID),
            selector: SelectorParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum ArrivalMode {
    /// Inject `floor(accrued)` queries per tick.
    #[default]
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct BudgetEntry {
    pub workload: String,
    pub cpu_cost_ns: u64,
    pub memory_cost_bytes: u64,
}

/// Per-server workload budgets. Every server receives the full budget.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct BudgetSpec {
    pub window_ms: f64,
    pub accounting_interval_ms: f64,
    pub provisional_cpu_ns: u64,
    pub provisional_mem_bytes: u64,
    /// Reject queries of workloads without a budget.
    pub strict: bool,
    pub workloads: Vec<BudgetEntry>,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self {
            window_ms: 5_000.0,
            accounting_interval_ms: 1.0,
            provisional_cpu_ns: 0,
            provisional_mem_bytes: 0,
            strict: false,
            workloads: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum RebalancePlan {
    /// Moves the first `count` segments of every row to the next row.
    ShiftSegments { count: usize },
    /// Target segment names per server name (`s<mss>-<replica>`).
    Explicit { desired: BTreeMap<String, Vec<String>> },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct RebalanceSpec {
    pub start_ms: f64,
    /// Defaults to `replicas - 1`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub min_serving_replicas: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default = "default_batch"))]
    pub progress_batch: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_drain_ms"))]
    pub drain_wait_ms: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_rate"))]
    pub download_bytes_per_ms: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_segment_bytes"))]
    pub segment_bytes: u64,
    pub plan: RebalancePlan,
}

#[cfg(feature = "serde")]
fn default_batch() -> usize {
    1
}
#[cfg(feature = "serde")]
fn default_drain_ms() -> f64 {
    RebalanceConfig::new(0, 1).drain_wait_ms
}
#[cfg(feature = "serde")]
fn default_rate() -> f64 {
    RebalanceConfig::new(0, 1).download_bytes_per_ms
}
#[cfg(feature = "serde")]
fn default_segment_bytes() -> u64 {
    RebalanceConfig::new(0, 1).default_segment_bytes
}

impl RebalanceSpec {
    pub fn config(&self, replicas: usize) -> RebalanceConfig {
        let mut c = RebalanceConfig::new(
            self.min_serving_replicas.unwrap_or(replicas.saturating_sub(1)),
            self.progress_batch,
        );
        c.drain_wait_ms = self.drain_wait_ms;
        c.download_bytes_per_ms = self.download_bytes_per_ms;
        c.default_segment_bytes = self.segment_bytes;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct Scenario {
    pub seed: u64,
    pub tick_ms: f64,
    pub duration_ms: f64,
    pub metrics_window_ms: f64,
    pub arrivals: ArrivalMode,
    pub topology: Topology,
    pub workloads: Vec<WorkloadProfile>,
    pub events: Vec<DegradationEvent>,
    pub policy: Policy,
    pub budgets: Option<BudgetSpec>,
    pub rebalance: Option<RebalanceSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            tick_ms: 0.1,
            duration_ms: 1_000.0,
            metrics_window_ms: 100.0,
            arrivals: ArrivalMode::Deterministic,
            topology: Topology::default(),
            workloads: Vec::new(),
            events: Vec::new(),
            policy: Policy::default(),
            budgets: None,
            rebalance: None,
        }
    }
}

/// One invalid field, named by its path in the scenario document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

fn field(path: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        path: path.into(),
        message: message.into(),
    }
}

impl Scenario {
    /// Name of the server at (`mss`, `replica`).
    pub fn server_name(mss: usize, replica: usize) -> String {
        format!("s{mss}-{replica}")
    }

    pub fn server_count(&self) -> usize {
        self.topology.mss_count * self.topology.replicas
    }

    pub fn ticks(&self, ms: f64) -> u64 {
        let t = libm::round(ms / self.tick_ms);
        if t <= 0.0 {
            0
        } else {
            t as u64
        }
    }

    /// Every problem found, in document order.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.tick_ms) {
            errs.push(field("tick_ms", "must be a positive number"));
        }
        if !(self.duration_ms >= 0.0 && self.duration_ms.is_finite()) {
            errs.push(field("duration_ms", "must be a non-negative number"));
        }
        if !pos(self.metrics_window_ms) {
            errs.push(field("metrics_window_ms", "must be a positive number"));
        } else if pos(self.tick_ms) && self.ticks(self.metrics_window_ms) == 0 {
            errs.push(field("metrics_window_ms", "shorter than one tick"));
        }
        let t = &self.topology;
        for (name, v) in [
            ("brokers", t.brokers),
            ("replicas", t.replicas),
            ("mss_count", t.mss_count),
            ("threads_per_server", t.threads_per_server),
            ("segments_per_mss", t.segments_per_mss),
        ] {
            if v == 0 {
                errs.push(field(format!("topology.{name}"), "must be at least 1"));
            }
        }
        if t.message_delay_ticks == 0 {
            errs.push(field("topology.message_delay_ticks", "must be at least 1"));
        }
        for (i, w) in self.workloads.iter().enumerate() {
            let p = format!("workloads[{i}]");
            if !(w.qps >= 0.0 && w.qps.is_finite()) {
                errs.push(field(format!("{p}.qps"), "must be a non-negative number"));
            }
            match (w.work_units, w.base_latency_ms) {
                (Some(0), _) => errs.push(field(format!("{p}.work_units"), "must be at least 1")),
                (None, None) => errs.push(field(
                    format!("{p}.base_latency_ms"),
                    "one of base_latency_ms or work_units is required",
                )),
                (None, Some(ms)) if !pos(ms) => {
                    errs.push(field(format!("{p}.base_latency_ms"), "must be a positive number"))
                }
                _ => {}
            }
            if w.cpu_ns_per_unit == Some(0) {
                errs.push(field(format!("{p}.cpu_ns_per_unit"), "must be positive"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let p = format!("events[{i}]");
            if e.mss >= t.mss_count {
                errs.push(field(format!("{p}.mss"), format!("no mirrored server set {}", e.mss)));
            }
            if e.replica >= t.replicas {
                errs.push(field(format!("{p}.replica"), format!("no replica {}", e.replica)));
            }
            if !(e.p > 0.0 && e.p <= 1.0) {
                errs.push(field(format!("{p}.p"), "progress probability must lie in (0, 1]"));
            }
            if !(e.start_ms >= 0.0 && e.end_ms > e.start_ms) {
                errs.push(field(format!("{p}.end_ms"), "must be after a non-negative start_ms"));
            }
        }
        if let Err(e) = self.policy.selector.validate() {
            errs.push(field("policy.selector", format!("{e}")));
        }
        if let Routing::Mss(sp) = &self.policy.routing {
            if let Err(e) = sp.validate() {
                errs.push(field("policy.routing.tau_rule", format!("{e}")));
            }
        }
        if let Some(b) = &self.budgets {
            if !pos(b.window_ms) {
                errs.push(field("budgets.window_ms", "must be a positive number"));
            }
            if !pos(b.accounting_interval_ms) {
                errs.push(field("budgets.accounting_interval_ms", "must be a positive number"));
            } else if pos(self.tick_ms) && self.ticks(b.accounting_interval_ms) == 0 {
                errs.push(field("budgets.accounting_interval_ms", "shorter than one tick"));
            }
            for (i, w) in b.workloads.iter().enumerate() {
                let p = format!("budgets.workloads[{i}]");
                if w.workload.is_empty() {
                    errs.push(field(format!("{p}.workload"), "must not be empty"));
                }
                if w.cpu_cost_ns == 0 || w.cpu_cost_ns > crate::budget::MAX_BUDGET {
                    errs.push(field(format!("{p}.cpu_cost_ns"), "must be positive and representable"));
                }
                if w.memory_cost_bytes == 0 || w.memory_cost_bytes > crate::budget::MAX_BUDGET {
                    errs.push(field(format!("{p}.memory_cost_bytes"), "must be positive and representable"));
                }
            }
        }
        if let Some(r) = &self.rebalance {
            if !(r.start_ms >= 0.0 && r.start_ms.is_finite()) {
                errs.push(field("rebalance.start_ms", "must be a non-negative number"));
            }
            if r.progress_batch == 0 {
                errs.push(field("rebalance.progress_batch", "must be at least 1"));
            }
            if let Some(tv) = r.min_serving_replicas {
                if tv >= t.replicas.max(1) {
                    errs.push(field("rebalance.min_serving_replicas", "must be below the replica count"));
                }
            }
            if !(r.drain_wait_ms >= 0.0 && r.drain_wait_ms.is_finite()) {
                errs.push(field("rebalance.drain_wait_ms", "must be a non-negative number"));
            }
            if !pos(r.download_bytes_per_ms) {
                errs.push(field("rebalance.download_bytes_per_ms", "must be a positive number"));
            }
            if let RebalancePlan::ShiftSegments { count } = r.plan {
                if count > t.segments_per_mss {
                    errs.push(field("rebalance.plan.count", "exceeds segments_per_mss"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
