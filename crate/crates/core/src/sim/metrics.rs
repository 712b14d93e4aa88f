use alloc::string::String;
use alloc::vec::Vec;

use super::DegradationEvent;
use crate::rebalance::StepAction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum QueryOutcome {
    Completed { latency_ticks: u64 },
    /// Refused at selection, admission or queue cap, or cancelled mid-run.
    Rejected,
    /// Still in flight when the run ended.
    Unfinished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryRecord {
    pub arrival_tick: u64,
    pub broker: u32,
    pub profile: u32,
    pub outcome: QueryOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowLatency {
    pub completed: u64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Budget ledger state of one (server, workload) at the close of a budget
/// window.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BudgetWindowRecord {
    pub server: usize,
    pub workload: String,
    pub window_start_ms: f64,
    /// The run ended before the window did.
    pub partial: bool,
    pub budget_cpu_ns: u64,
    pub charged_cpu_ns: u64,
    pub true_cpu_ns: u64,
    pub budget_mem_bytes: u64,
    pub charged_mem_bytes: u64,
    pub true_mem_bytes: u64,
    pub admitted: u64,
    pub rejected: u64,
    pub cancelled: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RebalanceAnnotation {
    pub index: usize,
    pub action: StepAction,
    pub start_ms: f64,
    pub end_ms: Option<f64>,
    pub drained: Vec<String>,
    /// Serving replicas of the scarcest target segment while the step ran,
    /// counted by the simulator from its own host states.
    pub min_serving: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsSeries {
    pub tick_ms: f64,
    pub window_ms: f64,
    pub replicas: usize,
    pub mss_count: usize,
    pub server_names: Vec<String>,
    /// `[window][server]` requests routed to the server.
    pub dispatched: Vec<Vec<u32>>,
    /// `[window][server]` requests the server finished.
    pub completed: Vec<Vec<u32>>,
    pub latency: Vec<WindowLatency>,
    pub queries: Vec<QueryRecord>,
    pub profile_labels: Vec<String>,
    pub events: Vec<DegradationEvent>,
    pub budget_windows: Vec<BudgetWindowRecord>,
    pub rebalance_steps: Vec<RebalanceAnnotation>,
    /// Set when the rebalance plan could not run; the run continues without it.
    pub rebalance_error: Option<String>,
    pub min_serving_threshold: Option<usize>,
    pub dispatches_to_drained: u64,
    /// Largest number of servers scored for a single selection.
    pub max_selection_work: usize,
    pub unmatched_responses: u64,
}

impl MetricsSeries {
    pub fn windows(&self) -> usize {
        self.dispatched.len()
    }

    pub fn server_index(&self, mss: usize, replica: usize) -> usize {
        mss * self.replicas + replica
    }

    pub fn completed_queries(&self) -> usize {
        self.queries
            .iter()
            .filter(|q| matches!(q.outcome, QueryOutcome::Completed { .. }))
            .count()
    }

    pub fn rejected_queries(&self) -> usize {
        self.queries
            .iter()
            .filter(|q| q.outcome == QueryOutcome::Rejected)
            .count()
    }

    /// Latencies in ms of completed queries that arrived in `[from, to)` ms.
    pub fn latencies_ms(&self, from_ms: f64, to_ms: f64) -> Vec<f64> {
        self.queries
            .iter()
            .filter_map(|q| {
                let t = q.arrival_tick as f64 * self.tick_ms;
                match q.outcome {
                    QueryOutcome::Completed { latency_ticks } if t >= from_ms && t < to_ms => {
                        Some(latency_ticks as f64 * self.tick_ms)
                    }
                    _ => None,
                }
            })
            .collect()
    }

    /// Lowest serving-replica count seen across rebalance steps.
    pub fn min_serving_observed(&self) -> Option<usize> {
        self.rebalance_steps.iter().map(|s| s.min_serving).min()
    }
}

/// Nearest-rank percentile of `sorted` (ascending), `q` in `(0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = libm::ceil(q * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversionThresholds {
    /// Diverted once the degraded server gets less than this share of its
    /// fair share.
    pub divert: f64,
    /// Recovered once it gets at least this share again.
    pub recover: f64,
}

impl Default for DiversionThresholds {
    fn default() -> Self {
        Self {
            divert: 0.2,
            recover: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversionReport {
    /// 1-based index, counted from the window holding the degradation
    /// start, of the first diverted window.
    pub diversion_windows: Option<usize>,
    /// From restoration to the end of the first recovered window.
    pub recovery_ms: Option<f64>,
    /// Mean per-window standard deviation of the healthy servers' shares
    /// of their set's traffic.
    pub oscillation_index: f64,
    /// Mean share of fair share the degraded server received while degraded,
    /// from the first diverted window on.
    pub degraded_share_while_diverted: Option<f64>,
}

/// Diversion and recovery of the single degraded server, measured on routed
/// (dispatched) traffic relative to the fair share `1 / replicas` of its
/// mirrored server set.
pub fn measure_diversion(
    series: &MetricsSeries,
    thresholds: DiversionThresholds,
) -> Result<DiversionReport, &'static str> {
    let [ev] = series.events.as_slice() else {
        return Err("diversion needs exactly one degradation event");
    };
    let s = series.replicas;
    let bad = series.server_index(ev.mss, ev.replica);
    let row = ev.mss * s..(ev.mss + 1) * s;
    let wms = series.window_ms;
    let relative = |w: usize| -> Option<f64> {
        let counts = &series.dispatched[w];
        let total: u32 = counts[row.clone()].iter().sum();
        (total > 0).then(|| f64::from(counts[bad]) / (f64::from(total) / s as f64))
    };

    let first = libm::floor(ev.start_ms / wms) as usize;
    let restore = libm::ceil(ev.end_ms / wms - 1e-9) as usize;
    let mut diversion = None;
    let mut shares = Vec::new();
    for w in first..restore.min(series.windows()) {
        let Some(r) = relative(w) else { continue };
        if diversion.is_none() && r < thresholds.divert {
            diversion = Some(w - first + 1);
        }
        if diversion.is_some() {
            shares.push(r);
        }
    }
    let mut recovery = None;
    for w in restore..series.windows() {
        if relative(w).is_some_and(|r| r >= thresholds.recover) {
            recovery = Some((w + 1) as f64 * wms - ev.end_ms);
            break;
        }
    }

    let mut osc = 0.0;
    let mut n = 0usize;
    for counts in &series.dispatched {
        let total: u32 = counts[row.clone()].iter().sum();
        if total == 0 || s < 2 {
            continue;
        }
        let healthy: Vec<f64> = row
            .clone()
            .filter(|&i| i != bad)
            .map(|i| f64::from(counts[i]) / f64::from(total))
            .collect();
        let mean = healthy.iter().sum::<f64>() / healthy.len() as f64;
        let var = healthy.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / healthy.len() as f64;
        osc += libm::sqrt(var);
        n += 1;
    }
    Ok(DiversionReport {
        diversion_windows: diversion,
        recovery_ms: recovery,
        oscillation_index: if n == 0 { 0.0 } else { osc / n as f64 },
        degraded_share_while_diverted: (!shares.is_empty())
            .then(|| shares.iter().sum::<f64>() / shares.len() as f64),
    })
}

/// Fraction of queries arriving while a server is degraded whose latency
/// stayed below `latency_threshold_ms`. Rejected or unfinished queries count
/// as degraded. Without degradation events the rate is 1.
pub fn measure_degradation_prevention(series: &MetricsSeries, latency_threshold_ms: f64) -> f64 {
    if series.events.is_empty() {
        return 1.0;
    }
    let mut total = 0u64;
    let mut ok = 0u64;
    for q in &series.queries {
        let t = q.arrival_tick as f64 * series.tick_ms;
        if !series.events.iter().any(|e| t >= e.start_ms && t < e.end_ms) {
            continue;
        }
        total += 1;
        if let QueryOutcome::Completed { latency_ticks } = q.outcome {
            if (latency_ticks as f64 * series.tick_ms) < latency_threshold_ms {
                ok += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}
