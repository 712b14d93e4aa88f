//! The four subcommands, each producing a [`Report`].

use std::collections::{BTreeMap, BTreeSet};

use olapguard_core::budget::{propagate_budgets, PropagationWarning, WorkloadConfig};
use olapguard_core::cluster::{HostAssignment, InstanceId, Mz, SegmentId};
use olapguard_core::placement::{bad_rows, live_replicas_after_zone_drain, repair, threshold};
use olapguard_core::rebalance::{run_rebalance, RebalanceError, RebalanceTrace, StepAction, StepRecord};
use olapguard_core::sim::{
    self, measure_degradation_prevention, measure_diversion, nearest_rank, BudgetEntry, BudgetSpec,
    DiversionThresholds, MetricsSeries, QueryOutcome, Scenario,
};
use serde_json::{json, Value};

use crate::error::{Error, Problem, Result};
use crate::report::{Report, Table};
use crate::scenario::emit_scenario;
use crate::topology::ClusterTopology;
use crate::workload::{node_type_name, server_budget};

fn ids<'a, T: std::fmt::Display + 'a>(xs: impl IntoIterator<Item = &'a T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn action_name(a: StepAction) -> &'static str {
    match a {
        StepAction::Rebalance => "rebalance",
        StepAction::Progress => "progress",
    }
}

/// Zone-aware placement repair of the topology's layout.
pub fn place(topo: &ClusterTopology) -> Result<Report> {
    let original = topo.matrix()?;
    let out = repair(&original);
    let mut violations = Vec::new();
    if out.replay(&original) != out.matrix {
        violations.push("replaying the swap log does not reproduce the repaired layout".into());
    }
    let residual = bad_rows(&out.matrix);
    if residual != out.residual_bad_rows {
        violations.push(format!("rows {residual:?} violate the zone limit but were not reported"));
    }

    let mut matrix = Table::new("matrix", &["row", "col", "instance", "mz", "moved"]);
    for (i, row) in out.matrix.rows().iter().enumerate() {
        for (j, inst) in row.iter().enumerate() {
            let moved = original.cell(i, j).id != inst.id;
            matrix.push(vec![json!(i), json!(j), json!(inst.id), json!(inst.mz), json!(moved)]);
        }
    }

    let mut swaps = Table::new(
        "swaps",
        &[
            "swap", "row_a", "col_a", "instance_a", "row_b", "col_b", "instance_b", "overpopulated_before_a",
            "overpopulated_before_b", "overpopulated_after_a", "overpopulated_after_b", "excess_before_a",
            "excess_before_b", "excess_after_a", "excess_after_b",
        ],
    );
    let mut cells: Vec<Vec<_>> = original.rows().to_vec();
    for (k, s) in out.swaps.iter().enumerate() {
        let ia = cells[s.a.row][s.a.col].id.clone();
        let ib = cells[s.b.row][s.b.col].id.clone();
        let tmp = cells[s.a.row][s.a.col].clone();
        cells[s.a.row][s.a.col] = cells[s.b.row][s.b.col].clone();
        cells[s.b.row][s.b.col] = tmp;
        swaps.push(vec![
            json!(k),
            json!(s.a.row),
            json!(s.a.col),
            json!(ia),
            json!(s.b.row),
            json!(s.b.col),
            json!(ib),
            json!(s.overpopulated_before[0]),
            json!(s.overpopulated_before[1]),
            json!(s.overpopulated_after[0]),
            json!(s.overpopulated_after[1]),
            json!(s.excess_before[0]),
            json!(s.excess_before[1]),
            json!(s.excess_after[0]),
            json!(s.excess_after[1]),
        ]);
    }

    let assignment_map = topo.derive_assignment(&out.matrix)?;
    let mut assignment = Table::new("assignment", &["host", "mz", "row", "col", "segment"]);
    for (i, row) in out.matrix.rows().iter().enumerate() {
        for (j, inst) in row.iter().enumerate() {
            for seg in assignment_map.segments(&inst.id).into_iter().flatten() {
                assignment.push(vec![json!(inst.id), json!(inst.mz), json!(i), json!(j), json!(seg)]);
            }
        }
    }

    let zones: BTreeSet<&Mz> = out.matrix.instances().map(|i| &i.mz).collect();
    let drain: serde_json::Map<String, Value> = zones
        .into_iter()
        .map(|z| (z.to_string(), json!(live_replicas_after_zone_drain(&out.matrix, z))))
        .collect();
    let summary = json!({
        "replica_groups": original.replica_groups(),
        "instances_per_rg": original.num_rows(),
        "mz_count": original.mz_count(),
        "threshold": threshold(original.replica_groups(), original.mz_count()),
        "bad_rows_before": bad_rows(&original),
        "swaps": out.swaps.len(),
        "rows_modified": out.rows_modified(),
        "residual_bad_rows": out.residual_bad_rows,
        "best_effort": out.is_best_effort(),
        "live_replicas_after_zone_drain": drain,
    });
    Ok(Report {
        tables: vec![matrix, swaps, assignment],
        summary: into_map(summary),
        files: Vec::new(),
        violations,
    })
}

fn into_map(v: Value) -> serde_json::Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("summaries are objects"),
    }
}

fn rebalance_error(e: RebalanceError) -> Error {
    match e {
        RebalanceError::UnreachableThreshold { .. } => Error::field("rebalance.min_serving_replicas", e.to_string()),
        RebalanceError::ZeroBatch => Error::field("rebalance.progress_batch", e.to_string()),
        RebalanceError::UnknownHost(_) => Error::field("desired", e.to_string()),
        other => Error::Invariant(vec![other.to_string()]),
    }
}

/// Serving replicas of `targets` with the hosts of `drained` out of service.
fn serving(layout: &HostAssignment, drained: &BTreeSet<&InstanceId>, targets: &BTreeSet<SegmentId>) -> BTreeMap<SegmentId, usize> {
    let mut out: BTreeMap<SegmentId, usize> = targets.iter().map(|s| (s.clone(), 0)).collect();
    for (h, segs) in layout.iter() {
        if drained.contains(h) {
            continue;
        }
        for s in segs {
            if let Some(n) = out.get_mut(s) {
                *n += 1;
            }
        }
    }
    out
}

/// Per-step availability recomputed from the replayed layouts rather than
/// taken from the planner's own bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditLine {
    pub step: usize,
    pub action: StepAction,
    pub hosts: Vec<InstanceId>,
    pub drained: Vec<InstanceId>,
    pub during: BTreeMap<SegmentId, usize>,
    pub after: BTreeMap<SegmentId, usize>,
}

impl AuditLine {
    pub fn min_during(&self) -> Option<usize> {
        self.during.values().copied().min()
    }

    pub fn min_after(&self) -> Option<usize> {
        self.after.values().copied().min()
    }
}

pub fn audit_trace(trace: &RebalanceTrace, desired: &HostAssignment) -> Vec<AuditLine> {
    let targets = desired.all_segments();
    let mut before = trace.initial.clone();
    let mut out = Vec::with_capacity(trace.steps.len());
    for (k, step) in trace.steps.iter().enumerate() {
        let after = trace.replay(k + 1);
        let drained: BTreeSet<&InstanceId> = step.drained_hosts().collect();
        out.push(AuditLine {
            step: step.index,
            action: step.action,
            hosts: step.changes.iter().map(|c| c.host.clone()).collect(),
            drained: drained.iter().map(|h| (*h).clone()).collect(),
            during: serving(&before, &drained, &targets),
            after: serving(&after, &BTreeSet::new(), &targets),
        });
        before = after;
    }
    out
}

fn step_tables(steps: &[StepRecord]) -> Table {
    let mut t = Table::new(
        "rebalance_steps",
        &["step", "action", "host", "drained", "added", "removed", "bytes_added", "drain_ms", "download_ms"],
    );
    for s in steps {
        for c in &s.changes {
            t.push(vec![
                json!(s.index),
                json!(action_name(s.action)),
                json!(c.host),
                json!(c.drained),
                json!(ids(&c.added)),
                json!(ids(&c.removed)),
                json!(c.bytes_added),
                json!(c.drain_ms),
                json!(c.download_ms),
            ]);
        }
    }
    t
}

/// Plans the move from the topology's `current` layout to its `desired`
/// one (or, without `desired`, to the repaired mirrored layout).
pub fn rebalance(topo: &ClusterTopology) -> Result<Report> {
    let initial = topo
        .current()
        .ok_or_else(|| Error::field("current", "the rebalance subcommand needs the current layout"))?;
    let desired = match topo.desired() {
        Some(d) => d,
        None => topo.derive_assignment(&repair(&topo.matrix()?).matrix)?,
    };
    let config = topo.rebalance_config(&desired);
    let t = config.min_serving_replicas;
    let trace = run_rebalance(&initial, &desired, config).map_err(rebalance_error)?;
    let audit = audit_trace(&trace, &desired);

    let mut violations = Vec::new();
    for (line, step) in audit.iter().zip(&trace.steps) {
        if line.min_during().is_some_and(|m| m < t) || line.min_after().is_some_and(|m| m < t) {
            violations.push(format!("step {}: a segment fell below {t} serving replicas", line.step));
        }
        if line.during != step.serving_during || line.after != step.serving_after {
            violations.push(format!("step {}: planner replica counts disagree with the replayed layout", line.step));
        }
    }
    let mut goal = desired.clone();
    for h in initial.hosts() {
        goal.ensure_host(h.clone());
    }
    let reached = trace.replay(trace.steps.len()) == goal && trace.final_assignment == goal;
    if !reached {
        violations.push("the final layout differs from the desired one".into());
    }

    let mut audit_t = Table::new(
        "rebalance_audit",
        &["step", "action", "hosts", "drained", "min_serving_during", "min_serving_after", "threshold", "ok"],
    );
    let mut replicas = Table::new("rebalance_replicas", &["step", "segment", "serving_during", "serving_after"]);
    for line in &audit {
        let ok = line.min_during().unwrap_or(usize::MAX) >= t && line.min_after().unwrap_or(usize::MAX) >= t;
        audit_t.push(vec![
            json!(line.step),
            json!(action_name(line.action)),
            json!(ids(&line.hosts)),
            json!(ids(&line.drained)),
            json!(line.min_during()),
            json!(line.min_after()),
            json!(t),
            json!(ok),
        ]);
        for (seg, during) in &line.during {
            replicas.push(vec![json!(line.step), json!(seg), json!(during), json!(line.after[seg])]);
        }
    }
    let moved: usize = trace.steps.iter().flat_map(|s| &s.changes).map(|c| c.added.len()).sum();
    let summary = json!({
        "threshold": t,
        "hosts": goal.hosts().count(),
        "segments": desired.all_segments().len(),
        "steps": trace.steps.len(),
        "rebalance_steps": trace.steps.iter().filter(|s| s.action == StepAction::Rebalance).count(),
        "progress_steps": trace.steps.iter().filter(|s| s.action == StepAction::Progress).count(),
        "segments_added": moved,
        "min_serving_observed": audit.iter().flat_map(|l| l.min_during().into_iter().chain(l.min_after())).min(),
        "duration_ms": trace.steps.iter().map(StepRecord::duration_ms).sum::<f64>(),
        "reached_desired": reached,
        "violations": violations,
    });
    Ok(Report {
        tables: vec![step_tables(&trace.steps), audit_t, replicas],
        summary: into_map(summary),
        files: Vec::new(),
        violations,
    })
}

/// Adds the server budgets of `workloads` to the scenario, replacing
/// entries of the same name.
pub fn apply_workloads(scenario: &mut Scenario, workloads: &[WorkloadConfig]) {
    let spec = scenario.budgets.get_or_insert_with(BudgetSpec::default);
    for w in workloads {
        let Some(nc) = server_budget(w) else { continue };
        let entry = BudgetEntry {
            workload: w.workload_name.clone(),
            cpu_cost_ns: nc.cpu_cost_ns,
            memory_cost_bytes: nc.memory_cost_bytes,
        };
        match spec.workloads.iter_mut().find(|e| e.workload == entry.workload) {
            Some(e) => *e = entry,
            None => spec.workloads.push(entry),
        }
    }
}

fn run_sim(scenario: &Scenario) -> Result<MetricsSeries> {
    sim::run(scenario).map_err(|errs| Error::parse(errs.into_iter().map(|e| Problem::new(e.path, e.message)).collect()))
}

fn outcome_name(o: QueryOutcome) -> (&'static str, Option<u64>) {
    match o {
        QueryOutcome::Completed { latency_ticks } => ("completed", Some(latency_ticks)),
        QueryOutcome::Rejected => ("rejected", None),
        QueryOutcome::Unfinished => ("unfinished", None),
    }
}

fn budget_table(m: &MetricsSeries) -> Table {
    let mut t = Table::new(
        "budget_windows",
        &[
            "window_start_ms", "server", "workload", "partial", "budget_cpu_ns", "charged_cpu_ns", "true_cpu_ns",
            "budget_mem_bytes", "charged_mem_bytes", "true_mem_bytes", "admitted", "rejected", "cancelled",
        ],
    );
    for r in &m.budget_windows {
        t.push(vec![
            json!(r.window_start_ms),
            json!(m.server_names[r.server]),
            json!(r.workload),
            json!(r.partial),
            json!(r.budget_cpu_ns),
            json!(r.charged_cpu_ns),
            json!(r.true_cpu_ns),
            json!(r.budget_mem_bytes),
            json!(r.charged_mem_bytes),
            json!(r.true_mem_bytes),
            json!(r.admitted),
            json!(r.rejected),
            json!(r.cancelled),
        ]);
    }
    t
}

fn ratio(a: u64, b: u64) -> Value {
    if b == 0 {
        Value::Null
    } else {
        json!(a as f64 / b as f64)
    }
}

/// Per-workload totals over complete windows.
fn budget_summary(m: &MetricsSeries, violations: &mut Vec<String>) -> Vec<Value> {
    #[derive(Default)]
    struct Acc {
        windows: u64,
        budget: [u64; 2],
        charged: [u64; 2],
        truth: [u64; 2],
        admitted: u64,
        rejected: u64,
        cancelled: u64,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in &m.budget_windows {
        if r.charged_cpu_ns > r.budget_cpu_ns || r.charged_mem_bytes > r.budget_mem_bytes {
            violations.push(format!(
                "server {} charged {} beyond its budget in the window at {} ms",
                m.server_names[r.server], r.workload, r.window_start_ms
            ));
        }
        let a = acc.entry(&r.workload).or_default();
        a.admitted += r.admitted;
        a.rejected += r.rejected;
        a.cancelled += r.cancelled;
        if r.partial {
            continue;
        }
        a.windows += 1;
        a.budget[0] += r.budget_cpu_ns;
        a.budget[1] += r.budget_mem_bytes;
        a.charged[0] += r.charged_cpu_ns;
        a.charged[1] += r.charged_mem_bytes;
        a.truth[0] += r.true_cpu_ns;
        a.truth[1] += r.true_mem_bytes;
    }
    acc.into_iter()
        .map(|(w, a)| {
            json!({
                "workload": w,
                "full_windows": a.windows,
                "admitted": a.admitted,
                "rejected": a.rejected,
                "cancelled": a.cancelled,
                "cpu_charged_over_true": ratio(a.charged[0], a.truth[0]),
                "cpu_true_over_budget": ratio(a.truth[0], a.budget[0]),
                "mem_charged_over_true": ratio(a.charged[1], a.truth[1]),
                "mem_true_over_budget": ratio(a.truth[1], a.budget[1]),
            })
        })
        .collect()
}

/// Median latency of queries completed before the first degradation, times
/// 1.5, is the line a degraded query crosses.
fn prevention(m: &MetricsSeries) -> Value {
    let Some(start) = m.events.iter().map(|e| e.start_ms).reduce(f64::min) else {
        return Value::Null;
    };
    let mut before: Vec<f64> = m
        .queries
        .iter()
        .filter(|q| (q.arrival_tick as f64) * m.tick_ms < start)
        .filter_map(|q| match q.outcome {
            QueryOutcome::Completed { latency_ticks } => Some(latency_ticks as f64 * m.tick_ms),
            _ => None,
        })
        .collect();
    if before.is_empty() {
        return Value::Null;
    }
    before.sort_by(f64::total_cmp);
    let median = nearest_rank(&before, 0.5);
    let limit = 1.5 * median;
    json!({
        "baseline_median_ms": median,
        "threshold_ms": limit,
        "undegraded_rate": measure_degradation_prevention(m, limit),
    })
}

fn diversion(m: &MetricsSeries) -> Value {
    match measure_diversion(m, DiversionThresholds::default()) {
        Ok(d) => json!({
            "diversion_windows": d.diversion_windows,
            "recovery_ms": d.recovery_ms,
            "oscillation_index": d.oscillation_index,
            "degraded_share_while_diverted": d.degraded_share_while_diverted,
        }),
        Err(_) => Value::Null,
    }
}

fn sim_tables(m: &MetricsSeries) -> Vec<Table> {
    let mut servers = Table::new("servers", &["window", "start_ms", "server", "mss", "replica", "dispatched", "completed"]);
    for w in 0..m.windows() {
        for mss in 0..m.mss_count {
            for r in 0..m.replicas {
                let k = m.server_index(mss, r);
                servers.push(vec![
                    json!(w),
                    json!(w as f64 * m.window_ms),
                    json!(m.server_names[k]),
                    json!(mss),
                    json!(r),
                    json!(m.dispatched[w][k]),
                    json!(m.completed[w][k]),
                ]);
            }
        }
    }
    let mut latency = Table::new("latency", &["window", "start_ms", "completed", "p50_ms", "p90_ms", "p95_ms", "p99_ms"]);
    for (w, l) in m.latency.iter().enumerate() {
        latency.push(vec![
            json!(w),
            json!(w as f64 * m.window_ms),
            json!(l.completed),
            json!(l.p50_ms),
            json!(l.p90_ms),
            json!(l.p95_ms),
            json!(l.p99_ms),
        ]);
    }
    let mut queries = Table::new("queries", &["arrival_ms", "broker", "profile", "outcome", "latency_ms"]);
    for q in &m.queries {
        let (name, ticks) = outcome_name(q.outcome);
        queries.push(vec![
            json!(q.arrival_tick as f64 * m.tick_ms),
            json!(q.broker),
            json!(m.profile_labels[q.profile as usize]),
            json!(name),
            json!(ticks.map(|t| t as f64 * m.tick_ms)),
        ]);
    }
    let mut steps = Table::new("rebalance_steps", &["step", "action", "start_ms", "end_ms", "drained", "min_serving"]);
    for a in &m.rebalance_steps {
        steps.push(vec![
            json!(a.index),
            json!(action_name(a.action)),
            json!(a.start_ms),
            json!(a.end_ms),
            json!(a.drained.join(" ")),
            json!(a.min_serving),
        ]);
    }
    vec![servers, latency, queries, budget_table(m), steps]
}

fn sim_violations(m: &MetricsSeries) -> Vec<String> {
    let mut v = Vec::new();
    if m.dispatches_to_drained > 0 {
        v.push(format!("{} requests were dispatched to drained servers", m.dispatches_to_drained));
    }
    if let (Some(t), Some(min)) = (m.min_serving_threshold, m.min_serving_observed()) {
        if min < t {
            v.push(format!("a segment had {min} serving replicas, below the threshold {t}"));
        }
    }
    if let Some(e) = &m.rebalance_error {
        v.push(format!("rebalance failed: {e}"));
    }
    v
}

fn rebalance_summary(m: &MetricsSeries) -> Value {
    if m.min_serving_threshold.is_none() && m.rebalance_steps.is_empty() {
        return Value::Null;
    }
    json!({
        "threshold": m.min_serving_threshold,
        "steps": m.rebalance_steps.len(),
        "finished": m.rebalance_steps.iter().all(|a| a.end_ms.is_some()),
        "min_serving_observed": m.min_serving_observed(),
        "min_serving_per_step": m.rebalance_steps.iter().map(|a| a.min_serving).collect::<Vec<_>>(),
        "dispatches_to_drained": m.dispatches_to_drained,
        "error": m.rebalance_error,
    })
}

fn run_summary(s: &Scenario, m: &MetricsSeries) -> Value {
    let unfinished = m.queries.iter().filter(|q| q.outcome == QueryOutcome::Unfinished).count();
    json!({
        "seed": s.seed,
        "tick_ms": m.tick_ms,
        "duration_ms": s.duration_ms,
        "window_ms": m.window_ms,
        "windows": m.windows(),
        "servers": m.server_names.len(),
        "queries": m.queries.len(),
        "completed": m.completed_queries(),
        "rejected": m.rejected_queries(),
        "unfinished": unfinished,
        "unmatched_responses": m.unmatched_responses,
        "max_selection_work": m.max_selection_work,
    })
}

fn scenario_file(s: &Scenario) -> Vec<(String, String)> {
    // seeds beyond i64::MAX have no TOML form; the summary still records them
    match emit_scenario(s) {
        Ok(text) => vec![("scenario.toml".into(), text)],
        Err(_) => Vec::new(),
    }
}

/// Runs the simulator and reports every series.
pub fn simulate(scenario: &Scenario) -> Result<Report> {
    let m = run_sim(scenario)?;
    let mut violations = sim_violations(&m);
    let budgets = budget_summary(&m, &mut violations);
    let summary = json!({
        "run": run_summary(scenario, &m),
        "diversion": diversion(&m),
        "prevention": prevention(&m),
        "budgets": budgets,
        "rebalance": rebalance_summary(&m),
        "violations": violations,
    });
    Ok(Report {
        tables: sim_tables(&m),
        summary: into_map(summary),
        files: scenario_file(scenario),
        violations,
    })
}

fn warning_text(w: &PropagationWarning) -> String {
    match w {
        PropagationWarning::NoMatchingHost { workload, node_type } => {
            format!("workload {workload}: no {} host matches its propagation scheme", node_type_name(*node_type))
        }
    }
}

/// Budget enforcement report: per-window ledger state of every server,
/// totals per workload and window, and, given a topology, which hosts each
/// budget propagates to.
pub fn qwi_report(scenario: &Scenario, workloads: &[WorkloadConfig], topo: Option<&ClusterTopology>) -> Result<Report> {
    let m = run_sim(scenario)?;
    let mut violations = sim_violations(&m);
    let budgets = budget_summary(&m, &mut violations);

    let mut enforcement = Table::new(
        "enforcement",
        &[
            "window_start_ms", "workload", "servers", "partial", "budget_cpu_ns", "charged_cpu_ns", "true_cpu_ns",
            "budget_mem_bytes", "charged_mem_bytes", "true_mem_bytes", "admitted", "rejected", "cancelled",
        ],
    );
    let mut per: BTreeMap<(u64, &str), (f64, bool, Vec<u64>)> = BTreeMap::new();
    for r in &m.budget_windows {
        let key = (r.window_start_ms.to_bits(), r.workload.as_str());
        let e = per.entry(key).or_insert_with(|| (r.window_start_ms, false, vec![0; 10]));
        e.1 |= r.partial;
        let vals = [
            1,
            r.budget_cpu_ns,
            r.charged_cpu_ns,
            r.true_cpu_ns,
            r.budget_mem_bytes,
            r.charged_mem_bytes,
            r.true_mem_bytes,
            r.admitted,
            r.rejected,
            r.cancelled,
        ];
        for (a, v) in e.2.iter_mut().zip(vals) {
            *a += v;
        }
    }
    let mut rows: Vec<_> = per.into_iter().collect();
    rows.sort_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0 .1.cmp(b.0 .1)));
    for ((_, w), (start, partial, v)) in rows {
        let mut row = vec![json!(start), json!(w), json!(v[0]), json!(partial)];
        row.extend(v[1..].iter().map(|x| json!(x)));
        enforcement.push(row);
    }

    let mut propagation = Table::new("propagation", &["workload", "node_type", "host", "cpu_cost_ns", "memory_cost_bytes"]);
    let mut warnings = Vec::new();
    if let Some(topo) = topo {
        let hosts = topo.host_info();
        for w in workloads {
            for nc in &w.node_configs {
                let single = WorkloadConfig {
                    workload_name: w.workload_name.clone(),
                    node_configs: vec![nc.clone()],
                };
                let (targets, warns) = propagate_budgets(&single, &hosts);
                for (host, usage) in targets {
                    propagation.push(vec![
                        json!(w.workload_name),
                        json!(node_type_name(nc.node_type)),
                        json!(host),
                        json!(usage.cpu_ns),
                        json!(usage.mem_bytes),
                    ]);
                }
                warnings.extend(warns.iter().map(warning_text));
            }
        }
    }

    let summary = json!({
        "run": run_summary(scenario, &m),
        "workloads": workloads.iter().map(|w| w.workload_name.clone()).collect::<Vec<_>>(),
        "budgets": budgets,
        "propagation_warnings": warnings,
        "violations": violations,
    });
    Ok(Report {
        tables: vec![budget_table(&m), enforcement, propagation],
        summary: into_map(summary),
        files: scenario_file(scenario),
        violations,
    })
}
