//! Scenario generators and independent oracles shared by the property tests
//! and the acceptance harness.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use olapguard_core::cluster::{AssignmentMatrix, HostAssignment, Instance, InstanceId};
use olapguard_core::placement::{apply_downlift, apply_node_swap, apply_uplift, repair, RepairOutcome};
use olapguard_core::rebalance::{run_rebalance, RebalanceConfig, RebalanceTrace, StepAction};
use olapguard_core::selector::{Scorer, SelectionPolicy, TauRule};
use olapguard_core::sim::{
    ArrivalMode, BudgetEntry, BudgetSpec, DegradationEvent, Routing, Scenario, WorkloadProfile,
};
use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Placement

fn zone(i: usize) -> String {
    format!("z{i}")
}

/// Per-row multiplicity check written from the definition, not the library.
pub fn rows_good(m: &AssignmentMatrix, mz: usize) -> Result<(), String> {
    let r = m.replica_groups();
    let limit = r.div_ceil(mz);
    for (i, row) in m.rows().iter().enumerate() {
        let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in row {
            *hist.entry(inst.mz.as_str()).or_default() += 1;
        }
        if let Some((z, n)) = hist.iter().find(|(_, &n)| n > limit) {
            return Err(format!("row {i} holds {n} instances of {z}, limit {limit} (R={r}, MZ={mz})"));
        }
    }
    Ok(())
}

fn zone_index(inst: &Instance) -> usize {
    inst.mz.as_str()[1..].parse().unwrap()
}

fn zone_counts(m: &AssignmentMatrix, mz: usize) -> Vec<usize> {
    let mut c = vec![0; mz];
    for inst in m.instances() {
        c[zone_index(inst)] += 1;
    }
    c
}

fn balanced(c: &[usize]) -> bool {
    c.iter().max().unwrap() - c.iter().min().unwrap() <= 1
}

/// Checks one repair: swaps replay, every swap strictly lowers combined
/// excess without adding overpopulated zones to a row, and all rows end good.
fn check_repair(before: &AssignmentMatrix, out: &RepairOutcome, mz: usize) -> Result<(), String> {
    if out.replay(before) != out.matrix {
        return Err("swap list does not replay to the result".into());
    }
    for s in &out.swaps {
        let eb = s.excess_before[0] + s.excess_before[1];
        let ea = s.excess_after[0] + s.excess_after[1];
        if ea >= eb {
            return Err(format!("swap {s:?} did not reduce excess"));
        }
        if s.overpopulated_after[0] > s.overpopulated_before[0]
            || s.overpopulated_after[1] > s.overpopulated_before[1]
        {
            return Err(format!("swap {s:?} added an overpopulated zone"));
        }
    }
    if out.is_best_effort() {
        return Err(format!("best effort on a balanced pool: {:?}", out.residual_bad_rows));
    }
    rows_good(&out.matrix, mz)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LifecycleStats {
    pub repairs: usize,
    pub swaps: usize,
}

/// One random lifecycle: scrambled start, then uplifts, downlifts and node
/// swaps, all keeping the zone counts balanced. Every repair is checked.
pub fn lifecycle(seed: u64, ops: usize) -> Result<LifecycleStats, String> {
    let mut rng = rng(seed);
    let mz = rng.random_range(2..=5);
    let mut r = rng.random_range(1..=6);
    let n = rng.random_range(1..=8);
    let mut next_id = 0usize;
    let mut fresh = |z: usize| {
        next_id += 1;
        Instance::new(format!("h{next_id}"), zone(z))
    };

    let mut cells: Vec<Instance> = (0..n * r).map(|i| fresh(i % mz)).collect();
    cells.shuffle(&mut rng);
    let rows: Vec<Vec<Instance>> = cells.chunks(r).map(|c| c.to_vec()).collect();
    let mut m = AssignmentMatrix::from_rows(rows, mz).map_err(|e| e.to_string())?;
    let mut stats = LifecycleStats::default();
    let ctx = |what: &str, r: usize, e: String| format!("seed {seed} {what} (R={r}, N={n}, MZ={mz}): {e}");

    let out = repair(&m);
    check_repair(&m, &out, mz).map_err(|e| ctx("initial repair", r, e))?;
    stats.repairs += 1;
    stats.swaps += out.swaps.len();
    m = out.matrix;

    for _ in 0..ops {
        let counts = zone_counts(&m, mz);
        let op = rng.random_range(0..3);
        let (what, pre, out) = if op == 0 && r < 6 {
            let mut c = counts.clone();
            let mut zs = Vec::with_capacity(n);
            for _ in 0..n {
                let lo = *c.iter().min().unwrap();
                let choices: Vec<usize> = (0..mz).filter(|&z| c[z] == lo).collect();
                let z = *choices.choose(&mut rng).unwrap();
                c[z] += 1;
                zs.push(z);
            }
            zs.shuffle(&mut rng);
            let new: Vec<Instance> = zs.into_iter().map(&mut fresh).collect();
            let mut rows = m.rows().to_vec();
            for (row, inst) in rows.iter_mut().zip(&new) {
                row.push(inst.clone());
            }
            r += 1;
            let out = apply_uplift(&m, &new).map_err(|e| e.to_string())?;
            ("uplift", rows, out)
        } else if op == 1 && r > 1 {
            // one instance per row, taken from the fullest zone present
            let mut c = counts.clone();
            let mut removed = Vec::with_capacity(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for i in order {
                let row = m.row(i);
                let best = row.iter().map(|x| c[zone_index(x)]).max().unwrap();
                let pick: Vec<&Instance> = row.iter().filter(|x| c[zone_index(x)] == best).collect();
                let inst = *pick.choose(&mut rng).unwrap();
                c[zone_index(inst)] -= 1;
                removed.push(inst.id.clone());
            }
            if !balanced(&c) {
                continue;
            }
            let rows: Vec<Vec<Instance>> = m
                .rows()
                .iter()
                .map(|row| row.iter().filter(|x| !removed.contains(&x.id)).cloned().collect())
                .collect();
            r -= 1;
            let (_, out) = apply_downlift(&m, &removed, &[]).map_err(|e| e.to_string())?;
            ("downlift", rows, out)
        } else {
            let row = rng.random_range(0..n);
            let col = rng.random_range(0..r);
            let old = m.cell(row, col).clone();
            let oz = zone_index(&old);
            let options: Vec<usize> = (0..mz)
                .filter(|&z| {
                    let mut c = counts.clone();
                    c[oz] -= 1;
                    c[z] += 1;
                    balanced(&c)
                })
                .collect();
            let inst = fresh(*options.choose(&mut rng).unwrap());
            let mut rows = m.rows().to_vec();
            rows[row][col] = inst.clone();
            let out = apply_node_swap(&m, &old.id, inst).map_err(|e| e.to_string())?;
            ("node swap", rows, out)
        };
        let pre = AssignmentMatrix::from_rows(pre, mz).map_err(|e| e.to_string())?;
        check_repair(&pre, &out, mz).map_err(|e| ctx(what, r, e))?;
        if !balanced(&zone_counts(&out.matrix, mz)) {
            return Err(ctx(what, r, "generator produced an unbalanced pool".into()));
        }
        stats.repairs += 1;
        stats.swaps += out.swaps.len();
        m = out.matrix;
    }
    Ok(stats)
}

/// Brute-force minimum number of rows whose zone multiset must change to
/// reach an all-good layout with the same global zone counts, or `None`
/// when no such layout exists.
pub fn min_rows_to_change(rows: &[Vec<usize>], mz: usize) -> Option<usize> {
    let r = rows[0].len();
    let t = r.div_ceil(mz);
    let hist: Vec<Vec<usize>> = rows
        .iter()
        .map(|row| {
            let mut h = vec![0; mz];
            for &z in row {
                h[z] += 1;
            }
            h
        })
        .collect();
    let mut total = vec![0; mz];
    for h in &hist {
        for z in 0..mz {
            total[z] += h[z];
        }
    }
    // every good multiset of size r
    let mut good = Vec::new();
    let mut cur = vec![0; mz];
    fn rec(z: usize, left: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if z + 1 == cur.len() {
            if left <= t {
                cur[z] = left;
                out.push(cur.clone());
            }
            return;
        }
        for k in 0..=left.min(t) {
            cur[z] = k;
            rec(z + 1, left - k, t, cur, out);
        }
    }
    rec(0, r, t, &mut cur, &mut good);

    let n = rows.len();
    let mut best = None;
    let mut pick = vec![0usize; n];
    loop {
        let mut sum = vec![0; mz];
        for &g in &pick {
            for z in 0..mz {
                sum[z] += good[g][z];
            }
        }
        if sum == total {
            let d = (0..n).filter(|&i| good[pick[i]] != hist[i]).count();
            best = Some(best.map_or(d, |b: usize| b.min(d)));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            pick[i] += 1;
            if pick[i] < good.len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MinimalityStats {
    pub checked: usize,
    pub infeasible: usize,
    pub mismatches: usize,
}

/// Every zone labelling of an `n x r` matrix over three zones.
pub fn exhaustive_minimality(n: usize, r: usize) -> (MinimalityStats, Vec<String>) {
    const MZ: usize = 3;
    let cells = n * r;
    let mut stats = MinimalityStats::default();
    let mut failures = Vec::new();
    for code in 0..MZ.pow(cells as u32) {
        let mut c = code;
        let zones: Vec<usize> = (0..cells)
            .map(|_| {
                let z = c % MZ;
                c /= MZ;
                z
            })
            .collect();
        let rows: Vec<Vec<usize>> = zones.chunks(r).map(|c| c.to_vec()).collect();
        let Some(best) = min_rows_to_change(&rows, MZ) else {
            stats.infeasible += 1;
            continue;
        };
        let m = AssignmentMatrix::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, &z)| Instance::new(format!("i{i}_{j}"), zone(z)))
                        .collect()
                })
                .collect(),
            MZ,
        )
        .expect("well-formed");
        let out = repair(&m);
        stats.checked += 1;
        let got = out.rows_modified().len();
        if out.is_best_effort() || got != best || rows_good(&out.matrix, MZ).is_err() {
            stats.mismatches += 1;
            if failures.len() < 5 {
                failures.push(format!("{rows:?}: repair touched {got} rows, minimum {best}"));
            }
        }
    }
    (stats, failures)
}

// ---------------------------------------------------------------------------
// Rebalance

pub struct RebalanceCase {
    pub replicas: usize,
    pub initial: HostAssignment,
    pub desired: HostAssignment,
    pub config: RebalanceConfig,
}

fn spread(rng: &mut StdRng, hosts: &[InstanceId], segments: usize, r: usize) -> HostAssignment {
    let mut out = HostAssignment::new();
    for h in hosts {
        out.ensure_host(h.clone());
    }
    for s in 0..segments {
        for h in hosts.choose_multiple(rng, r) {
            out.insert(h.clone(), format!("seg{s:03}"));
        }
    }
    out
}

/// Random table move: the same segments, `replicas` copies each, laid out
/// over an initial and a desired host set that overlap partially.
pub fn rebalance_case(seed: u64) -> RebalanceCase {
    let mut rng = rng(seed);
    let r = rng.random_range(2..=3);
    let total = rng.random_range(r + 1..=12);
    let segments = rng.random_range(1..=200);
    let hosts: Vec<InstanceId> = (0..total).map(|i| InstanceId::new(format!("h{i:02}"))).collect();
    // some hosts only exist before or after the move
    let leaving = rng.random_range(0..=(total - r - 1).min(2));
    let joining = rng.random_range(0..=(total - r - 1 - leaving).min(2));
    let before: Vec<InstanceId> = hosts[..total - joining].to_vec();
    let after: Vec<InstanceId> = hosts[leaving..].to_vec();
    let initial = spread(&mut rng, &before, segments, r);
    let mut desired = spread(&mut rng, &after, segments, r);
    for h in &before {
        desired.ensure_host(h.clone());
    }
    let batch = rng.random_range(1..=10);
    RebalanceCase {
        replicas: r,
        initial,
        desired,
        config: RebalanceConfig::new(r - 1, batch),
    }
}

/// Replays `trace` and recounts serving replicas from scratch.
pub fn check_trace(case: &RebalanceCase, trace: &RebalanceTrace) -> Result<(), String> {
    let t = case.config.min_serving_replicas;
    let targets = case.desired.all_segments();
    let serving = |a: &HostAssignment, down: &BTreeSet<&InstanceId>| {
        let mut n: BTreeMap<_, usize> = targets.iter().map(|s| (s.clone(), 0)).collect();
        for (h, segs) in a.iter() {
            if down.contains(h) {
                continue;
            }
            for s in segs {
                if let Some(c) = n.get_mut(s) {
                    *c += 1;
                }
            }
        }
        n
    };
    let none = BTreeSet::new();
    let mut cur = case.initial.clone();
    for (k, step) in trace.steps.iter().enumerate() {
        let down: BTreeSet<&InstanceId> = step.drained_hosts().collect();
        if let Some((s, n)) = serving(&cur, &down).into_iter().find(|(_, n)| *n < t) {
            return Err(format!("step {k}: {s} served by {n} < {t} replicas while draining"));
        }
        for ch in &step.changes {
            if ch.added.len() > case.config.progress_batch && !ch.drained {
                return Err(format!("step {k}: {} got {} segments without draining", ch.host, ch.added.len()));
            }
            if step.action == StepAction::Progress && !ch.removed.is_empty() {
                return Err(format!("step {k}: progress step removed segments"));
            }
        }
        for ch in &step.changes {
            let segs = cur.0.entry(ch.host.clone()).or_default();
            for s in &ch.removed {
                segs.remove(s);
            }
            segs.extend(ch.added.iter().cloned());
        }
        if let Some((s, n)) = serving(&cur, &none).into_iter().find(|(_, n)| *n < t) {
            return Err(format!("step {k}: {s} served by {n} < {t} replicas after the step"));
        }
        for (h, segs) in cur.iter() {
            let init = case.initial.segments(h).cloned().unwrap_or_default();
            let want = case.desired.segments(h).cloned().unwrap_or_default();
            if segs.iter().any(|s| !init.contains(s) && !want.contains(s)) {
                return Err(format!("step {k}: {h} holds a segment it neither had nor needs"));
            }
        }
    }
    if trace.final_assignment != case.desired {
        return Err("final assignment differs from the desired one".into());
    }
    let bound = case.initial.hosts().chain(case.desired.hosts()).collect::<BTreeSet<_>>().len()
        + case
            .desired
            .iter()
            .map(|(h, want)| {
                let init = case.initial.segments(h).cloned().unwrap_or_default();
                want.difference(&init).count()
            })
            .sum::<usize>()
            .div_ceil(case.config.progress_batch);
    if trace.steps.len() > bound {
        return Err(format!("{} steps exceed the bound {bound}", trace.steps.len()));
    }
    Ok(())
}

/// Runs the case, checks it, then restarts from `resumes` random truncation
/// points and requires the same final assignment each time.
pub fn rebalance_with_resumes(seed: u64, resumes: usize) -> Result<usize, String> {
    let case = rebalance_case(seed);
    let trace = run_rebalance(&case.initial, &case.desired, case.config.clone())
        .map_err(|e| format!("seed {seed}: {e}"))?;
    check_trace(&case, &trace).map_err(|e| format!("seed {seed}: {e}"))?;
    let mut rng = rng(seed ^ 0x5eed);
    for _ in 0..resumes {
        let cut = rng.random_range(0..=trace.steps.len());
        let midway = trace.replay(cut);
        let rest = run_rebalance(&midway, &case.desired, case.config.clone())
            .map_err(|e| format!("seed {seed} resume at {cut}: {e}"))?;
        if rest.final_assignment != trace.final_assignment {
            return Err(format!("seed {seed}: resume at step {cut} ends elsewhere"));
        }
    }
    Ok(trace.steps.len())
}

// ---------------------------------------------------------------------------
// Simulation scenarios

pub const DEGRADED_REPLICA: usize = 4;

/// 1500 QPS of 1.35 ms queries, 3 brokers, 5 replicas; the last replica
/// runs at p = 0.4 from 2 s to 8 s. Poisson arrivals: with a fixed arrival
/// comb and fixed service times every argmin selector locks onto a static
/// subset of servers and never probes the others again.
pub fn selector_scenario(policy: SelectionPolicy, seed: u64) -> Scenario {
    let mut s = Scenario {
        seed,
        duration_ms: 16_000.0,
        arrivals: ArrivalMode::Poisson,
        ..Scenario::default()
    };
    s.workloads.push(WorkloadProfile::new("high-qps", 1500.0, 1.35));
    s.events.push(DegradationEvent {
        mss: 0,
        replica: DEGRADED_REPLICA,
        start_ms: 2_000.0,
        end_ms: 8_000.0,
        p: 0.4,
    });
    s.policy.routing = Routing::Mss(policy);
    s
}

pub fn softmax_hybrid() -> SelectionPolicy {
    SelectionPolicy::softmax(Scorer::Hybrid, TauRule::default())
}

/// Four mirrored server sets over three replica groups, one slow server.
pub fn prevention_scenario(routing: Routing, seed: u64) -> Scenario {
    let mut s = Scenario {
        seed,
        duration_ms: 10_000.0,
        ..Scenario::default()
    };
    s.topology.replicas = 3;
    s.topology.mss_count = 4;
    s.workloads.push(WorkloadProfile::new("fanout", 600.0, 1.35));
    s.events.push(DegradationEvent {
        mss: 1,
        replica: 2,
        start_ms: 2_000.0,
        end_ms: 8_000.0,
        p: 0.4,
    });
    s.policy.routing = routing;
    s
}

/// One budgeted workload spread round-robin over five servers.
pub fn budget_scenario(qps: f64, window_ms: f64, duration_ms: f64, budget: Option<(u64, u64)>) -> Scenario {
    let mut s = Scenario {
        seed: 3,
        duration_ms,
        ..Scenario::default()
    };
    s.policy.routing = Routing::Mss(SelectionPolicy::ROUND_ROBIN);
    let mut w = WorkloadProfile::new("tenant", qps, 1.35);
    w.workload = Some("tenant".into());
    s.workloads.push(w);
    let (cpu, mem) = budget.unwrap_or((1 << 43, 1 << 43));
    s.budgets = Some(BudgetSpec {
        window_ms,
        workloads: vec![BudgetEntry {
            workload: "tenant".into(),
            cpu_cost_ns: cpu,
            memory_cost_bytes: mem,
        }],
        ..BudgetSpec::default()
    });
    s
}
