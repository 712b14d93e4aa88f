use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::metrics::{
    nearest_rank, BudgetWindowRecord, MetricsSeries, QueryOutcome, QueryRecord,
    RebalanceAnnotation, WindowLatency,
};
use super::{ArrivalMode, FieldError, RebalancePlan, Routing, Scenario};
use crate::budget::{BudgetLedger, Enforcement, QueryReservation, Resource, Usage};
use crate::cluster::{
    derive_host_assignment, AssignmentMatrix, HostAssignment, Instance, InstanceId, SegmentId,
    SegmentMap,
};
use crate::rebalance::Rebalancer;
use crate::rng::{substream, Stream};
use crate::selector::{unit_f64, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SubStatus {
    InFlight,
    Done,
    Failed,
}

/// One server's share of a query.
#[derive(Debug)]
struct Sub {
    query: u32,
    server: u32,
    dispatch_tick: u64,
    tasks_left: u32,
    status: SubStatus,
    reservation: Option<QueryReservation>,
}

#[derive(Debug, Clone, Copy)]
struct Query {
    arrival_tick: u64,
    broker: u32,
    profile: u32,
    pending: u32,
    failed: bool,
    done: bool,
    latency_ticks: u64,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    sub: u32,
    remaining: u32,
    uncharged: u32,
}

#[derive(Debug)]
struct Server {
    queue: VecDeque<(u32, u32)>,
    threads: Vec<Option<Running>>,
    down: bool,
    requests_in_transit: u32,
    events: Vec<(u64, u64, f64)>,
}

impl Server {
    fn idle(&self) -> bool {
        self.queue.is_empty() && self.threads.iter().all(Option::is_none) && self.requests_in_transit == 0
    }

    fn progress_probability(&self, now: u64) -> f64 {
        self.events
            .iter()
            .filter(|(s, e, _)| now >= *s && now < *e)
            .map(|(_, _, p)| *p)
            .fold(1.0, f64::min)
    }
}

#[derive(Debug)]
struct BudgetRuntime {
    ledgers: Vec<BudgetLedger>,
    names: Vec<String>,
    provisional: Usage,
    acct_ticks: u64,
    window_ticks: u64,
    window_start_tick: u64,
    true_usage: Vec<Vec<Usage>>,
    admitted: Vec<Vec<u64>>,
    rejected: Vec<Vec<u64>>,
    cancelled: Vec<Vec<u64>>,
}

#[derive(Debug)]
struct ActiveStep {
    annotation: usize,
    min_end_tick: u64,
    drained: Vec<usize>,
}

#[derive(Debug)]
struct RebalanceRuntime {
    driver: Rebalancer,
    start_tick: u64,
    active: Option<ActiveStep>,
    finished: bool,
    hosts: BTreeMap<InstanceId, usize>,
    targets: BTreeSet<SegmentId>,
}

/// Where every injected query currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Census {
    pub injected: u64,
    pub queued: u64,
    pub executing: u64,
    pub in_transit: u64,
    pub completed: u64,
    pub rejected: u64,
}

impl Census {
    pub fn accounted(&self) -> u64 {
        self.queued + self.executing + self.in_transit + self.completed + self.rejected
    }
}

/// Mutable simulation state; advance with [`SimState::tick`].
#[derive(Debug)]
pub struct SimState {
    scenario: Scenario,
    clock: u64,
    end_tick: u64,
    window_ticks: u64,
    tick_ns: u64,
    delay: u64,
    units: Vec<u32>,
    cost: Vec<Usage>,
    budget_slot: Vec<Option<usize>>,
    accrued: Vec<f64>,
    next_broker: u32,
    rows: Vec<Vec<u32>>,
    servers: Vec<Server>,
    selectors: Vec<Selector<u32>>,
    selection_rngs: Vec<ChaCha8Rng>,
    arrival_rng: ChaCha8Rng,
    degradation_rng: ChaCha8Rng,
    queries: Vec<Query>,
    subs: Vec<Sub>,
    to_server: VecDeque<(u64, u32)>,
    to_broker: VecDeque<(u64, u32, bool)>,
    completed_count: u64,
    rejected_count: u64,
    budgets: Option<BudgetRuntime>,
    rebalance: Option<RebalanceRuntime>,
    series: MetricsSeries,
    window_latencies: Vec<Vec<f64>>,
}

fn layout(s: &Scenario) -> (AssignmentMatrix, SegmentMap) {
    let t = &s.topology;
    let rows = (0..t.mss_count)
        .map(|m| {
            (0..t.replicas)
                .map(|r| Instance::new(Scenario::server_name(m, r), format!("z{r}")))
                .collect()
        })
        .collect();
    let matrix = AssignmentMatrix::from_rows(rows, t.replicas).expect("grid is rectangular");
    let segs = SegmentMap::round_robin(
        (0..t.mss_count * t.segments_per_mss).map(|i| format!("seg{i}")),
        t.mss_count,
    );
    (matrix, segs)
}

fn desired_assignment(s: &Scenario, plan: &RebalancePlan) -> Result<HostAssignment, String> {
    let (matrix, segs) = layout(s);
    match plan {
        RebalancePlan::ShiftSegments { count } => {
            let rows = s.topology.mss_count;
            let mut moved = SegmentMap::new();
            let mut seen = vec![0usize; rows];
            // round-robin order: segment i sits on row i % rows
            for i in 0..rows * s.topology.segments_per_mss {
                let seg = SegmentId::new(format!("seg{i}"));
                let row = segs.row_of(&seg).expect("segment was mapped");
                let target = if seen[row] < *count { (row + 1) % rows } else { row };
                seen[row] += 1;
                moved.insert(seg, target);
            }
            derive_host_assignment(&matrix, &moved).map_err(|e| format!("{e}"))
        }
        RebalancePlan::Explicit { desired } => {
            let mut out = HostAssignment::new();
            for inst in matrix.instances() {
                out.ensure_host(inst.id.clone());
            }
            for (host, list) in desired {
                let id = InstanceId::new(host.as_str());
                if matrix.position(&id).is_none() {
                    return Err(format!("unknown server {host} in rebalance plan"));
                }
                for seg in list {
                    out.insert(id.clone(), seg.as_str());
                }
            }
            Ok(out)
        }
    }
}

impl SimState {
    pub fn new(scenario: &Scenario) -> Result<Self, Vec<FieldError>> {
        scenario.validate()?;
        let s = scenario.clone();
        let t = &s.topology;
        let n = s.server_count();
        let end_tick = s.ticks(s.duration_ms);
        let window_ticks = s.ticks(s.metrics_window_ms).max(1);
        let windows = end_tick.div_ceil(window_ticks) as usize;
        let tick_ns = libm::round(s.tick_ms * 1e6).max(1.0) as u64;

        let mut servers: Vec<Server> = (0..n)
            .map(|_| Server {
                queue: VecDeque::new(),
                threads: vec![None; t.threads_per_server],
                down: false,
                requests_in_transit: 0,
                events: Vec::new(),
            })
            .collect();
        for e in &s.events {
            servers[e.mss * t.replicas + e.replica].events.push((
                s.ticks(e.start_ms),
                s.ticks(e.end_ms),
                e.p,
            ));
        }
        let rows = (0..t.mss_count)
            .map(|m| (0..t.replicas).map(|r| (m * t.replicas + r) as u32).collect())
            .collect();
        let selectors = (0..t.brokers)
            .map(|_| {
                let mut sel = Selector::new(s.policy.selector);
                for k in 0..n as u32 {
                    sel.register_server(k, s.policy.selector.latency_prior_ms);
                }
                sel
            })
            .collect();
        let selection_rngs = (0..t.brokers)
            .map(|b| substream(s.seed, Stream::Selection(b as u32)))
            .collect();

        let units = s.workloads.iter().map(|w| w.units(s.tick_ms)).collect();
        let cost = s
            .workloads
            .iter()
            .map(|w| Usage::new(w.cpu_ns_per_unit.unwrap_or(tick_ns), w.mem_bytes_per_unit))
            .collect();

        let mut budget_slot = vec![None; s.workloads.len()];
        let budgets = s.budgets.as_ref().map(|b| {
            let window_ns = libm::round(b.window_ms * 1e6).max(1.0) as u64;
            let names: Vec<String> = b.workloads.iter().map(|w| w.workload.clone()).collect();
            let index: BTreeMap<String, usize> =
                names.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
            let ledgers = (0..n)
                .map(|_| {
                    let mut l = BudgetLedger::new(window_ns).expect("validated").strict(b.strict);
                    for w in &b.workloads {
                        l.add_or_update_workload(
                            &w.workload,
                            Usage::new(w.cpu_cost_ns, w.memory_cost_bytes),
                            0,
                        )
                        .expect("validated");
                    }
                    l
                })
                .collect();
            for (slot, w) in budget_slot.iter_mut().zip(&s.workloads) {
                *slot = w.workload.as_ref().and_then(|name| index.get(name).copied());
            }
            let k = names.len();
            BudgetRuntime {
                ledgers,
                names,
                provisional: Usage::new(b.provisional_cpu_ns, b.provisional_mem_bytes),
                acct_ticks: s.ticks(b.accounting_interval_ms).max(1),
                window_ticks: s.ticks(b.window_ms).max(1),
                window_start_tick: 0,
                true_usage: vec![vec![Usage::ZERO; k]; n],
                admitted: vec![vec![0; k]; n],
                rejected: vec![vec![0; k]; n],
                cancelled: vec![vec![0; k]; n],
            }
        });

        let mut series = MetricsSeries {
            tick_ms: s.tick_ms,
            window_ms: window_ticks as f64 * s.tick_ms,
            replicas: t.replicas,
            mss_count: t.mss_count,
            server_names: (0..t.mss_count)
                .flat_map(|m| (0..t.replicas).map(move |r| Scenario::server_name(m, r)))
                .collect(),
            dispatched: vec![vec![0; n]; windows],
            completed: vec![vec![0; n]; windows],
            latency: Vec::new(),
            queries: Vec::new(),
            profile_labels: s.workloads.iter().map(|w| w.label.clone()).collect(),
            events: s.events.clone(),
            budget_windows: Vec::new(),
            rebalance_steps: Vec::new(),
            rebalance_error: None,
            min_serving_threshold: None,
            dispatches_to_drained: 0,
            max_selection_work: 0,
            unmatched_responses: 0,
        };

        let rebalance = match &s.rebalance {
            None => None,
            Some(spec) => {
                let (matrix, segs) = layout(&s);
                let initial = derive_host_assignment(&matrix, &segs).expect("layout is consistent");
                let config = spec.config(t.replicas);
                series.min_serving_threshold = Some(config.min_serving_replicas);
                match desired_assignment(&s, &spec.plan)
                    .and_then(|d| Rebalancer::new(&initial, &d, config).map(|r| (r, d)).map_err(|e| format!("{e}")))
                {
                    Ok((driver, desired)) => Some(RebalanceRuntime {
                        driver,
                        start_tick: s.ticks(spec.start_ms),
                        active: None,
                        finished: false,
                        hosts: matrix
                            .instances()
                            .map(|i| {
                                let (m, r) = matrix.position(&i.id).expect("instance is in matrix");
                                (i.id.clone(), m * t.replicas + r)
                            })
                            .collect(),
                        targets: desired.all_segments(),
                    }),
                    Err(e) => {
                        series.rebalance_error = Some(e);
                        None
                    }
                }
            }
        };

        let delay = u64::from(t.message_delay_ticks);
        let accrued = vec![0.0; s.workloads.len()];
        Ok(Self {
            clock: 0,
            end_tick,
            window_ticks,
            tick_ns,
            delay,
            units,
            cost,
            budget_slot,
            accrued,
            next_broker: 0,
            rows,
            servers,
            selectors,
            selection_rngs,
            arrival_rng: substream(s.seed, Stream::Arrivals),
            degradation_rng: substream(s.seed, Stream::Degradation),
            queries: Vec::new(),
            subs: Vec::new(),
            to_server: VecDeque::new(),
            to_broker: VecDeque::new(),
            completed_count: 0,
            rejected_count: 0,
            budgets,
            rebalance,
            series,
            window_latencies: vec![Vec::new(); windows],
            scenario: s,
        })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn is_finished(&self) -> bool {
        self.clock >= self.end_tick
    }

    /// Arrival tick of every injected query, in injection order.
    pub fn arrival_log(&self) -> Vec<u64> {
        self.queries.iter().map(|q| q.arrival_tick).collect()
    }

    fn window(&self, tick: u64) -> usize {
        let w = (tick / self.window_ticks) as usize;
        w.min(self.series.dispatched.len().saturating_sub(1))
    }

    /// Advances one tick: arrivals and dispatch, server work, responses.
    pub fn tick(&mut self) {
        let now = self.clock;
        self.close_budget_window(now, false);
        self.drive_rebalance(now);
        self.arrivals(now);
        self.serve(now);
        self.receive(now);
        self.clock += 1;
    }

    fn arrivals(&mut self, now: u64) {
        for p in 0..self.scenario.workloads.len() {
            let lambda = self.scenario.workloads[p].qps * self.scenario.tick_ms / 1000.0;
            let n = match self.scenario.arrivals {
                ArrivalMode::Deterministic => {
                    self.accrued[p] += lambda;
                    let n = libm::floor(self.accrued[p] + 1e-9);
                    self.accrued[p] -= n;
                    n as u64
                }
                ArrivalMode::Poisson => {
                    let limit = libm::exp(-lambda);
                    let mut k = 0;
                    let mut prod = unit_f64(&mut self.arrival_rng);
                    while prod > limit {
                        k += 1;
                        prod *= unit_f64(&mut self.arrival_rng);
                    }
                    k
                }
            };
            for _ in 0..n {
                self.inject(p as u32, now);
            }
        }
    }

    fn inject(&mut self, profile: u32, now: u64) {
        let qid = self.queries.len() as u32;
        let broker = self.next_broker;
        self.next_broker = (self.next_broker + 1) % self.scenario.topology.brokers as u32;
        let b = broker as usize;
        let replicas = self.scenario.topology.replicas;
        let mut targets: Vec<u32> = Vec::with_capacity(self.rows.len());
        let servers = &self.servers;
        let rng = &mut self.selection_rngs[b];
        match self.scenario.policy.routing {
            Routing::ReplicaGroupRandom => {
                let rg = (rng.next_u64_mod(replicas as u64)) as usize;
                for row in &self.rows {
                    let pick = (0..replicas)
                        .map(|k| row[(rg + k) % replicas])
                        .find(|&sv| !servers[sv as usize].down);
                    match pick {
                        Some(sv) => targets.push(sv),
                        None => break,
                    }
                }
            }
            Routing::Mss(policy) => {
                let sel = &mut self.selectors[b];
                for (m, row) in self.rows.iter().enumerate() {
                    match sel.select(m, row, |k| !servers[*k as usize].down, &policy, rng) {
                        Ok(c) => {
                            self.series.max_selection_work = self.series.max_selection_work.max(c.evaluated);
                            targets.push(row[c.index]);
                        }
                        Err(_) => break,
                    }
                }
            }
        }
        let failed = targets.len() < self.rows.len();
        self.queries.push(Query {
            arrival_tick: now,
            broker,
            profile,
            pending: if failed { 0 } else { targets.len() as u32 },
            failed,
            done: failed,
            latency_ticks: 0,
        });
        if failed {
            self.rejected_count += 1;
            return;
        }
        let w = self.window(now);
        for sv in targets {
            let sid = self.subs.len() as u32;
            self.subs.push(Sub {
                query: qid,
                server: sv,
                dispatch_tick: now,
                tasks_left: 0,
                status: SubStatus::InFlight,
                reservation: None,
            });
            self.selectors[b].on_dispatch(&sv);
            if self.servers[sv as usize].down {
                self.series.dispatches_to_drained += 1;
            }
            self.servers[sv as usize].requests_in_transit += 1;
            self.to_server.push_back((now + self.delay, sid));
            self.series.dispatched[w][sv as usize] += 1;
        }
    }

    fn respond(&mut self, sid: u32, ok: bool, now: u64) {
        self.to_broker.push_back((now + self.delay, sid, ok));
    }

    fn budget_slot_of(&self, sid: u32) -> Option<usize> {
        let q = self.subs[sid as usize].query as usize;
        self.budget_slot[self.queries[q].profile as usize]
    }

    fn cancel(&mut self, sid: u32, now: u64) {
        let sub = &mut self.subs[sid as usize];
        if sub.status != SubStatus::InFlight {
            return;
        }
        sub.status = SubStatus::Failed;
        let server = sub.server as usize;
        let res = sub.reservation.take();
        let slot = self.budget_slot_of(sid);
        if let Some(b) = &mut self.budgets {
            if let Some(r) = res {
                r.release(&b.ledgers[server], now * self.tick_ns);
            }
            if let Some(k) = slot {
                b.cancelled[server][k] += 1;
            }
        }
        self.respond(sid, false, now);
    }

    /// Charges `units` of work of `sid`; returns false if the query was
    /// cancelled for lack of budget.
    fn charge(&mut self, sid: u32, units: u32, now: u64) -> bool {
        if units == 0 || self.budgets.is_none() {
            return true;
        }
        let q = self.subs[sid as usize].query as usize;
        let c = self.cost[self.queries[q].profile as usize];
        let delta = Usage::new(c.cpu_ns * u64::from(units), c.mem_bytes * u64::from(units));
        let server = self.subs[sid as usize].server as usize;
        let b = self.budgets.as_ref().expect("checked above");
        let out = match &mut self.subs[sid as usize].reservation {
            Some(r) => r.charge(&b.ledgers[server], delta, now * self.tick_ns),
            None => Enforcement::Continue,
        };
        if out == Enforcement::Continue {
            true
        } else {
            self.cancel(sid, now);
            false
        }
    }

    fn finish_sub(&mut self, sid: u32, now: u64) {
        let sub = &mut self.subs[sid as usize];
        if sub.status != SubStatus::InFlight {
            return;
        }
        sub.status = SubStatus::Done;
        let server = sub.server as usize;
        if let (Some(b), Some(r)) = (&self.budgets, sub.reservation.take()) {
            r.release(&b.ledgers[server], now * self.tick_ns);
        }
        let w = self.window(now);
        self.series.completed[w][server] += 1;
        self.respond(sid, true, now);
    }

    fn purge(&mut self, server: usize) {
        let subs = &self.subs;
        let sv = &mut self.servers[server];
        for th in sv.threads.iter_mut() {
            if let Some(r) = th {
                if subs[r.sub as usize].status == SubStatus::Failed {
                    *th = None;
                }
            }
        }
        sv.queue.retain(|(sid, _)| subs[*sid as usize].status != SubStatus::Failed);
    }

    fn serve(&mut self, now: u64) {
        let acct_due = self.budgets.as_ref().is_some_and(|b| now.is_multiple_of(b.acct_ticks));
        for s in 0..self.servers.len() {
            let p = self.servers[s].progress_probability(now);
            let mut dirty = false;
            for t in 0..self.servers[s].threads.len() {
                let Some(mut run) = self.servers[s].threads[t] else { continue };
                if self.subs[run.sub as usize].status != SubStatus::InFlight {
                    continue;
                }
                let advance = p >= 1.0 || unit_f64(&mut self.degradation_rng) < p;
                if advance {
                    run.remaining -= 1;
                    run.uncharged += 1;
                    if let Some(k) = self.budget_slot_of(run.sub) {
                        let q = self.subs[run.sub as usize].query as usize;
                        let c = self.cost[self.queries[q].profile as usize];
                        if let Some(b) = &mut self.budgets {
                            b.true_usage[s][k] += c;
                        }
                    }
                }
                if run.remaining == 0 {
                    self.servers[s].threads[t] = None;
                    if !self.charge(run.sub, run.uncharged, now) {
                        dirty = true;
                        continue;
                    }
                    let sub = &mut self.subs[run.sub as usize];
                    sub.tasks_left -= 1;
                    if sub.tasks_left == 0 {
                        self.finish_sub(run.sub, now);
                    }
                } else {
                    self.servers[s].threads[t] = Some(run);
                }
            }
            if acct_due {
                for t in 0..self.servers[s].threads.len() {
                    let Some(mut run) = self.servers[s].threads[t] else { continue };
                    if self.subs[run.sub as usize].status != SubStatus::InFlight {
                        continue;
                    }
                    let units = run.uncharged;
                    run.uncharged = 0;
                    self.servers[s].threads[t] = Some(run);
                    if !self.charge(run.sub, units, now) {
                        dirty = true;
                    }
                }
            }
            if dirty {
                self.purge(s);
            }
        }

        while self.to_server.front().is_some_and(|(at, _)| *at <= now) {
            let (_, sid) = self.to_server.pop_front().expect("front exists");
            self.admit(sid, now);
        }

        for sv in &mut self.servers {
            for th in sv.threads.iter_mut().filter(|t| t.is_none()) {
                let Some((sub, units)) = sv.queue.pop_front() else { break };
                *th = Some(Running {
                    sub,
                    remaining: units,
                    uncharged: 0,
                });
            }
        }
    }

    fn admit(&mut self, sid: u32, now: u64) {
        let server = self.subs[sid as usize].server as usize;
        self.servers[server].requests_in_transit -= 1;
        if self.subs[sid as usize].status != SubStatus::InFlight {
            return;
        }
        let q = self.subs[sid as usize].query as usize;
        let profile = self.queries[q].profile as usize;
        let topo = &self.scenario.topology;
        if let Some(cap) = topo.queue_cap {
            if self.servers[server].queue.len() >= cap {
                self.subs[sid as usize].status = SubStatus::Failed;
                self.respond(sid, false, now);
                return;
            }
        }
        if let Some(b) = &mut self.budgets {
            let slot = self.budget_slot[profile];
            let name = self.scenario.workloads[profile].workload.as_deref().unwrap_or("");
            match b.ledgers[server].admit_query(name, b.provisional, now * self.tick_ns) {
                Ok(r) => {
                    if let Some(k) = slot {
                        b.admitted[server][k] += 1;
                    }
                    self.subs[sid as usize].reservation = Some(r);
                }
                Err(_) => {
                    if let Some(k) = slot {
                        b.rejected[server][k] += 1;
                    }
                    self.subs[sid as usize].status = SubStatus::Failed;
                    self.respond(sid, false, now);
                    return;
                }
            }
        }
        let per_thread = self.units[profile];
        let c = topo.threads_per_server.min(topo.segments_per_mss).max(1) as u32;
        self.subs[sid as usize].tasks_left = c;
        for _ in 0..c {
            self.servers[server].queue.push_back((sid, per_thread));
        }
    }

    fn receive(&mut self, now: u64) {
        while self.to_broker.front().is_some_and(|(at, _, _)| *at <= now) {
            let (_, sid, ok) = self.to_broker.pop_front().expect("front exists");
            let sub = &self.subs[sid as usize];
            let qi = sub.query as usize;
            let server = sub.server;
            let b = self.queries[qi].broker as usize;
            if ok {
                let ms = (now - sub.dispatch_tick) as f64 * self.scenario.tick_ms;
                if self.selectors[b].on_response(&server, ms).is_some() {
                    self.series.unmatched_responses += 1;
                }
            } else {
                self.selectors[b].on_failure(&server);
            }
            let q = &mut self.queries[qi];
            q.pending -= 1;
            q.failed |= !ok;
            if q.pending == 0 {
                q.done = true;
                if q.failed {
                    self.rejected_count += 1;
                } else {
                    self.completed_count += 1;
                    q.latency_ticks = now - q.arrival_tick;
                    let lat = q.latency_ticks as f64 * self.scenario.tick_ms;
                    let w = self.window(now);
                    self.window_latencies[w].push(lat);
                }
            }
        }
    }

    fn close_budget_window(&mut self, now: u64, at_end: bool) {
        let Some(b) = &mut self.budgets else { return };
        let boundary = now > b.window_start_tick && now.is_multiple_of(b.window_ticks);
        if !boundary && !at_end {
            return;
        }
        if at_end && now == b.window_start_tick {
            return;
        }
        let probe = (now * self.tick_ns).saturating_sub(1);
        for (s, ledger) in b.ledgers.iter().enumerate() {
            for (k, name) in b.names.iter().enumerate() {
                let cpu = ledger.view(name, Resource::Cpu, probe).expect("configured");
                let mem = ledger.view(name, Resource::Mem, probe).expect("configured");
                self.series.budget_windows.push(BudgetWindowRecord {
                    server: s,
                    workload: name.clone(),
                    window_start_ms: b.window_start_tick as f64 * self.scenario.tick_ms,
                    partial: !boundary,
                    budget_cpu_ns: cpu.window_budget,
                    charged_cpu_ns: cpu.charged(),
                    true_cpu_ns: b.true_usage[s][k].cpu_ns,
                    budget_mem_bytes: mem.window_budget,
                    charged_mem_bytes: mem.charged(),
                    true_mem_bytes: b.true_usage[s][k].mem_bytes,
                    admitted: b.admitted[s][k],
                    rejected: b.rejected[s][k],
                    cancelled: b.cancelled[s][k],
                });
                b.true_usage[s][k] = Usage::ZERO;
                b.admitted[s][k] = 0;
                b.rejected[s][k] = 0;
                b.cancelled[s][k] = 0;
            }
        }
        b.window_start_tick = now;
    }

    fn drive_rebalance(&mut self, now: u64) {
        let Some(rb) = &mut self.rebalance else { return };
        if rb.finished || now < rb.start_tick {
            return;
        }
        if let Some(active) = &rb.active {
            let drained_idle = active.drained.iter().all(|&s| self.servers[s].idle());
            if now < active.min_end_tick || !drained_idle {
                return;
            }
            for &s in &active.drained {
                self.servers[s].down = false;
            }
            self.series.rebalance_steps[active.annotation].end_ms = Some(now as f64 * self.scenario.tick_ms);
            rb.active = None;
        }
        let before = rb.driver.state().current_assignment();
        match rb.driver.next_step() {
            Ok(None) => rb.finished = true,
            Err(e) => {
                self.series.rebalance_error = Some(format!("{e}"));
                rb.finished = true;
            }
            Ok(Some(rec)) => {
                let drained: Vec<usize> = rec.drained_hosts().map(|h| rb.hosts[h]).collect();
                for &s in &drained {
                    self.servers[s].down = true;
                }
                let servers = &self.servers;
                let min_serving = rb
                    .targets
                    .iter()
                    .map(|seg| {
                        before
                            .holders(seg)
                            .into_iter()
                            .filter(|h| rb.hosts.get(*h).is_some_and(|&s| !servers[s].down))
                            .count()
                    })
                    .min()
                    .unwrap_or(0);
                let ticks = self.scenario.ticks(rec.duration_ms()).max(1);
                self.series.rebalance_steps.push(RebalanceAnnotation {
                    index: rec.index,
                    action: rec.action,
                    start_ms: now as f64 * self.scenario.tick_ms,
                    end_ms: None,
                    drained: drained.iter().map(|&s| self.series.server_names[s].clone()).collect(),
                    min_serving,
                });
                rb.active = Some(ActiveStep {
                    annotation: self.series.rebalance_steps.len() - 1,
                    min_end_tick: now + ticks,
                    drained,
                });
            }
        }
    }

    /// Classifies every injected query. Outstanding queries are placed by
    /// their most advanced request: executing, then queued, then in transit.
    pub fn census(&self) -> Census {
        let mut state = vec![0u8; self.queries.len()];
        for (_, sid) in &self.to_server {
            let q = self.subs[*sid as usize].query as usize;
            state[q] = state[q].max(1);
        }
        for (_, sid, _) in &self.to_broker {
            let q = self.subs[*sid as usize].query as usize;
            state[q] = state[q].max(1);
        }
        for sv in &self.servers {
            for (sid, _) in &sv.queue {
                let q = self.subs[*sid as usize].query as usize;
                state[q] = state[q].max(2);
            }
            for r in sv.threads.iter().flatten() {
                let q = self.subs[r.sub as usize].query as usize;
                state[q] = 3;
            }
        }
        let mut c = Census {
            injected: self.queries.len() as u64,
            completed: self.completed_count,
            rejected: self.rejected_count,
            ..Census::default()
        };
        for (q, st) in self.queries.iter().zip(&state) {
            if q.done {
                continue;
            }
            match st {
                3 => c.executing += 1,
                2 => c.queued += 1,
                1 => c.in_transit += 1,
                _ => {}
            }
        }
        c
    }

    /// Every outstanding request of every unfinished query must be found in
    /// exactly one place: a message buffer, a server queue or a thread.
    pub fn check_conservation(&self) -> Result<Census, String> {
        let c = self.census();
        if c.accounted() != c.injected {
            return Err(format!("census does not add up: {c:?}"));
        }
        let mut seen = vec![0u32; self.subs.len()];
        for (_, sid) in &self.to_server {
            seen[*sid as usize] += 1;
        }
        for (_, sid, _) in &self.to_broker {
            seen[*sid as usize] += 1;
        }
        for sv in &self.servers {
            let mut on_server = BTreeSet::new();
            for (sid, _) in &sv.queue {
                on_server.insert(*sid);
            }
            for r in sv.threads.iter().flatten() {
                on_server.insert(r.sub);
            }
            for sid in on_server {
                seen[sid as usize] += 1;
            }
        }
        let mut pending = vec![0u32; self.queries.len()];
        for (sid, n) in seen.iter().enumerate() {
            if *n > 1 {
                return Err(format!("request {sid} found in {n} places"));
            }
            pending[self.subs[sid].query as usize] += n;
        }
        for (qi, q) in self.queries.iter().enumerate() {
            if pending[qi] != q.pending {
                return Err(format!(
                    "query {qi}: {} requests outstanding, {} located",
                    q.pending, pending[qi]
                ));
            }
        }
        Ok(c)
    }

    /// Closes open windows and returns the collected series.
    pub fn finish(mut self) -> MetricsSeries {
        let now = self.clock;
        self.close_budget_window(now, true);
        if let Some(rb) = &self.rebalance {
            if let Some(a) = &rb.active {
                self.series.rebalance_steps[a.annotation].end_ms = None;
            }
        }
        self.series.latency = self
            .window_latencies
            .iter_mut()
            .map(|v| {
                v.sort_by(f64::total_cmp);
                WindowLatency {
                    completed: v.len() as u64,
                    p50_ms: nearest_rank(v, 0.50),
                    p90_ms: nearest_rank(v, 0.90),
                    p95_ms: nearest_rank(v, 0.95),
                    p99_ms: nearest_rank(v, 0.99),
                }
            })
            .collect();
        self.series.queries = self
            .queries
            .iter()
            .map(|q| QueryRecord {
                arrival_tick: q.arrival_tick,
                broker: q.broker,
                profile: q.profile,
                outcome: if !q.done {
                    QueryOutcome::Unfinished
                } else if q.failed {
                    QueryOutcome::Rejected
                } else {
                    QueryOutcome::Completed {
                        latency_ticks: q.latency_ticks,
                    }
                },
            })
            .collect();
        self.series
    }
}

trait NextMod {
    fn next_u64_mod(&mut self, n: u64) -> u64;
}

impl NextMod for ChaCha8Rng {
    fn next_u64_mod(&mut self, n: u64) -> u64 {
        use rand_chacha::rand_core::RngCore;
        // multiply-shift keeps the draw unbiased enough for small n
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }
}

/// Runs `scenario` to completion.
pub fn run(scenario: &Scenario) -> Result<MetricsSeries, Vec<FieldError>> {
    let mut st = SimState::new(scenario)?;
    while !st.is_finished() {
        st.tick();
    }
    Ok(st.finish())
}
