//! Sampling accountant.
//!
//! Worker threads publish the task they run and that task's cumulative
//! usage. A periodic sampler folds these into per-query totals: while a
//! thread stays on the same task its latest metric is remembered; when the
//! thread has moved on, the remembered metric of the previous task is
//! credited to that task's query. Anything a task consumed after its last
//! observation is lost, which is why the sampling interval bounds accuracy.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskKey {
    pub query_id: u64,
    pub task_id: u64,
}

/// What one worker thread publishes. `metric` is the cumulative usage of
/// `task` and restarts from zero when a new task is installed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadSlot {
    pub thread_id: usize,
    pub task: Option<TaskKey>,
    pub metric: Usage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UsageSnapshot {
    pub active_query_usage: BTreeMap<u64, Usage>,
    pub heap_fraction: f64,
}

/// Result of one sampler pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleOutcome {
    /// Built only when the heap threshold trips.
    pub snapshot: Option<UsageSnapshot>,
    /// Queries no longer seen on any thread, with their accumulated usage.
    pub finished: Vec<(u64, Usage)>,
}

#[derive(Debug, Clone)]
pub struct Accountant {
    pub usage_threshold: f64,
    previous_task: BTreeMap<usize, TaskKey>,
    active_metric: BTreeMap<usize, Usage>,
    inactive_metric: BTreeMap<u64, Usage>,
}

impl Default for Accountant {
    fn default() -> Self {
        Self::new(0.85)
    }
}

impl Accountant {
    pub fn new(usage_threshold: f64) -> Self {
        Self {
            usage_threshold,
            previous_task: BTreeMap::new(),
            active_metric: BTreeMap::new(),
            inactive_metric: BTreeMap::new(),
        }
    }

    pub fn active_metric(&self, thread_id: usize) -> Option<Usage> {
        self.active_metric.get(&thread_id).copied()
    }

    pub fn inactive_metric(&self, query_id: u64) -> Option<Usage> {
        self.inactive_metric.get(&query_id).copied()
    }

    pub fn sample_and_aggregate(&mut self, threads: &[ThreadSlot], heap_fraction: f64) -> SampleOutcome {
        let active = self.observe(threads);
        let snapshot = (heap_fraction >= self.usage_threshold).then(|| UsageSnapshot {
            active_query_usage: self.usage_of(&active),
            heap_fraction,
        });
        let finished = self.evict_finished(&active);
        SampleOutcome { snapshot, finished }
    }

    fn observe(&mut self, threads: &[ThreadSlot]) -> BTreeSet<u64> {
        let mut active = BTreeSet::new();
        for t in threads {
            if let Some(task) = t.task {
                active.insert(task.query_id);
            }
            let prev = self.previous_task.get(&t.thread_id).copied();
            if prev != t.task {
                if let Some(p) = prev {
                    let m = self.active_metric.get(&t.thread_id).copied().unwrap_or_default();
                    *self.inactive_metric.entry(p.query_id).or_default() += m;
                }
                match t.task {
                    Some(task) => self.previous_task.insert(t.thread_id, task),
                    None => self.previous_task.remove(&t.thread_id),
                };
            }
            if t.task.is_some() {
                self.active_metric.insert(t.thread_id, t.metric);
            } else {
                self.active_metric.remove(&t.thread_id);
            }
        }
        active
    }

    /// Per-query usage: credited metrics of finished tasks plus the latest
    /// metric of every thread still on the query.
    fn usage_of(&self, active: &BTreeSet<u64>) -> BTreeMap<u64, Usage> {
        let mut usage: BTreeMap<u64, Usage> = active
            .iter()
            .map(|q| (*q, self.inactive_metric.get(q).copied().unwrap_or_default()))
            .collect();
        for (tid, task) in &self.previous_task {
            if let Some(u) = usage.get_mut(&task.query_id) {
                *u += self.active_metric.get(tid).copied().unwrap_or_default();
            }
        }
        usage
    }

    /// Usage of every query currently on a thread, regardless of threshold.
    pub fn aggregate(&self) -> BTreeMap<u64, Usage> {
        let active: BTreeSet<u64> = self.previous_task.values().map(|t| t.query_id).collect();
        self.usage_of(&active)
    }

    fn evict_finished(&mut self, active: &BTreeSet<u64>) -> Vec<(u64, Usage)> {
        let gone: Vec<u64> = self
            .inactive_metric
            .keys()
            .filter(|q| !active.contains(q))
            .copied()
            .collect();
        gone.into_iter()
            .map(|q| (q, self.inactive_metric.remove(&q).unwrap_or_default()))
            .collect()
    }
}

/// Synthetic short-query workload with a ground-truth meter.
///
/// Threads are grouped in lanes. Each query of a lane starts one task on
/// 1..=lane threads at once; the next query of the lane starts after its
/// longest task plus an idle gap. A thread keeps its last task installed
/// while idle. Usage grows linearly: 1 ns CPU per ns and
/// `mem_bytes_per_us` per microsecond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyParams {
    pub lanes: usize,
    pub threads_per_lane: usize,
    /// Inclusive task duration range, microseconds.
    pub task_us: (u64, u64),
    /// Inclusive idle gap range between queries of a lane, microseconds.
    pub gap_us: (u64, u64),
    pub horizon_us: u64,
    pub mem_bytes_per_us: u64,
}

impl Default for AccuracyParams {
    fn default() -> Self {
        Self {
            lanes: 4,
            threads_per_lane: 4,
            task_us: (200, 2_000),
            gap_us: (1_000, 3_000),
            horizon_us: 2_000_000,
            mem_bytes_per_us: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub interval_us: u64,
    pub queries: usize,
    /// Mean over queries of `|measured - truth| / truth`, CPU.
    pub mean_abs_error: f64,
    pub mean_abs_error_mem: f64,
}

#[derive(Debug, Clone, Copy)]
struct Task {
    key: TaskKey,
    start: u64,
    end: u64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (u64, u64)) -> u64 {
    lo + rng.next_u64() % (hi - lo + 1)
}

/// Runs the sampler every `interval_us` over the workload drawn from `seed`
/// and compares per-query totals with ground truth.
pub fn measure_accounting_error(params: &AccuracyParams, interval_us: u64, seed: u64) -> AccuracyReport {
    assert!(interval_us > 0, "sampling interval must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threads = params.lanes * params.threads_per_lane;
    let mut per_thread: Vec<Vec<Task>> = (0..threads).map(|_| Vec::new()).collect();
    let mut truth: BTreeMap<u64, u64> = BTreeMap::new();
    let mut next_query = 0u64;
    for lane in 0..params.lanes {
        let mut t = uniform(&mut rng, params.gap_us);
        while t < params.horizon_us {
            let width = 1 + (rng.next_u64() % params.threads_per_lane as u64) as usize;
            let q = next_query;
            next_query += 1;
            let mut longest = 0;
            let mut total = 0;
            for j in 0..width {
                let d = uniform(&mut rng, params.task_us);
                longest = longest.max(d);
                total += d;
                per_thread[lane * params.threads_per_lane + j].push(Task {
                    key: TaskKey { query_id: q, task_id: j as u64 },
                    start: t,
                    end: t + d,
                });
            }
            truth.insert(q, total);
            t += longest + uniform(&mut rng, params.gap_us);
        }
    }

    let usage = |us: u64| Usage::new(us * 1_000, us * params.mem_bytes_per_us);
    let mut acct = Accountant::new(f64::INFINITY);
    let mut measured: BTreeMap<u64, Usage> = BTreeMap::new();
    let mut slots: Vec<ThreadSlot> = Vec::with_capacity(threads);
    let mut now = interval_us;
    let end = params.horizon_us + params.task_us.1;
    while now <= end {
        slots.clear();
        for (tid, tasks) in per_thread.iter().enumerate() {
            let idx = tasks.partition_point(|k| k.start <= now);
            let (task, metric) = match idx.checked_sub(1).map(|i| tasks[i]) {
                Some(k) => (Some(k.key), usage(now.min(k.end) - k.start)),
                None => (None, Usage::ZERO),
            };
            slots.push(ThreadSlot { thread_id: tid, task, metric });
        }
        for (q, u) in acct.sample_and_aggregate(&slots, 0.0).finished {
            measured.insert(q, u);
        }
        now += interval_us;
    }
    // final pass with every thread idle credits whatever is still installed
    let idle: Vec<ThreadSlot> = (0..threads)
        .map(|tid| ThreadSlot { thread_id: tid, task: None, metric: Usage::ZERO })
        .collect();
    for (q, u) in acct.sample_and_aggregate(&idle, 0.0).finished {
        measured.insert(q, u);
    }

    let mut err_cpu = 0.0;
    let mut err_mem = 0.0;
    for (q, total_us) in &truth {
        let t = usage(*total_us);
        let m = measured.get(q).copied().unwrap_or_default();
        err_cpu += (m.cpu_ns as f64 - t.cpu_ns as f64).abs() / t.cpu_ns as f64;
        err_mem += (m.mem_bytes as f64 - t.mem_bytes as f64).abs() / t.mem_bytes.max(1) as f64;
    }
    let n = truth.len().max(1) as f64;
    AccuracyReport {
        interval_us,
        queries: truth.len(),
        mean_abs_error: err_cpu / n,
        mean_abs_error_mem: err_mem / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn slot(t: usize, q: u64, k: u64, m: u64) -> ThreadSlot {
        ThreadSlot {
            thread_id: t,
            task: Some(TaskKey { query_id: q, task_id: k }),
            metric: Usage::new(m, m),
        }
    }

    #[test]
    fn hand_trace() {
        let mut a = Accountant::new(0.85);
        a.sample_and_aggregate(&[slot(1, 1, 1, 10)], 0.0);
        assert_eq!(a.active_metric(1), Some(Usage::new(10, 10)));
        assert_eq!(a.inactive_metric(1), None);

        let out = a.sample_and_aggregate(&[slot(1, 1, 2, 4)], 0.9);
        assert_eq!(a.inactive_metric(1), Some(Usage::new(10, 10)));
        assert_eq!(a.active_metric(1), Some(Usage::new(4, 4)));
        let snap = out.snapshot.unwrap();
        assert_eq!(snap.active_query_usage[&1], Usage::new(14, 14));

        let out = a.sample_and_aggregate(&[slot(1, 2, 1, 3)], 0.0);
        assert_eq!(out.finished, vec![(1, Usage::new(14, 14))]);
        assert_eq!(a.inactive_metric(1), None);
        assert!(out.snapshot.is_none());
    }

    #[test]
    fn threads_on_same_query_accumulate() {
        let mut a = Accountant::new(0.0);
        let out = a.sample_and_aggregate(&[slot(0, 7, 0, 5), slot(1, 7, 1, 6)], 0.5);
        assert_eq!(out.snapshot.unwrap().active_query_usage[&7], Usage::new(11, 11));
        assert_eq!(a.aggregate()[&7], Usage::new(11, 11));
    }

    #[test]
    fn exact_when_every_gap_is_sampled() {
        let p = AccuracyParams {
            horizon_us: 300_000,
            ..AccuracyParams::default()
        };
        let r = measure_accounting_error(&p, 1_000, 7);
        assert!(r.queries > 100);
        assert!(r.mean_abs_error < 1e-12, "{r:?}");
    }
}
