//! Impact-free rebalancing.
//!
//! The planner moves a table from its current host assignment to a desired
//! one in steps. A *rebalancing step* drains a set of hosts whose drain keeps
//! every segment at or above `T` serving replicas, applies each host's full
//! diff, and re-enables it. When no host is drainable a *progress step* adds
//! a small batch of missing segments to every unconverged host, lowest
//! replica count first, and removes nothing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use fixedbitset::FixedBitSet;

use crate::cluster::{HostAssignment, InstanceId, SegmentId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RebalanceError {
    #[error("segment {segment} has {replicas} target replicas; at least {needed} needed for T={threshold}")]
    UnreachableThreshold {
        segment: SegmentId,
        replicas: usize,
        needed: usize,
        threshold: usize,
    },
    #[error("progress batch must be at least 1")]
    ZeroBatch,
    #[error("host {0} is not part of this rebalance")]
    UnknownHost(InstanceId),
    #[error("host {0} cannot be drained safely together with the other hosts of this step")]
    UnsafeDrain(InstanceId),
    #[error("host {0} is already converged")]
    AlreadyConverged(InstanceId),
    #[error("no host is drainable and no segment can be added; blocked hosts: {hosts:?}")]
    Stalled { hosts: Vec<InstanceId> },
}

/// Planner parameters. Transfer fields only feed the simulated step timings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RebalanceConfig {
    /// Minimum serving replicas per segment while hosts are drained (`T`).
    pub min_serving_replicas: usize,
    /// Segments added per host in one progress step.
    pub progress_batch: usize,
    /// Bounded wait for in-flight queries after disabling a host.
    pub drain_wait_ms: f64,
    pub download_bytes_per_ms: f64,
    pub default_segment_bytes: u64,
    pub segment_bytes: BTreeMap<SegmentId, u64>,
}

impl RebalanceConfig {
    pub fn new(min_serving_replicas: usize, progress_batch: usize) -> Self {
        Self {
            min_serving_replicas,
            progress_batch,
            drain_wait_ms: 100.0,
            download_bytes_per_ms: 100_000.0,
            default_segment_bytes: 1 << 20,
            segment_bytes: BTreeMap::new(),
        }
    }

    /// `T = R - 1` and a batch of 5% of the table's segments (at least one),
    /// where `R` is the smallest replica count in `desired`.
    pub fn defaults_for(desired: &HostAssignment) -> Self {
        let counts = desired.replica_counts();
        let replicas = counts.values().copied().min().unwrap_or(1);
        let batch = (counts.len() / 20).max(1);
        Self::new(replicas.saturating_sub(1), batch)
    }

    fn bytes(&self, seg: &SegmentId) -> u64 {
        self.segment_bytes
            .get(seg)
            .copied()
            .unwrap_or(self.default_segment_bytes)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostDiff {
    pub added: BTreeSet<SegmentId>,
    pub removed: BTreeSet<SegmentId>,
}

/// Per-host `Added = Desired \ Initial` and `Removed = Initial \ Desired`.
/// A host missing on one side is treated as empty there.
pub fn compute_diff(
    initial: &HostAssignment,
    desired: &HostAssignment,
) -> BTreeMap<InstanceId, HostDiff> {
    let empty = BTreeSet::new();
    let hosts: BTreeSet<&InstanceId> = initial.hosts().chain(desired.hosts()).collect();
    hosts
        .into_iter()
        .map(|h| {
            let init = initial.segments(h).unwrap_or(&empty);
            let want = desired.segments(h).unwrap_or(&empty);
            (
                h.clone(),
                HostDiff {
                    added: want.difference(init).cloned().collect(),
                    removed: init.difference(want).cloned().collect(),
                },
            )
        })
        .collect()
}

/// Rebalance bookkeeping of one host. Segments are kept as bit positions in
/// the sorted segment table shared by all hosts of a [`RebalanceState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostState {
    segments: Arc<[SegmentId]>,
    initial: FixedBitSet,
    desired: FixedBitSet,
    added_so_far: FixedBitSet,
    removed_so_far: FixedBitSet,
    /// `(Initial \ RemovedSoFar) ∪ AddedSoFar`, kept in sync.
    held: FixedBitSet,
    down: bool,
}

impl HostState {
    fn new(segments: Arc<[SegmentId]>, initial: FixedBitSet, desired: FixedBitSet) -> Self {
        let n = segments.len();
        Self {
            segments,
            held: initial.clone(),
            initial,
            desired,
            added_so_far: FixedBitSet::with_capacity(n),
            removed_so_far: FixedBitSet::with_capacity(n),
            down: false,
        }
    }

    fn ids<'a>(&'a self, bits: impl Iterator<Item = usize> + 'a) -> impl Iterator<Item = &'a SegmentId> {
        bits.map(|i| &self.segments[i])
    }

    fn set(&self, bits: &FixedBitSet) -> BTreeSet<SegmentId> {
        self.ids(bits.ones()).cloned().collect()
    }

    fn index(&self, s: &SegmentId) -> Option<usize> {
        self.segments.binary_search(s).ok()
    }

    pub fn initial(&self) -> BTreeSet<SegmentId> {
        self.set(&self.initial)
    }

    pub fn desired(&self) -> BTreeSet<SegmentId> {
        self.set(&self.desired)
    }

    pub fn added_so_far(&self) -> BTreeSet<SegmentId> {
        self.set(&self.added_so_far)
    }

    pub fn removed_so_far(&self) -> BTreeSet<SegmentId> {
        self.set(&self.removed_so_far)
    }

    /// Disabled for queries while a rebalancing step changes it.
    pub fn is_down(&self) -> bool {
        self.down
    }

    pub fn added(&self) -> BTreeSet<SegmentId> {
        self.ids(self.desired.difference(&self.initial)).cloned().collect()
    }

    pub fn removed(&self) -> BTreeSet<SegmentId> {
        self.ids(self.initial.difference(&self.desired)).cloned().collect()
    }

    pub fn current(&self) -> BTreeSet<SegmentId> {
        self.set(&self.held)
    }

    /// Iterates `Current(h)` without building it.
    pub fn held(&self) -> impl Iterator<Item = &SegmentId> {
        self.ids(self.held.ones())
    }

    pub fn holds(&self, s: &SegmentId) -> bool {
        self.index(s).is_some_and(|i| self.held.contains(i))
    }

    pub fn is_converged(&self) -> bool {
        self.held == self.desired
    }

    /// `|Desired Δ Current|`, the host-selection priority.
    pub fn distance(&self) -> usize {
        self.held.symmetric_difference_count(&self.desired)
    }

    /// `Desired \ Initial \ AddedSoFar`. `Removed` never touches desired
    /// segments, so this is `Desired \ Current`.
    fn pending_additions(&self) -> impl Iterator<Item = usize> + '_ {
        self.desired.difference(&self.held)
    }

    fn add(&mut self, i: usize) {
        self.added_so_far.insert(i);
        self.held.insert(i);
    }

    /// Applies the full diff.
    fn converge(&mut self) {
        self.added_so_far = self.desired.clone();
        self.added_so_far.difference_with(&self.initial);
        self.removed_so_far = self.initial.clone();
        self.removed_so_far.difference_with(&self.desired);
        self.held = self.desired.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceState {
    hosts: BTreeMap<InstanceId, HostState>,
    pub step: usize,
    pub config: RebalanceConfig,
    /// Sorted union of every segment of both layouts.
    segments: Arc<[SegmentId]>,
    /// Segments of the target layout; only these are subject to the serving
    /// threshold (segments dropped from the table entirely are not).
    target: FixedBitSet,
}

fn check_threshold(desired: &HostAssignment, t: usize) -> Result<(), RebalanceError> {
    for (seg, n) in desired.replica_counts() {
        if n < t + 1 {
            return Err(RebalanceError::UnreachableThreshold {
                segment: seg,
                replicas: n,
                needed: t + 1,
                threshold: t,
            });
        }
    }
    Ok(())
}

impl RebalanceState {
    pub fn new(
        initial: &HostAssignment,
        desired: &HostAssignment,
        config: RebalanceConfig,
    ) -> Result<Self, RebalanceError> {
        if config.progress_batch == 0 {
            return Err(RebalanceError::ZeroBatch);
        }
        check_threshold(desired, config.min_serving_replicas)?;
        let mut all = initial.all_segments();
        all.append(&mut desired.all_segments());
        let segments: Arc<[SegmentId]> = all.into_iter().collect();
        let bits = |segs: Option<&BTreeSet<SegmentId>>| {
            let mut b = FixedBitSet::with_capacity(segments.len());
            for s in segs.into_iter().flatten() {
                b.insert(segments.binary_search(s).expect("segment table covers both layouts"));
            }
            b
        };
        let target = bits(Some(&desired.all_segments()));
        let hosts: BTreeSet<&InstanceId> = initial.hosts().chain(desired.hosts()).collect();
        let hosts = hosts
            .into_iter()
            .map(|h| {
                let st = HostState::new(
                    segments.clone(),
                    bits(initial.segments(h)),
                    bits(desired.segments(h)),
                );
                (h.clone(), st)
            })
            .collect();
        Ok(Self {
            hosts,
            step: 0,
            config,
            segments,
            target,
        })
    }

    pub fn hosts(&self) -> &BTreeMap<InstanceId, HostState> {
        &self.hosts
    }

    pub fn host(&self, id: &InstanceId) -> Option<&HostState> {
        self.hosts.get(id)
    }

    /// Current assignment of every host.
    pub fn current_assignment(&self) -> HostAssignment {
        HostAssignment(
            self.hosts
                .iter()
                .map(|(h, st)| (h.clone(), st.current()))
                .collect(),
        )
    }

    pub fn desired_assignment(&self) -> HostAssignment {
        HostAssignment(
            self.hosts
                .iter()
                .map(|(h, st)| (h.clone(), st.desired()))
                .collect(),
        )
    }

    pub fn is_converged(&self) -> bool {
        self.hosts.values().all(HostState::is_converged)
    }

    pub fn unconverged_hosts(&self) -> Vec<InstanceId> {
        self.hosts
            .iter()
            .filter(|(_, st)| !st.is_converged())
            .map(|(h, _)| h.clone())
            .collect()
    }

    /// Serving replicas of every target segment: holders that are up and not
    /// in `excluded`.
    pub fn serving_counts(&self, excluded: &BTreeSet<InstanceId>) -> BTreeMap<SegmentId, usize> {
        self.count_map(&self.counts(|h| excluded.contains(h)))
    }

    /// Serving replicas indexed by segment position.
    fn counts(&self, excluded: impl Fn(&InstanceId) -> bool) -> Vec<usize> {
        let mut counts = vec![0; self.segments.len()];
        for (h, st) in &self.hosts {
            if st.down || excluded(h) {
                continue;
            }
            for i in st.held.ones() {
                counts[i] += 1;
            }
        }
        counts
    }

    fn count_map(&self, counts: &[usize]) -> BTreeMap<SegmentId, usize> {
        self.target
            .ones()
            .map(|i| (self.segments[i].clone(), counts[i]))
            .collect()
    }

    /// Re-targets the rebalance. Hosts keep what they currently hold, so
    /// already converged hosts may become unconverged again.
    pub fn update_goal(&mut self, desired: &HostAssignment) -> Result<(), RebalanceError> {
        check_threshold(desired, self.config.min_serving_replicas)?;
        let current = self.current_assignment();
        let mut next = RebalanceState::new(&current, desired, self.config.clone())?;
        next.step = self.step;
        *self = next;
        Ok(())
    }

    pub fn enable_converged_hosts(&mut self) {
        for st in self.hosts.values_mut() {
            if st.down && st.is_converged() {
                st.down = false;
            }
        }
    }
}

/// Whether `host` can be drained while every host in `candidates` is also
/// drained: each target segment it currently holds must keep at least `T`
/// serving replicas elsewhere.
pub fn safe_to_drain(
    state: &RebalanceState,
    candidates: &BTreeSet<InstanceId>,
    host: &InstanceId,
) -> bool {
    let counts = state.counts(|h| h == host || candidates.contains(h));
    drainable(state, &counts, host, false)
}

/// `counts` are serving replicas with the candidates already excluded;
/// `counted` says whether `host` itself is still in them.
fn drainable(state: &RebalanceState, counts: &[usize], host: &InstanceId, counted: bool) -> bool {
    let Some(hs) = state.hosts.get(host) else {
        return false;
    };
    let t = state.config.min_serving_replicas;
    let own = usize::from(counted && !hs.down);
    hs.held
        .intersection(&state.target)
        .all(|i| counts[i] - own >= t)
}

fn exclude(state: &RebalanceState, counts: &mut [usize], host: &InstanceId) {
    let hs = &state.hosts[host];
    if hs.down {
        return;
    }
    for i in hs.held.ones() {
        counts[i] -= 1;
    }
}

/// Greedy host selection: unconverged hosts by descending `|Desired Δ
/// Current|` (ties by id), each admitted if drainable alongside those already
/// admitted.
pub fn select_hosts(state: &RebalanceState) -> Vec<InstanceId> {
    let mut order: Vec<(usize, &InstanceId)> = state
        .hosts
        .iter()
        .map(|(h, st)| (st.distance(), h))
        .filter(|&(d, _)| d > 0)
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));

    let mut counts = state.counts(|_| false);
    let mut out = Vec::new();
    for (_, h) in order {
        if drainable(state, &counts, h, true) {
            exclude(state, &mut counts, h);
            out.push(h.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum StepAction {
    Rebalance,
    Progress,
}

/// What happened to one host in a step.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HostChange {
    pub host: InstanceId,
    pub added: Vec<SegmentId>,
    pub removed: Vec<SegmentId>,
    /// Queries were disabled on the host for the duration of the change.
    pub drained: bool,
    pub bytes_added: u64,
    pub drain_ms: f64,
    pub download_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub index: usize,
    pub action: StepAction,
    pub changes: Vec<HostChange>,
    /// Serving replicas per target segment while the step's hosts are drained.
    pub serving_during: BTreeMap<SegmentId, usize>,
    /// Serving replicas per target segment once the step completes.
    pub serving_after: BTreeMap<SegmentId, usize>,
}

impl StepRecord {
    pub fn min_serving_during(&self) -> usize {
        self.serving_during.values().copied().min().unwrap_or(0)
    }

    pub fn drained_hosts(&self) -> impl Iterator<Item = &InstanceId> {
        self.changes.iter().filter(|c| c.drained).map(|c| &c.host)
    }

    /// Wall time of the step: hosts change in parallel, so the slowest wins.
    pub fn duration_ms(&self) -> f64 {
        self.changes
            .iter()
            .map(|c| c.drain_ms + c.download_ms)
            .fold(0.0, f64::max)
    }
}

/// Drains `hosts`, applies their full diffs and re-enables them.
pub fn rebalancing_step(
    state: &mut RebalanceState,
    hosts: &[InstanceId],
) -> Result<StepRecord, RebalanceError> {
    let mut counts = state.counts(|_| false);
    let mut admitted: Vec<&InstanceId> = Vec::with_capacity(hosts.len());
    for h in hosts {
        if admitted.contains(&h) {
            continue;
        }
        let st = state
            .hosts
            .get(h)
            .ok_or_else(|| RebalanceError::UnknownHost(h.clone()))?;
        if st.is_converged() {
            return Err(RebalanceError::AlreadyConverged(h.clone()));
        }
        if !drainable(state, &counts, h, true) {
            return Err(RebalanceError::UnsafeDrain(h.clone()));
        }
        exclude(state, &mut counts, h);
        admitted.push(h);
    }

    let serving_during = state.count_map(&counts);
    let mut changes = Vec::with_capacity(admitted.len());
    for h in admitted {
        let config = &state.config;
        let st = state.hosts.get_mut(h).expect("validated above");
        st.down = true;
        let added: Vec<SegmentId> = st.ids(st.pending_additions()).cloned().collect();
        let removed: Vec<SegmentId> = st
            .ids(st.initial.difference(&st.desired))
            .filter(|s| st.holds(s))
            .cloned()
            .collect();
        st.converge();
        let bytes_added: u64 = added.iter().map(|s| config.bytes(s)).sum();
        changes.push(HostChange {
            host: h.clone(),
            added,
            removed,
            drained: true,
            bytes_added,
            drain_ms: config.drain_wait_ms,
            download_ms: bytes_added as f64 / config.download_bytes_per_ms,
        });
    }
    state.enable_converged_hosts();
    state.step += 1;
    Ok(StepRecord {
        index: state.step - 1,
        action: StepAction::Rebalance,
        changes,
        serving_during,
        serving_after: state.serving_counts(&BTreeSet::new()),
    })
}

/// Adds up to `progress_batch` pending segments to each unconverged host,
/// fewest serving replicas first (ties by segment id). Priorities use the
/// counts from before the step, so hosts missing the same scarce segment
/// all receive it.
pub fn progress_step(state: &mut RebalanceState) -> StepRecord {
    let before = state.counts(|_| false);
    let mut after = before.clone();
    let batch = state.config.progress_batch;
    let mut changes = Vec::new();
    for (h, st) in state.hosts.iter_mut() {
        let mut pending: Vec<(usize, usize)> = st.pending_additions().map(|i| (before[i], i)).collect();
        if pending.is_empty() {
            continue;
        }
        // segment positions follow id order
        pending.sort_unstable();
        pending.truncate(batch);
        let mut added = Vec::with_capacity(pending.len());
        for &(_, i) in &pending {
            st.add(i);
            if !st.down {
                after[i] += 1;
            }
            added.push(st.segments[i].clone());
        }
        let bytes_added: u64 = added.iter().map(|s| state.config.bytes(s)).sum();
        changes.push(HostChange {
            host: h.clone(),
            added,
            removed: Vec::new(),
            drained: false,
            bytes_added,
            drain_ms: 0.0,
            download_ms: bytes_added as f64 / state.config.download_bytes_per_ms,
        });
    }
    state.step += 1;
    StepRecord {
        index: state.step - 1,
        action: StepAction::Progress,
        changes,
        serving_during: state.count_map(&before),
        serving_after: state.count_map(&after),
    }
}

/// Step-by-step driver, resumable from any recomputed state.
#[derive(Debug, Clone)]
pub struct Rebalancer {
    state: RebalanceState,
}

impl Rebalancer {
    pub fn new(
        initial: &HostAssignment,
        desired: &HostAssignment,
        config: RebalanceConfig,
    ) -> Result<Self, RebalanceError> {
        Ok(Self {
            state: RebalanceState::new(initial, desired, config)?,
        })
    }

    pub fn state(&self) -> &RebalanceState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_converged()
    }

    pub fn update_goal(&mut self, desired: &HostAssignment) -> Result<(), RebalanceError> {
        self.state.update_goal(desired)
    }

    /// Runs one step; `Ok(None)` once every host is converged and serving.
    pub fn next_step(&mut self) -> Result<Option<StepRecord>, RebalanceError> {
        self.state.enable_converged_hosts();
        if self.state.is_converged() {
            return Ok(None);
        }
        let candidates = select_hosts(&self.state);
        if !candidates.is_empty() {
            return rebalancing_step(&mut self.state, &candidates).map(Some);
        }
        let rec = progress_step(&mut self.state);
        if rec.changes.is_empty() {
            return Err(RebalanceError::Stalled {
                hosts: self.state.unconverged_hosts(),
            });
        }
        Ok(Some(rec))
    }
}

/// Full execution record of a rebalance.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceTrace {
    pub initial: HostAssignment,
    pub steps: Vec<StepRecord>,
    pub final_assignment: HostAssignment,
    pub min_serving_replicas: usize,
}

impl RebalanceTrace {
    /// Applies the first `upto` steps to `initial`.
    pub fn replay(&self, upto: usize) -> HostAssignment {
        let mut cur = self.initial.clone();
        for step in self.steps.iter().take(upto) {
            for ch in &step.changes {
                let segs = cur.0.entry(ch.host.clone()).or_default();
                for s in &ch.removed {
                    segs.remove(s);
                }
                segs.extend(ch.added.iter().cloned());
            }
        }
        cur
    }

    /// Lowest serving count seen at any point of any step.
    pub fn min_serving_observed(&self) -> Option<usize> {
        self.steps
            .iter()
            .flat_map(|s| {
                s.serving_during
                    .values()
                    .chain(s.serving_after.values())
                    .copied()
            })
            .min()
    }
}

pub fn run_rebalance(
    initial: &HostAssignment,
    desired: &HostAssignment,
    config: RebalanceConfig,
) -> Result<RebalanceTrace, RebalanceError> {
    let t = config.min_serving_replicas;
    let mut driver = Rebalancer::new(initial, desired, config)?;
    let mut steps = Vec::new();
    while let Some(step) = driver.next_step()? {
        steps.push(step);
    }
    Ok(RebalanceTrace {
        initial: initial.clone(),
        steps,
        final_assignment: driver.state.current_assignment(),
        min_serving_replicas: t,
    })
}
