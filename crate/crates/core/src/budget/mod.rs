//! Workload budgets: per-host ledgers with windowed CPU and memory budgets,
//! admission and in-flight enforcement, the heap kill policy and budget
//! propagation from workload configs to hosts.
//!
//! Time is in nanoseconds throughout.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};
use core::sync::atomic::{AtomicU64, Ordering};

use crate::cluster::InstanceId;

pub mod accountant;

pub use accountant::{Accountant, TaskKey, ThreadSlot, UsageSnapshot};

/// Largest budget a ledger account can hold.
pub const MAX_BUDGET: u64 = (1 << REMAINING_BITS) - 1;
pub const DEFAULT_WINDOW_NS: u64 = 5_000_000_000;

const REMAINING_BITS: u32 = 44;
const EPOCH_MASK: u64 = (1 << (64 - REMAINING_BITS)) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "UPPERCASE"))]
pub enum Resource {
    Cpu,
    Mem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "UPPERCASE"))]
pub enum NodeType {
    Broker,
    Server,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Usage {
    pub cpu_ns: u64,
    pub mem_bytes: u64,
}

impl Usage {
    pub const ZERO: Usage = Usage { cpu_ns: 0, mem_bytes: 0 };

    pub fn new(cpu_ns: u64, mem_bytes: u64) -> Self {
        Self { cpu_ns, mem_bytes }
    }

    pub fn get(&self, r: Resource) -> u64 {
        match r {
            Resource::Cpu => self.cpu_ns,
            Resource::Mem => self.mem_bytes,
        }
    }

    pub fn saturating_sub(self, o: Usage) -> Usage {
        Usage::new(
            self.cpu_ns.saturating_sub(o.cpu_ns),
            self.mem_bytes.saturating_sub(o.mem_bytes),
        )
    }

    pub fn min(self, o: Usage) -> Usage {
        Usage::new(self.cpu_ns.min(o.cpu_ns), self.mem_bytes.min(o.mem_bytes))
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, o: Usage) -> Usage {
        Usage::new(
            self.cpu_ns.saturating_add(o.cpu_ns),
            self.mem_bytes.saturating_add(o.mem_bytes),
        )
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Usage) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "type", rename_all = "UPPERCASE", deny_unknown_fields)
)]
pub enum Propagation {
    Table { tables: Vec<String> },
    Tenant { tenant: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_type: NodeType,
    pub cpu_cost_ns: u64,
    pub memory_cost_bytes: u64,
    pub propagation: Propagation,
}

impl NodeConfig {
    pub fn budgets(&self) -> Usage {
        Usage::new(self.cpu_cost_ns, self.memory_cost_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadConfig {
    pub workload_name: String,
    pub node_configs: Vec<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("workload name is empty")]
    EmptyName,
    #[error("workload {workload}: {node_type:?} {resource:?} budget must be positive")]
    ZeroBudget {
        workload: String,
        node_type: NodeType,
        resource: Resource,
    },
    #[error("workload {workload}: {resource:?} budget {value} exceeds the maximum {max}")]
    BudgetTooLarge {
        workload: String,
        resource: Resource,
        value: u64,
        max: u64,
    },
    #[error("workload {workload}: node type {node_type:?} configured twice")]
    DuplicateNodeType { workload: String, node_type: NodeType },
    #[error("window length must be positive")]
    ZeroWindow,
}

fn check_budget(workload: &str, budgets: Usage) -> Result<(), ConfigError> {
    for r in [Resource::Cpu, Resource::Mem] {
        let v = budgets.get(r);
        if v > MAX_BUDGET {
            return Err(ConfigError::BudgetTooLarge {
                workload: workload.into(),
                resource: r,
                value: v,
                max: MAX_BUDGET,
            });
        }
    }
    Ok(())
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workload_name.is_empty() {
            return Err(ConfigError::EmptyName);
        }
        let mut seen = BTreeSet::new();
        for nc in &self.node_configs {
            if !seen.insert(nc.node_type) {
                return Err(ConfigError::DuplicateNodeType {
                    workload: self.workload_name.clone(),
                    node_type: nc.node_type,
                });
            }
            for (r, v) in [(Resource::Cpu, nc.cpu_cost_ns), (Resource::Mem, nc.memory_cost_bytes)] {
                if v == 0 {
                    return Err(ConfigError::ZeroBudget {
                        workload: self.workload_name.clone(),
                        node_type: nc.node_type,
                        resource: r,
                    });
                }
            }
            check_budget(&self.workload_name, nc.budgets())?;
        }
        Ok(())
    }

    pub fn node_config(&self, node_type: NodeType) -> Option<&NodeConfig> {
        self.node_configs.iter().find(|n| n.node_type == node_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChargeError {
    #[error("workload {workload} has {remaining} {resource:?} left, {requested} requested")]
    Exhausted {
        workload: String,
        resource: Resource,
        requested: u64,
        remaining: u64,
    },
    #[error("workload {0} is not configured on this host")]
    UnknownWorkload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeOutcome {
    Charged,
    /// The workload is not configured and the ledger exempts such traffic.
    Exempt,
}

fn pack(epoch: u64, remaining: u64) -> u64 {
    ((epoch & EPOCH_MASK) << REMAINING_BITS) | remaining
}

fn unpack(v: u64) -> (u64, u64) {
    (v >> REMAINING_BITS, v & MAX_BUDGET)
}

/// One (workload, resource) budget. Window epoch and remaining budget share
/// one atomic word so a charge can refill an expired window and test the
/// balance in a single compare-and-swap.
#[derive(Debug)]
struct Account {
    budget: u64,
    state: AtomicU64,
}

impl Account {
    fn new(budget: u64, epoch: u64) -> Self {
        Self {
            budget,
            state: AtomicU64::new(pack(epoch, budget)),
        }
    }

    /// Remaining budget as of `epoch`, refilling if the stored window is stale.
    fn current(&self, raw: u64, epoch: u64) -> u64 {
        let (e, rem) = unpack(raw);
        if e == epoch & EPOCH_MASK {
            rem
        } else {
            self.budget
        }
    }

    fn try_charge(&self, amount: u64, epoch: u64) -> Result<(), u64> {
        self.charge_if(amount, epoch, false)
    }

    /// Admission also needs something left, so a zero provisional charge
    /// cannot slip past an exhausted budget.
    fn try_admit(&self, amount: u64, epoch: u64) -> Result<(), u64> {
        self.charge_if(amount, epoch, true)
    }

    fn charge_if(&self, amount: u64, epoch: u64, need_left: bool) -> Result<(), u64> {
        let mut raw = self.state.load(Ordering::Acquire);
        loop {
            let rem = self.current(raw, epoch);
            if amount > rem || (need_left && rem == 0) {
                return Err(rem);
            }
            match self.state.compare_exchange_weak(
                raw,
                pack(epoch, rem - amount),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(()),
                Err(actual) => raw = actual,
            }
        }
    }

    /// Returns `amount` to the current window, capped at the budget. Credit
    /// for a window that has since expired is dropped.
    fn refund(&self, amount: u64, epoch: u64) {
        let mut raw = self.state.load(Ordering::Acquire);
        loop {
            let (e, rem) = unpack(raw);
            if e != epoch & EPOCH_MASK {
                return;
            }
            let next = pack(epoch, rem.saturating_add(amount).min(self.budget));
            match self
                .state
                .compare_exchange_weak(raw, next, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return,
                Err(actual) => raw = actual,
            }
        }
    }

    fn remaining(&self, epoch: u64) -> u64 {
        self.current(self.state.load(Ordering::Acquire), epoch)
    }

    fn refresh(&self, epoch: u64) {
        let mut raw = self.state.load(Ordering::Acquire);
        loop {
            let (e, _) = unpack(raw);
            if e == epoch & EPOCH_MASK {
                return;
            }
            match self.state.compare_exchange_weak(
                raw,
                pack(epoch, self.budget),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return,
                Err(actual) => raw = actual,
            }
        }
    }

    /// Raise adds the delta to what remains; lowering clamps.
    fn set_budget(&mut self, budget: u64, epoch: u64) {
        let rem = self.remaining(epoch);
        let rem = if budget >= self.budget {
            rem + (budget - self.budget)
        } else {
            rem.min(budget)
        };
        self.budget = budget;
        *self.state.get_mut() = pack(epoch, rem);
    }
}

#[derive(Debug)]
struct WorkloadEntry {
    origin_ns: u64,
    cpu: Account,
    mem: Account,
    rejections: AtomicU64,
    cancellations: AtomicU64,
}

impl WorkloadEntry {
    fn account(&self, r: Resource) -> &Account {
        match r {
            Resource::Cpu => &self.cpu,
            Resource::Mem => &self.mem,
        }
    }
}

/// Read-only view of one ledger account.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountView {
    pub window_budget: u64,
    pub remaining: u64,
    pub window_start_ns: u64,
    pub window_ns: u64,
}

impl AccountView {
    pub fn charged(&self) -> u64 {
        self.window_budget - self.remaining
    }
}

/// Budget ledger of one host. Charges take `&self` and are lock-free;
/// configuration changes take `&mut self`.
#[derive(Debug)]
pub struct BudgetLedger {
    window_ns: u64,
    strict: bool,
    entries: BTreeMap<String, WorkloadEntry>,
}

impl BudgetLedger {
    pub fn new(window_ns: u64) -> Result<Self, ConfigError> {
        if window_ns == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        Ok(Self {
            window_ns,
            strict: false,
            entries: BTreeMap::new(),
        })
    }

    /// Reject traffic of unconfigured workloads instead of exempting it.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn window_ns(&self) -> u64 {
        self.window_ns
    }

    pub fn workloads(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_configured(&self, workload: &str) -> bool {
        self.entries.contains_key(workload)
    }

    fn epoch(&self, e: &WorkloadEntry, now_ns: u64) -> u64 {
        now_ns.saturating_sub(e.origin_ns) / self.window_ns
    }

    /// Idempotent: applying the same budgets twice equals applying them once.
    pub fn add_or_update_workload(
        &mut self,
        workload: &str,
        budgets: Usage,
        now_ns: u64,
    ) -> Result<(), ConfigError> {
        check_budget(workload, budgets)?;
        if workload.is_empty() {
            return Err(ConfigError::EmptyName);
        }
        let window = self.window_ns;
        match self.entries.get_mut(workload) {
            Some(e) => {
                let epoch = now_ns.saturating_sub(e.origin_ns) / window;
                e.cpu.set_budget(budgets.cpu_ns, epoch);
                e.mem.set_budget(budgets.mem_bytes, epoch);
            }
            None => {
                self.entries.insert(
                    workload.into(),
                    WorkloadEntry {
                        origin_ns: now_ns,
                        cpu: Account::new(budgets.cpu_ns, 0),
                        mem: Account::new(budgets.mem_bytes, 0),
                        rejections: AtomicU64::new(0),
                        cancellations: AtomicU64::new(0),
                    },
                );
            }
        }
        Ok(())
    }

    pub fn remove_workload(&mut self, workload: &str) -> bool {
        self.entries.remove(workload).is_some()
    }

    /// Accepted iff the current window has at least `amount` left.
    pub fn try_charge(
        &self,
        workload: &str,
        resource: Resource,
        amount: u64,
        now_ns: u64,
    ) -> Result<ChargeOutcome, ChargeError> {
        self.charge(workload, resource, amount, now_ns, false)
    }

    fn charge(
        &self,
        workload: &str,
        resource: Resource,
        amount: u64,
        now_ns: u64,
        admission: bool,
    ) -> Result<ChargeOutcome, ChargeError> {
        let Some(e) = self.entries.get(workload) else {
            return if self.strict {
                Err(ChargeError::UnknownWorkload(workload.into()))
            } else {
                Ok(ChargeOutcome::Exempt)
            };
        };
        let epoch = self.epoch(e, now_ns);
        let account = e.account(resource);
        let charged = if admission {
            account.try_admit(amount, epoch)
        } else {
            account.try_charge(amount, epoch)
        };
        charged
            .map(|()| ChargeOutcome::Charged)
            .map_err(|remaining| ChargeError::Exhausted {
                workload: workload.into(),
                resource,
                requested: amount,
                remaining,
            })
    }

    /// Gives back part of an earlier charge in the same window.
    pub fn refund(&self, workload: &str, resource: Resource, amount: u64, now_ns: u64) {
        if let Some(e) = self.entries.get(workload) {
            e.account(resource).refund(amount, self.epoch(e, now_ns));
        }
    }

    /// Refills every account whose window has expired; the window start
    /// advances by whole windows and skipped windows are not banked.
    pub fn window_reset(&self, now_ns: u64) {
        for e in self.entries.values() {
            let epoch = self.epoch(e, now_ns);
            e.cpu.refresh(epoch);
            e.mem.refresh(epoch);
        }
    }

    pub fn view(&self, workload: &str, resource: Resource, now_ns: u64) -> Option<AccountView> {
        let e = self.entries.get(workload)?;
        let epoch = self.epoch(e, now_ns);
        let acct = e.account(resource);
        Some(AccountView {
            window_budget: acct.budget,
            remaining: acct.remaining(epoch),
            window_start_ns: e.origin_ns + epoch * self.window_ns,
            window_ns: self.window_ns,
        })
    }

    pub fn rejections(&self, workload: &str) -> u64 {
        self.entries
            .get(workload)
            .map_or(0, |e| e.rejections.load(Ordering::Relaxed))
    }

    pub fn cancellations(&self, workload: &str) -> u64 {
        self.entries
            .get(workload)
            .map_or(0, |e| e.cancellations.load(Ordering::Relaxed))
    }

    fn note_rejection(&self, workload: &str) {
        if let Some(e) = self.entries.get(workload) {
            e.rejections.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn note_cancellation(&self, workload: &str) {
        if let Some(e) = self.entries.get(workload) {
            e.cancellations.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Two-phase provisional charge: CPU, then MEM; a MEM failure refunds
    /// the CPU part. An exhausted resource rejects even a zero charge. The admitted amount is held as a reservation that later
    /// deltas draw down before touching the ledger again.
    pub fn admit_query(
        &self,
        workload: &str,
        provisional: Usage,
        now_ns: u64,
    ) -> Result<QueryReservation, ChargeError> {
        let cpu = self.charge(workload, Resource::Cpu, provisional.cpu_ns, now_ns, true);
        let cpu = match cpu {
            Ok(o) => o,
            Err(e) => {
                self.note_rejection(workload);
                return Err(e);
            }
        };
        if let Err(e) = self.charge(workload, Resource::Mem, provisional.mem_bytes, now_ns, true) {
            if cpu == ChargeOutcome::Charged {
                self.refund(workload, Resource::Cpu, provisional.cpu_ns, now_ns);
            }
            self.note_rejection(workload);
            return Err(e);
        }
        Ok(QueryReservation {
            workload: workload.into(),
            reserved: if cpu == ChargeOutcome::Charged {
                provisional
            } else {
                Usage::ZERO
            },
            charged: Usage::ZERO,
            cancelled: false,
        })
    }

    /// Charges one accounting interval's deltas, CPU first. A failed charge
    /// stops at that resource and asks for cancellation.
    pub fn enforce_thread_deltas(
        &self,
        workload: &str,
        delta: Usage,
        now_ns: u64,
    ) -> Enforcement {
        for r in [Resource::Cpu, Resource::Mem] {
            if self.try_charge(workload, r, delta.get(r), now_ns).is_err() {
                self.note_cancellation(workload);
                return Enforcement::Cancel(r);
            }
        }
        Enforcement::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enforcement {
    Continue,
    Cancel(Resource),
}

/// Budget held by an admitted query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryReservation {
    pub workload: String,
    /// Provisionally charged but not yet consumed.
    pub reserved: Usage,
    /// Charged to the ledger through deltas, beyond the reservation.
    pub charged: Usage,
    pub cancelled: bool,
}

impl QueryReservation {
    /// Consumes `delta`, first from the reservation, then from the ledger.
    pub fn charge(&mut self, ledger: &BudgetLedger, delta: Usage, now_ns: u64) -> Enforcement {
        if self.cancelled {
            return Enforcement::Cancel(Resource::Cpu);
        }
        let covered = delta.min(self.reserved);
        self.reserved = self.reserved.saturating_sub(covered);
        let rest = delta.saturating_sub(covered);
        let out = ledger.enforce_thread_deltas(&self.workload, rest, now_ns);
        match out {
            Enforcement::Continue => self.charged += rest,
            Enforcement::Cancel(Resource::Mem) => self.charged.cpu_ns += rest.cpu_ns,
            Enforcement::Cancel(Resource::Cpu) => {}
        }
        if out != Enforcement::Continue {
            self.cancelled = true;
        }
        out
    }

    /// Returns any unconsumed reservation to the ledger.
    pub fn release(self, ledger: &BudgetLedger, now_ns: u64) {
        for r in [Resource::Cpu, Resource::Mem] {
            let v = self.reserved.get(r);
            if v > 0 {
                ledger.refund(&self.workload, r, v, now_ns);
            }
        }
    }
}

/// Heap kill tiers: at 0.99 every active query, at 0.85 the single query
/// with the most memory (ties by lowest id), otherwise none.
pub fn kill_policy(snapshot: &UsageSnapshot) -> BTreeSet<u64> {
    kill_policy_with(snapshot, 0.85, 0.99)
}

pub fn kill_policy_with(snapshot: &UsageSnapshot, top_tier: f64, all_tier: f64) -> BTreeSet<u64> {
    if snapshot.heap_fraction >= all_tier {
        return snapshot.active_query_usage.keys().copied().collect();
    }
    if snapshot.heap_fraction >= top_tier {
        let mut best: Option<(u64, u64)> = None;
        for (&q, u) in &snapshot.active_query_usage {
            if best.is_none_or(|(_, m)| u.mem_bytes > m) {
                best = Some((q, u.mem_bytes));
            }
        }
        return best.map(|(q, _)| q).into_iter().collect();
    }
    BTreeSet::new()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HostInfo {
    pub tables: BTreeSet<String>,
    pub tenant: String,
    pub node_type: Option<NodeType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PropagationWarning {
    NoMatchingHost {
        workload: String,
        node_type: NodeType,
    },
}

/// Hosts receiving each node config of `config`, with the full per-host
/// budget (budgets are never divided across hosts).
pub fn propagate_budgets(
    config: &WorkloadConfig,
    topology: &BTreeMap<InstanceId, HostInfo>,
) -> (BTreeMap<InstanceId, Usage>, Vec<PropagationWarning>) {
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for nc in &config.node_configs {
        let mut matched = false;
        for (host, info) in topology {
            if info.node_type != Some(nc.node_type) {
                continue;
            }
            let hit = match &nc.propagation {
                Propagation::Table { tables } => tables.iter().any(|t| info.tables.contains(t)),
                Propagation::Tenant { tenant } => &info.tenant == tenant,
            };
            if hit {
                matched = true;
                out.insert(host.clone(), nc.budgets());
            }
        }
        if !matched {
            warnings.push(PropagationWarning::NoMatchingHost {
                workload: config.workload_name.clone(),
                node_type: nc.node_type,
            });
        }
    }
    (out, warnings)
}

/// Ledgers of every host, each updated independently.
#[derive(Debug)]
pub struct HostLedgers {
    pub window_ns: u64,
    pub ledgers: BTreeMap<InstanceId, BudgetLedger>,
}

impl HostLedgers {
    pub fn new(window_ns: u64) -> Result<Self, ConfigError> {
        if window_ns == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        Ok(Self {
            window_ns,
            ledgers: BTreeMap::new(),
        })
    }

    pub fn ledger(&self, host: &InstanceId) -> Option<&BudgetLedger> {
        self.ledgers.get(host)
    }

    /// Validates `config` and pushes it to the hosts it propagates to.
    pub fn apply(
        &mut self,
        config: &WorkloadConfig,
        topology: &BTreeMap<InstanceId, HostInfo>,
        now_ns: u64,
    ) -> Result<Vec<PropagationWarning>, ConfigError> {
        config.validate()?;
        let (targets, warnings) = propagate_budgets(config, topology);
        for (host, budgets) in targets {
            let window = self.window_ns;
            let ledger = match self.ledgers.entry(host) {
                alloc::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                alloc::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(BudgetLedger::new(window)?)
                }
            };
            ledger.add_or_update_workload(&config.workload_name, budgets, now_ns)?;
        }
        Ok(warnings)
    }
}
