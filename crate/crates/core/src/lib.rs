//! Resilience mechanisms for replicated OLAP clusters: maintenance-zone aware
//! placement, impact-free rebalancing, adaptive server selection and
//! workload resource budgeting, plus a deterministic discrete-time simulator
//! that exercises them together.
//!
//! The crate is `no_std` and only needs `alloc` and 64-bit atomics (the
//! budget ledger packs window epoch and remaining budget into one word).

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cluster;
pub mod placement;
pub mod rebalance;
pub mod selector;
pub mod budget;
pub mod rng;
pub mod sim;
