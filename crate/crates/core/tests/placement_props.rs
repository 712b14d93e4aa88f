mod common;

use std::collections::BTreeMap;

use olapguard_core::cluster::{AssignmentMatrix, Instance};
use olapguard_core::placement::{repair, threshold};
use proptest::prelude::*;

/// Arbitrary zone labels, balanced or not.
fn matrix() -> impl Strategy<Value = (AssignmentMatrix, usize)> {
    (1usize..=6, 1usize..=6, 2usize..=5).prop_flat_map(|(n, r, mz)| {
        proptest::collection::vec(0..mz, n * r).prop_map(move |zones| {
            let rows = zones
                .chunks(r)
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, z)| Instance::new(format!("h{i}-{j}"), format!("z{z}")))
                        .collect()
                })
                .collect();
            (AssignmentMatrix::from_rows(rows, mz).unwrap(), mz)
        })
    })
}

fn bad_rows(m: &AssignmentMatrix, mz: usize) -> Vec<usize> {
    let limit = m.replica_groups().div_ceil(mz);
    (0..m.num_rows())
        .filter(|&i| {
            let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
            for inst in m.row(i) {
                *hist.entry(inst.mz.as_str()).or_default() += 1;
            }
            hist.values().any(|&n| n > limit)
        })
        .collect()
}

fn zone_multiset(m: &AssignmentMatrix) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for inst in m.instances() {
        *out.entry(inst.mz.as_str().to_string()).or_default() += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balanced_lifecycles_always_repair(seed in any::<u64>(), ops in 1usize..16) {
        common::lifecycle(seed, ops).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn repair_only_improves((m, mz) in matrix()) {
        let out = repair(&m);
        prop_assert_eq!(out.replay(&m), out.matrix.clone());
        for s in &out.swaps {
            prop_assert!(s.overpopulated_after[0] <= s.overpopulated_before[0]);
            prop_assert!(s.overpopulated_after[1] <= s.overpopulated_before[1]);
            // fewer overpopulated zones, or else strictly less excess
            let fewer = s.overpopulated_after.iter().sum::<usize>() < s.overpopulated_before.iter().sum::<usize>();
            prop_assert!(fewer || s.excess_delta() < 0, "{:?}", s);
        }
        prop_assert_eq!(&out.residual_bad_rows, &bad_rows(&out.matrix, mz));
        prop_assert_eq!(zone_multiset(&out.matrix), zone_multiset(&m));
        let mut ids: Vec<_> = out.matrix.instances().map(|i| i.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), m.instances().count());
        // a second pass finds nothing left to improve
        prop_assert!(repair(&out.matrix).swaps.is_empty());
    }

    #[test]
    fn good_rows_are_never_touched_when_nothing_is_bad((m, mz) in matrix()) {
        if bad_rows(&m, mz).is_empty() {
            let out = repair(&m);
            prop_assert!(out.swaps.is_empty());
            prop_assert_eq!(out.matrix, m);
        }
    }

    #[test]
    fn threshold_is_smallest_fitting_limit(r in 1usize..200, mz in 1usize..20) {
        let t = (1..).find(|t| t * mz >= r).unwrap();
        prop_assert_eq!(threshold(r, mz), t);
    }
}
