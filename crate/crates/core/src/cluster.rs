//! Cluster vocabulary: instances, maintenance zones, the replica-group by
//! mirrored-server-set assignment matrix, and the segment layouts derived
//! from it.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(transparent))]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.into())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Maintenance-zone label. Labels are opaque and ordered lexicographically,
    /// which is the tie-break order used everywhere downstream.
    Mz
);
string_id!(
    /// Unique instance (host) identifier.
    InstanceId
);
string_id!(
    /// Opaque segment identifier.
    SegmentId
);

/// A server instance living in one maintenance zone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Instance {
    pub id: InstanceId,
    pub mz: Mz,
}

impl Instance {
    pub fn new(id: impl Into<String>, mz: impl Into<String>) -> Self {
        Self {
            id: InstanceId(id.into()),
            mz: Mz(mz.into()),
        }
    }
}

/// A segment with an optional size used for transfer-time estimates.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub id: SegmentId,
    pub size_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClusterError {
    #[error("instance pool holds {available} instances but {needed} are required")]
    InsufficientPool { needed: usize, available: usize },
    #[error("instance pool has no maintenance zones")]
    EmptyMzSet,
    #[error("matrix shape must be at least 1x1, got {rows} rows x {cols} replica groups")]
    InvalidShape { rows: usize, cols: usize },
    #[error("instance {0} appears more than once")]
    DuplicateInstance(InstanceId),
    #[error("row {row} has {len} cells, expected {expected}")]
    RaggedRow { row: usize, len: usize, expected: usize },
    #[error("segment {segment} maps to row {row} but the matrix has {rows} rows")]
    DanglingRow {
        segment: SegmentId,
        row: usize,
        rows: usize,
    },
}

/// Instance layout: one column per replica group, one row per mirrored server
/// set. Every cell is occupied and no instance appears twice.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssignmentMatrix {
    rows: Vec<Vec<Instance>>,
    mz_count: usize,
}

impl AssignmentMatrix {
    /// Builds a matrix from explicit rows. `mz_count` is raised to the number
    /// of distinct zones present if it is smaller.
    pub fn from_rows(rows: Vec<Vec<Instance>>, mz_count: usize) -> Result<Self, ClusterError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(ClusterError::InvalidShape {
                rows: rows.len(),
                cols,
            });
        }
        let mut seen = BTreeSet::new();
        let mut zones = BTreeSet::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(ClusterError::RaggedRow {
                    row: i,
                    len: row.len(),
                    expected: cols,
                });
            }
            for inst in row {
                if !seen.insert(&inst.id) {
                    return Err(ClusterError::DuplicateInstance(inst.id.clone()));
                }
                zones.insert(&inst.mz);
            }
        }
        let mz_count = mz_count.max(zones.len());
        Ok(Self { rows, mz_count })
    }

    /// Number of replica groups (columns), `R`.
    pub fn replica_groups(&self) -> usize {
        self.rows[0].len()
    }

    /// Number of mirrored server sets (rows), `N_i/rg`.
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Number of maintenance zones in the cluster, `MZ`.
    pub fn mz_count(&self) -> usize {
        self.mz_count
    }

    pub fn rows(&self) -> &[Vec<Instance>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Instance] {
        &self.rows[i]
    }

    pub fn cell(&self, row: usize, col: usize) -> &Instance {
        &self.rows[row][col]
    }

    pub fn column(&self, col: usize) -> Vec<Instance> {
        self.rows.iter().map(|r| r[col].clone()).collect()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.rows.iter().flatten()
    }

    /// Locates an instance by id as `(row, col)`.
    pub fn position(&self, id: &InstanceId) -> Option<(usize, usize)> {
        self.rows.iter().enumerate().find_map(|(i, row)| {
            row.iter().position(|inst| &inst.id == id).map(|j| (i, j))
        })
    }

    pub(crate) fn rows_mut(&mut self) -> &mut Vec<Vec<Instance>> {
        &mut self.rows
    }

    pub(crate) fn set_mz_count(&mut self, mz_count: usize) {
        self.mz_count = mz_count;
    }

    pub(crate) fn swap_cells(&mut self, a: (usize, usize), b: (usize, usize)) {
        let tmp = self.rows[a.0][a.1].clone();
        self.rows[a.0][a.1] = core::mem::replace(&mut self.rows[b.0][b.1], tmp);
    }
}

/// Fills an `instances_per_rg x num_replica_groups` matrix from `pool`.
///
/// Instances are bucketed by zone (keeping pool order inside a bucket) and
/// cells are filled row-major while cycling over the buckets, largest bucket
/// first with ties by label. With a balanced pool every row ends up with at
/// most `ceil(R / MZ)` instances of any zone.
pub fn build_matrix(
    num_replica_groups: usize,
    instances_per_rg: usize,
    pool: &[Instance],
) -> Result<AssignmentMatrix, ClusterError> {
    if num_replica_groups == 0 || instances_per_rg == 0 {
        return Err(ClusterError::InvalidShape {
            rows: instances_per_rg,
            cols: num_replica_groups,
        });
    }
    if pool.is_empty() {
        return Err(ClusterError::EmptyMzSet);
    }
    let needed = num_replica_groups * instances_per_rg;
    if pool.len() < needed {
        return Err(ClusterError::InsufficientPool {
            needed,
            available: pool.len(),
        });
    }

    let mut seen = BTreeSet::new();
    let mut by_zone: BTreeMap<&Mz, VecDeque<&Instance>> = BTreeMap::new();
    for inst in pool {
        if !seen.insert(&inst.id) {
            return Err(ClusterError::DuplicateInstance(inst.id.clone()));
        }
        by_zone.entry(&inst.mz).or_default().push_back(inst);
    }
    let mz_count = by_zone.len();
    let mut buckets: Vec<VecDeque<&Instance>> = by_zone.into_values().collect();
    // stable sort keeps label order among equally sized buckets
    buckets.sort_by_key(|b| core::cmp::Reverse(b.len()));

    let mut cursor = 0;
    let mut next = || -> &Instance {
        loop {
            let idx = cursor % buckets.len();
            cursor += 1;
            if let Some(inst) = buckets[idx].pop_front() {
                return inst;
            }
        }
    };

    let rows = (0..instances_per_rg)
        .map(|_| (0..num_replica_groups).map(|_| next().clone()).collect())
        .collect();
    Ok(AssignmentMatrix { rows, mz_count })
}

/// Segment to mirrored-server-set (row) mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(transparent))]
pub struct SegmentMap(pub BTreeMap<SegmentId, usize>);

impl SegmentMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, segment: impl Into<SegmentId>, row: usize) {
        self.0.insert(segment.into(), row);
    }

    pub fn row_of(&self, segment: &SegmentId) -> Option<usize> {
        self.0.get(segment).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SegmentId, usize)> {
        self.0.iter().map(|(s, r)| (s, *r))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Spreads `segments` over `rows` mirrored server sets in order.
    pub fn round_robin<I, S>(segments: I, rows: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<SegmentId>,
    {
        Self(
            segments
                .into_iter()
                .enumerate()
                .map(|(i, s)| (s.into(), i % rows.max(1)))
                .collect(),
        )
    }
}

/// Host to hosted-segment-set mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(transparent))]
pub struct HostAssignment(pub BTreeMap<InstanceId, BTreeSet<SegmentId>>);

impl HostAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hosts(&self) -> impl Iterator<Item = &InstanceId> {
        self.0.keys()
    }

    pub fn segments(&self, host: &InstanceId) -> Option<&BTreeSet<SegmentId>> {
        self.0.get(host)
    }

    pub fn insert(&mut self, host: impl Into<InstanceId>, segment: impl Into<SegmentId>) {
        self.0.entry(host.into()).or_default().insert(segment.into());
    }

    pub fn ensure_host(&mut self, host: impl Into<InstanceId>) {
        self.0.entry(host.into()).or_default();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&InstanceId, &BTreeSet<SegmentId>)> {
        self.0.iter()
    }

    /// Every segment mentioned on any host.
    pub fn all_segments(&self) -> BTreeSet<SegmentId> {
        self.0.values().flatten().cloned().collect()
    }

    /// Number of hosts holding each segment.
    pub fn replica_counts(&self) -> BTreeMap<SegmentId, usize> {
        let mut out = BTreeMap::new();
        for seg in self.0.values().flatten() {
            *out.entry(seg.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Hosts holding `segment`, in id order.
    pub fn holders(&self, segment: &SegmentId) -> Vec<&InstanceId> {
        self.0
            .iter()
            .filter(|(_, segs)| segs.contains(segment))
            .map(|(h, _)| h)
            .collect()
    }
}

/// Expands the mirrored layout: the instance at cell `(i, j)` hosts every
/// segment mapped to row `i`. Every matrix instance gets an entry, possibly
/// empty.
pub fn derive_host_assignment(
    matrix: &AssignmentMatrix,
    segmap: &SegmentMap,
) -> Result<HostAssignment, ClusterError> {
    let mut out = HostAssignment::new();
    for inst in matrix.instances() {
        out.ensure_host(inst.id.clone());
    }
    for (seg, row) in segmap.iter() {
        if row >= matrix.num_rows() {
            return Err(ClusterError::DanglingRow {
                segment: seg.clone(),
                row,
                rows: matrix.num_rows(),
            });
        }
        for inst in matrix.row(row) {
            out.insert(inst.id.clone(), seg.clone());
        }
    }
    Ok(out)
}

/// Per-zone instance count of a row.
pub fn mz_histogram(row: &[Instance]) -> BTreeMap<Mz, usize> {
    let mut out = BTreeMap::new();
    for inst in row {
        *out.entry(inst.mz.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn pool(zones: &[&str]) -> Vec<Instance> {
        zones
            .iter()
            .enumerate()
            .map(|(i, z)| Instance::new(format!("i{i}"), *z))
            .collect()
    }

    fn zones_of(row: &[Instance]) -> Vec<&str> {
        row.iter().map(|i| i.mz.as_str()).collect()
    }

    #[test]
    fn build_single_row_one_per_zone() {
        let m = build_matrix(3, 1, &pool(&["A", "B", "C"])).unwrap();
        assert_eq!(zones_of(m.row(0)), ["A", "B", "C"]);
        assert_eq!(m.mz_count(), 3);
    }

    #[test]
    fn build_single_column() {
        let m = build_matrix(1, 3, &pool(&["A", "B", "C"])).unwrap();
        let rows: Vec<_> = m.rows().iter().map(|r| zones_of(r)).collect();
        assert_eq!(rows, [vec!["A"], vec!["B"], vec!["C"]]);
    }

    #[test]
    fn build_two_rows_cycles_buckets() {
        let m = build_matrix(3, 2, &pool(&["A", "A", "B", "B", "C", "C"])).unwrap();
        assert_eq!(zones_of(m.row(0)), ["A", "B", "C"]);
        assert_eq!(zones_of(m.row(1)), ["A", "B", "C"]);
        // bucket order preserves pool order inside a zone
        assert_eq!(m.cell(0, 0).id.as_str(), "i0");
        assert_eq!(m.cell(1, 0).id.as_str(), "i1");
    }

    #[test]
    fn build_is_deterministic_and_errors() {
        let p = pool(&["B", "A", "C", "A", "B", "C", "A"]);
        assert_eq!(build_matrix(2, 3, &p).unwrap(), build_matrix(2, 3, &p).unwrap());
        assert_eq!(
            build_matrix(3, 3, &p),
            Err(ClusterError::InsufficientPool {
                needed: 9,
                available: 7
            })
        );
        assert_eq!(build_matrix(1, 1, &[]), Err(ClusterError::EmptyMzSet));
        let dup = vec![Instance::new("x", "A"), Instance::new("x", "B")];
        assert!(matches!(
            build_matrix(2, 1, &dup),
            Err(ClusterError::DuplicateInstance(_))
        ));
    }

    #[test]
    fn larger_bucket_is_drained_first() {
        // 7 instances, 3 zones: A has the extra one and must lead the cycle
        let p = pool(&["B", "A", "C", "A", "B", "C", "A"]);
        let m = build_matrix(7, 1, &p).unwrap();
        assert_eq!(zones_of(m.row(0)), ["A", "B", "C", "A", "B", "C", "A"]);
    }

    #[test]
    fn host_assignment_expansion() {
        let m = build_matrix(3, 1, &pool(&["A", "B", "C"])).unwrap();
        let mut sm = SegmentMap::new();
        sm.insert("s1", 0);
        let ha = derive_host_assignment(&m, &sm).unwrap();
        assert_eq!(ha.0.len(), 3);
        for (_, segs) in ha.iter() {
            assert_eq!(segs.iter().map(SegmentId::as_str).collect::<Vec<_>>(), ["s1"]);
        }

        let empty = derive_host_assignment(&m, &SegmentMap::new()).unwrap();
        assert!(empty.iter().all(|(_, s)| s.is_empty()));
    }

    #[test]
    fn host_assignment_two_rows() {
        let m = build_matrix(2, 2, &pool(&["A", "B", "A", "B"])).unwrap();
        let mut sm = SegmentMap::new();
        sm.insert("s1", 0);
        sm.insert("s2", 1);
        sm.insert("s3", 0);
        let ha = derive_host_assignment(&m, &sm).unwrap();
        for inst in m.row(0) {
            let segs: Vec<_> = ha.segments(&inst.id).unwrap().iter().map(|s| s.as_str()).collect();
            assert_eq!(segs, ["s1", "s3"]);
        }
        for inst in m.row(1) {
            let segs: Vec<_> = ha.segments(&inst.id).unwrap().iter().map(|s| s.as_str()).collect();
            assert_eq!(segs, ["s2"]);
        }
        assert!(ha.replica_counts().values().all(|&c| c == 2));
    }

    #[test]
    fn dangling_row_is_rejected() {
        let m = build_matrix(1, 1, &pool(&["A"])).unwrap();
        let mut sm = SegmentMap::new();
        sm.insert("s9", 4);
        assert!(matches!(
            derive_host_assignment(&m, &sm),
            Err(ClusterError::DanglingRow { row: 4, .. })
        ));
    }

    #[test]
    fn histogram() {
        let h = mz_histogram(&pool(&["A", "A", "B"]));
        assert_eq!(h.get(&Mz::from("A")), Some(&2));
        assert_eq!(h.get(&Mz::from("B")), Some(&1));
        assert!(mz_histogram(&[]).is_empty());
        let h = mz_histogram(&pool(&["A", "B", "C"]));
        assert_eq!(h.values().sum::<usize>(), 3);
    }

    #[test]
    fn from_rows_validates() {
        let rows = vec![pool(&["A", "B"]), vec![Instance::new("z", "C")]];
        assert!(matches!(
            AssignmentMatrix::from_rows(rows, 3),
            Err(ClusterError::RaggedRow { row: 1, .. })
        ));
    }
}
