//! Maintenance-zone aware placement.
//!
//! A row (mirrored server set) is *good* when no zone holds more than
//! `ceil(R / MZ)` of its instances; that single threshold covers both the
//! `R <= MZ` case (at most one replica per zone) and the `R > MZ` case.
//! [`repair`] restores goodness after lifecycle events by swapping instances
//! between rows, never letting any row gain an overpopulated zone.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::cluster::{AssignmentMatrix, ClusterError, Instance, InstanceId, Mz};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("cells ({row}, {col_a}) and ({row}, {col_b}) are in the same row")]
    SameRow { row: usize, col_a: usize, col_b: usize },
    #[error("cell ({row}, {col}) is outside the matrix")]
    CellOutOfBounds { row: usize, col: usize },
    #[error("expected {expected} new instances, got {got}")]
    WrongInstanceCount { expected: usize, got: usize },
    #[error("instance {0} is not in the matrix")]
    UnknownInstance(InstanceId),
    #[error("instance {0} is already in the matrix")]
    DuplicateInstance(InstanceId),
    #[error("removal set is not one instance per row and the replacement pool has {pool} of {needed} instances")]
    InvalidRemoval { needed: usize, pool: usize },
    #[error("cannot remove the last replica group")]
    LastReplicaGroup,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Per-row, per-zone multiplicity limit, `ceil(R / MZ)`.
pub fn threshold(replica_groups: usize, mz_count: usize) -> usize {
    replica_groups.div_ceil(mz_count.max(1))
}

/// Zones exceeding the row threshold and the total surplus above it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RowStatus {
    pub overpopulated: BTreeSet<Mz>,
    pub excess: usize,
}

impl RowStatus {
    pub fn is_good(&self) -> bool {
        self.excess == 0
    }
}

pub fn row_status(row: &[Instance], replica_groups: usize, mz_count: usize) -> RowStatus {
    let t = threshold(replica_groups, mz_count);
    let mut status = RowStatus::default();
    for (mz, count) in crate::cluster::mz_histogram(row) {
        if count > t {
            status.excess += count - t;
            status.overpopulated.insert(mz);
        }
    }
    status
}

/// Matrix coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// One executed swap with the overpopulated-zone counts and excess of both
/// rows before and after.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SwapRecord {
    pub a: Cell,
    pub b: Cell,
    pub overpopulated_before: [usize; 2],
    pub overpopulated_after: [usize; 2],
    pub excess_before: [usize; 2],
    pub excess_after: [usize; 2],
}

impl SwapRecord {
    /// Change in total excess of the two rows (negative is progress).
    pub fn excess_delta(&self) -> isize {
        (self.excess_after[0] + self.excess_after[1]) as isize
            - (self.excess_before[0] + self.excess_before[1]) as isize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairOutcome {
    pub matrix: AssignmentMatrix,
    pub swaps: Vec<SwapRecord>,
    /// Rows still bad at termination. Only non-empty when the pool violates
    /// the balanced-zone precondition.
    pub residual_bad_rows: Vec<usize>,
}

impl RepairOutcome {
    fn unchanged(matrix: AssignmentMatrix) -> Self {
        Self {
            matrix,
            swaps: Vec::new(),
            residual_bad_rows: Vec::new(),
        }
    }

    pub fn is_best_effort(&self) -> bool {
        !self.residual_bad_rows.is_empty()
    }

    /// Distinct rows touched by at least one swap.
    pub fn rows_modified(&self) -> BTreeSet<usize> {
        self.swaps.iter().flat_map(|s| [s.a.row, s.b.row]).collect()
    }

    /// Replays the swap list on `original`.
    pub fn replay(&self, original: &AssignmentMatrix) -> AssignmentMatrix {
        let mut m = original.clone();
        for s in &self.swaps {
            m.swap_cells((s.a.row, s.a.col), (s.b.row, s.b.col));
        }
        m
    }
}

/// Zone-index view of a matrix with per-row histograms.
struct Grid {
    zones: Vec<Vec<usize>>,
    hist: Vec<Vec<usize>>,
    threshold: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct RowScore {
    overpopulated: usize,
    excess: usize,
}

impl RowScore {
    fn of(hist: &[usize], t: usize) -> Self {
        hist.iter().fold(
            RowScore {
                overpopulated: 0,
                excess: 0,
            },
            |acc, &c| RowScore {
                overpopulated: acc.overpopulated + usize::from(c > t),
                excess: acc.excess + c.saturating_sub(t),
            },
        )
    }
}

struct SwapEffect {
    before: [RowScore; 2],
    after: [RowScore; 2],
}

impl SwapEffect {
    /// Neither row gains overpopulated zones and their total strictly drops.
    fn is_valid(&self) -> bool {
        self.after[0].overpopulated <= self.before[0].overpopulated
            && self.after[1].overpopulated <= self.before[1].overpopulated
            && self.after[0].overpopulated + self.after[1].overpopulated
                < self.before[0].overpopulated + self.before[1].overpopulated
    }

    /// Fallback move: no row gains overpopulated zones and total excess
    /// strictly drops.
    fn is_excess_reducing(&self) -> bool {
        self.after[0].overpopulated <= self.before[0].overpopulated
            && self.after[1].overpopulated <= self.before[1].overpopulated
            && self.excess_drop() > 0
    }

    fn overpopulated_drop(&self) -> usize {
        self.before[0].overpopulated + self.before[1].overpopulated
            - self.after[0].overpopulated
            - self.after[1].overpopulated
    }

    fn excess_drop(&self) -> isize {
        (self.before[0].excess + self.before[1].excess) as isize
            - (self.after[0].excess + self.after[1].excess) as isize
    }
}

impl Grid {
    fn new(matrix: &AssignmentMatrix) -> (Self, Vec<Mz>) {
        let labels: Vec<Mz> = matrix
            .instances()
            .map(|i| i.mz.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = |mz: &Mz| labels.binary_search(mz).expect("label collected above");
        let zones: Vec<Vec<usize>> = matrix
            .rows()
            .iter()
            .map(|row| row.iter().map(|i| index(&i.mz)).collect())
            .collect();
        let hist = zones
            .iter()
            .map(|row| {
                let mut h = alloc::vec![0; labels.len()];
                for &z in row {
                    h[z] += 1;
                }
                h
            })
            .collect();
        let grid = Grid {
            zones,
            hist,
            threshold: threshold(matrix.replica_groups(), matrix.mz_count()),
        };
        (grid, labels)
    }

    fn score(&self, row: usize) -> RowScore {
        RowScore::of(&self.hist[row], self.threshold)
    }

    fn effect(&self, a: Cell, b: Cell) -> SwapEffect {
        let x = self.zones[a.row][a.col];
        let y = self.zones[b.row][b.col];
        let before = [self.score(a.row), self.score(b.row)];
        if x == y {
            return SwapEffect {
                before,
                after: before,
            };
        }
        let mut ha = self.hist[a.row].clone();
        let mut hb = self.hist[b.row].clone();
        ha[x] -= 1;
        ha[y] += 1;
        hb[y] -= 1;
        hb[x] += 1;
        SwapEffect {
            before,
            after: [
                RowScore::of(&ha, self.threshold),
                RowScore::of(&hb, self.threshold),
            ],
        }
    }

    fn apply(&mut self, a: Cell, b: Cell) {
        let x = self.zones[a.row][a.col];
        let y = self.zones[b.row][b.col];
        self.hist[a.row][x] -= 1;
        self.hist[a.row][y] += 1;
        self.hist[b.row][y] -= 1;
        self.hist[b.row][x] += 1;
        self.zones[a.row][a.col] = y;
        self.zones[b.row][b.col] = x;
    }
}

fn check_cell(matrix: &AssignmentMatrix, c: Cell) -> Result<(), PlacementError> {
    if c.row >= matrix.num_rows() || c.col >= matrix.replica_groups() {
        return Err(PlacementError::CellOutOfBounds {
            row: c.row,
            col: c.col,
        });
    }
    Ok(())
}

/// Whether exchanging the instances at `a` and `b` is a legal repair move:
/// `a` must hold an overpopulated zone of its row, neither row may gain
/// overpopulated zones, and their combined count must strictly drop.
pub fn is_valid_swap(matrix: &AssignmentMatrix, a: Cell, b: Cell) -> Result<bool, PlacementError> {
    check_cell(matrix, a)?;
    check_cell(matrix, b)?;
    if a.row == b.row {
        return Err(PlacementError::SameRow {
            row: a.row,
            col_a: a.col,
            col_b: b.col,
        });
    }
    let (grid, _) = Grid::new(matrix);
    let x = grid.zones[a.row][a.col];
    if grid.hist[a.row][x] <= grid.threshold {
        return Ok(false);
    }
    Ok(grid.effect(a, b).is_valid())
}

fn find_swap(
    grid: &Grid,
    bad: &[usize],
    touched: &BTreeSet<usize>,
    relaxed: bool,
) -> Option<(Cell, Cell)> {
    let rows = grid.zones.len();
    let is_bad = |r: usize| grid.score(r).excess > 0;
    for &i in bad {
        let cols = grid.zones[i].len();
        let zones_over = (0..grid.hist[i].len()).filter(|&z| grid.hist[i][z] > grid.threshold);
        for z in zones_over {
            let col_a = grid.zones[i].iter().position(|&x| x == z).expect("zone present");
            let a = Cell::new(i, col_a);
            // partners: bad rows ascending, then good rows ascending
            let partners = bad
                .iter()
                .copied()
                .filter(|&j| j != i)
                .chain((0..rows).filter(|&j| j != i && !is_bad(j)));
            let mut best: Option<((bool, usize, u8, isize), Cell)> = None;
            for j in partners {
                let pref = if is_bad(j) {
                    2
                } else if touched.contains(&j) {
                    1
                } else {
                    0
                };
                for col_b in 0..cols {
                    let b = Cell::new(j, col_b);
                    let eff = grid.effect(a, b);
                    let admissible = if relaxed {
                        eff.is_excess_reducing()
                    } else {
                        eff.is_valid()
                    };
                    if !admissible {
                        continue;
                    }
                    let key = (
                        eff.excess_drop() > 0,
                        eff.overpopulated_drop(),
                        pref,
                        eff.excess_drop(),
                    );
                    if best.as_ref().is_none_or(|(k, _)| key > *k) {
                        best = Some((key, b));
                    }
                }
            }
            if let Some((_, b)) = best {
                return Some((a, b));
            }
        }
    }
    None
}

/// Greedy swap repair.
///
/// Bad rows are visited in ascending index and, within a row, overpopulated
/// zones in label order. For the chosen instance every valid partner cell is
/// ranked: swaps that lower total excess first, then swaps that fix both rows,
/// then partners that are bad rows, then good rows already touched by an
/// earlier swap, then by scan order (ascending row, ascending column).
///
/// If no valid swap exists anywhere, an excess-reducing swap that gives no
/// row an extra overpopulated zone is taken instead; such states only arise
/// when a zone sits two or more above the threshold in some row.
pub fn repair(matrix: &AssignmentMatrix) -> RepairOutcome {
    let (mut grid, _) = Grid::new(matrix);
    let mut out = matrix.clone();
    let mut swaps = Vec::new();
    let mut touched = BTreeSet::new();
    let rows = grid.zones.len();

    loop {
        let bad: Vec<usize> = (0..rows).filter(|&r| grid.score(r).excess > 0).collect();
        if bad.is_empty() {
            break;
        }
        let chosen = find_swap(&grid, &bad, &touched, false)
            .or_else(|| find_swap(&grid, &bad, &touched, true));
        let Some((a, b)) = chosen else {
            return RepairOutcome {
                matrix: out,
                swaps,
                residual_bad_rows: bad,
            };
        };
        let eff = grid.effect(a, b);
        grid.apply(a, b);
        out.swap_cells((a.row, a.col), (b.row, b.col));
        touched.insert(a.row);
        touched.insert(b.row);
        swaps.push(SwapRecord {
            a,
            b,
            overpopulated_before: [eff.before[0].overpopulated, eff.before[1].overpopulated],
            overpopulated_after: [eff.after[0].overpopulated, eff.after[1].overpopulated],
            excess_before: [eff.before[0].excess, eff.before[1].excess],
            excess_after: [eff.after[0].excess, eff.after[1].excess],
        });
    }

    RepairOutcome {
        matrix: out,
        swaps,
        residual_bad_rows: Vec::new(),
    }
}

fn ensure_absent(matrix: &AssignmentMatrix, inst: &Instance) -> Result<(), PlacementError> {
    if matrix.position(&inst.id).is_some() {
        return Err(PlacementError::DuplicateInstance(inst.id.clone()));
    }
    Ok(())
}

/// Appends one new replica group (one instance per row, in row order) and
/// repairs.
pub fn apply_uplift(
    matrix: &AssignmentMatrix,
    new_instances: &[Instance],
) -> Result<RepairOutcome, PlacementError> {
    if new_instances.len() != matrix.num_rows() {
        return Err(PlacementError::WrongInstanceCount {
            expected: matrix.num_rows(),
            got: new_instances.len(),
        });
    }
    for inst in new_instances {
        ensure_absent(matrix, inst)?;
    }
    let rows = matrix
        .rows()
        .iter()
        .zip(new_instances)
        .map(|(row, inst)| {
            let mut row = row.clone();
            row.push(inst.clone());
            row
        })
        .collect();
    let grown = AssignmentMatrix::from_rows(rows, matrix.mz_count())?;
    Ok(repair(&grown))
}

/// Replaces `old` in place with `new` (whose zone may differ) and repairs.
pub fn apply_node_swap(
    matrix: &AssignmentMatrix,
    old: &InstanceId,
    new: Instance,
) -> Result<RepairOutcome, PlacementError> {
    let (r, c) = matrix
        .position(old)
        .ok_or_else(|| PlacementError::UnknownInstance(old.clone()))?;
    ensure_absent(matrix, &new)?;
    let mut m = matrix.clone();
    m.rows_mut()[r][c] = new;
    let mz = m.instances().map(|i| &i.mz).collect::<BTreeSet<_>>().len();
    let target = m.mz_count().max(mz);
    m.set_mz_count(target);
    Ok(repair(&m))
}

/// How a downlift was carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownliftMode {
    /// Nothing removed.
    Identity,
    /// One instance removed from every row; `R` drops by one.
    ColumnRemoval,
    /// Each removed instance replaced from the pool, like repeated node swaps.
    CellReplacement,
}

/// Removes instances. When `removed` holds exactly one instance per row the
/// removal is treated as dropping one replica group (rows are reshuffled so
/// the removed instances line up as the last column, which moves no data);
/// otherwise each removed cell is refilled from `replacement_pool` in order.
pub fn apply_downlift(
    matrix: &AssignmentMatrix,
    removed: &[InstanceId],
    replacement_pool: &[Instance],
) -> Result<(DownliftMode, RepairOutcome), PlacementError> {
    if removed.is_empty() {
        return Ok((DownliftMode::Identity, RepairOutcome::unchanged(matrix.clone())));
    }
    let mut positions = Vec::with_capacity(removed.len());
    for id in removed {
        positions.push(
            matrix
                .position(id)
                .ok_or_else(|| PlacementError::UnknownInstance(id.clone()))?,
        );
    }
    let rows_hit: BTreeSet<usize> = positions.iter().map(|p| p.0).collect();
    let one_per_row = removed.len() == matrix.num_rows() && rows_hit.len() == matrix.num_rows();

    if one_per_row {
        if matrix.replica_groups() == 1 {
            return Err(PlacementError::LastReplicaGroup);
        }
        let mut rows = matrix.rows().to_vec();
        for &(r, c) in &positions {
            rows[r].remove(c);
        }
        let shrunk = AssignmentMatrix::from_rows(rows, matrix.mz_count())?;
        return Ok((DownliftMode::ColumnRemoval, repair(&shrunk)));
    }

    if replacement_pool.len() < removed.len() {
        return Err(PlacementError::InvalidRemoval {
            needed: removed.len(),
            pool: replacement_pool.len(),
        });
    }
    let mut m = matrix.clone();
    for (&(r, c), inst) in positions.iter().zip(replacement_pool) {
        ensure_absent(&m, inst)?;
        m.rows_mut()[r][c] = inst.clone();
    }
    let mz = m.instances().map(|i| &i.mz).collect::<BTreeSet<_>>().len();
    let target = m.mz_count().max(mz);
    m.set_mz_count(target);
    Ok((DownliftMode::CellReplacement, repair(&m)))
}

/// Fewest live replicas any segment keeps when every instance of `zone` is
/// drained.
pub fn live_replicas_after_zone_drain(matrix: &AssignmentMatrix, zone: &Mz) -> usize {
    matrix
        .rows()
        .iter()
        .map(|row| row.iter().filter(|i| &i.mz != zone).count())
        .min()
        .unwrap_or(0)
}

/// Rows violating the threshold.
pub fn bad_rows(matrix: &AssignmentMatrix) -> Vec<usize> {
    let r = matrix.replica_groups();
    let mz = matrix.mz_count();
    (0..matrix.num_rows())
        .filter(|&i| !row_status(matrix.row(i), r, mz).is_good())
        .collect()
}
