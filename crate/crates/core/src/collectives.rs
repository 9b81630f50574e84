//! Simulated replica topology, BN group assignment, functional all-reduce and
//! the batch-padding utilization calculator.
//!
//! All-reduce here is exact and instantaneous; its cost lives in
//! [`crate::perf`]. Reductions always accumulate in ascending replica index.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{pairwise_sum, Tensor};

/// Logical `rows × cols` grid of replicas, numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaTopology {
    num_replicas: usize,
    rows: usize,
    cols: usize,
}

impl ReplicaTopology {
    /// Most-square factorization with `rows <= cols`.
    pub fn new(num_replicas: usize) -> Result<Self> {
        if num_replicas == 0 {
            return Err(Error::Precondition("num_replicas must be positive".into()));
        }
        let mut rows = (num_replicas as f64).sqrt() as usize;
        while rows > 1 && num_replicas % rows != 0 {
            rows -= 1;
        }
        let rows = rows.max(1);
        Ok(ReplicaTopology {
            num_replicas,
            rows,
            cols: num_replicas / rows,
        })
    }

    pub fn with_grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Precondition(format!(
                "grid {rows}x{cols} must have positive extents"
            )));
        }
        Ok(ReplicaTopology {
            num_replicas: rows * cols,
            rows,
            cols,
        })
    }

    pub fn num_replicas(&self) -> usize {
        self.num_replicas
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Partition of replicas into equally sized BN groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    group_size: usize,
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GroupAssignment {
    fn from_group_of(group_of: Vec<usize>, num_groups: usize) -> Self {
        let mut members = vec![Vec::new(); num_groups];
        for (r, &g) in group_of.iter().enumerate() {
            members[g].push(r);
        }
        let group_size = members[0].len();
        debug_assert!(members.iter().all(|m| m.len() == group_size));
        GroupAssignment {
            group_size,
            group_of,
            members,
        }
    }

    /// Every replica in its own group (per-replica BN).
    pub fn singletons(num_replicas: usize) -> Self {
        Self::from_group_of((0..num_replicas).collect(), num_replicas)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_replicas(&self) -> usize {
        self.group_of.len()
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }

    pub fn group_of(&self, replica: usize) -> usize {
        self.group_of[replica]
    }

    /// Sorted replica indices of group `g`.
    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.members.iter().map(Vec::as_slice)
    }
}

/// Contiguous blocks: replica `i` joins group `i / G`.
pub fn assign_groups_1d(num_replicas: usize, group_size: usize) -> Result<GroupAssignment> {
    if num_replicas == 0 || group_size == 0 || num_replicas % group_size != 0 {
        return Err(Error::Precondition(format!(
            "bn group size {group_size} must divide num_replicas {num_replicas}"
        )));
    }
    let group_of = (0..num_replicas).map(|i| i / group_size).collect();
    Ok(GroupAssignment::from_group_of(
        group_of,
        num_replicas / group_size,
    ))
}

/// Rectangular `tile_rows × tile_cols` tiles of the row-major replica grid.
/// Groups are numbered row-major over tiles.
pub fn assign_groups_2d(
    topology: &ReplicaTopology,
    tile: (usize, usize),
) -> Result<GroupAssignment> {
    let (tr, tc) = tile;
    let (r, c) = (topology.rows, topology.cols);
    if tr == 0 || tc == 0 || r % tr != 0 || c % tc != 0 {
        return Err(Error::Precondition(format!(
            "tile {tr}x{tc} must evenly divide the {r}x{c} replica grid"
        )));
    }
    let tiles_per_row = c / tc;
    let group_of = (0..topology.num_replicas)
        .map(|i| {
            let (row, col) = (i / c, i % c);
            (row / tr) * tiles_per_row + col / tc
        })
        .collect();
    Ok(GroupAssignment::from_group_of(
        group_of,
        (r / tr) * tiles_per_row,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub enum Scope<'a> {
    All,
    Group(&'a GroupAssignment, usize),
}

/// Reduces `participants` (replica indices, ascending) of `per_replica` with
/// a pairwise tree in that order.
fn reduce_over<T: Real>(
    per_replica: &[Tensor<T>],
    participants: &[usize],
    op: ReduceOp,
) -> Tensor<T> {
    let parts: Vec<&[T]> = participants.iter().map(|&r| per_replica[r].data()).collect();
    let shape = per_replica[participants[0]].shape();
    let mut acc = Tensor::new(shape.to_vec(), pairwise_sum(&parts)).expect("shapes checked");
    if op == ReduceOp::Mean {
        let n = T::from_usize(participants.len());
        for a in acc.data_mut() {
            *a /= n;
        }
    }
    acc
}

fn check_shapes<T: Real>(per_replica: &[Tensor<T>]) -> Result<()> {
    let Some(first) = per_replica.first() else {
        return Err(Error::Precondition("all_reduce over zero replicas".into()));
    };
    for t in &per_replica[1..] {
        first.same_shape("all_reduce", t)?;
    }
    Ok(())
}

/// Every replica in `scope` receives the identical reduction of the scope's
/// inputs; replicas outside the scope keep their input.
pub fn all_reduce<T: Real>(
    per_replica: &[Tensor<T>],
    op: ReduceOp,
    scope: Scope<'_>,
) -> Result<Vec<Tensor<T>>> {
    check_shapes(per_replica)?;
    match scope {
        Scope::All => {
            let all: Vec<usize> = (0..per_replica.len()).collect();
            let reduced = reduce_over(per_replica, &all, op);
            Ok(vec![reduced; per_replica.len()])
        }
        Scope::Group(groups, g) => {
            if groups.num_replicas() != per_replica.len() || g >= groups.num_groups() {
                return Err(Error::Precondition(format!(
                    "group {g} does not exist in an assignment of {} groups over {} replicas",
                    groups.num_groups(),
                    groups.num_replicas()
                )));
            }
            let members = groups.members(g);
            let reduced = reduce_over(per_replica, members, op);
            let mut out = per_replica.to_vec();
            for &r in members {
                out[r] = reduced.clone();
            }
            Ok(out)
        }
    }
}

/// Reduces within every group at once.
pub fn all_reduce_grouped<T: Real>(
    per_replica: &[Tensor<T>],
    op: ReduceOp,
    groups: &GroupAssignment,
) -> Result<Vec<Tensor<T>>> {
    check_shapes(per_replica)?;
    if groups.num_replicas() != per_replica.len() {
        return Err(Error::Precondition(format!(
            "assignment covers {} replicas, got {} tensors",
            groups.num_replicas(),
            per_replica.len()
        )));
    }
    let mut out = per_replica.to_vec();
    for members in groups.groups() {
        let reduced = reduce_over(per_replica, members, op);
        for &r in members {
            out[r] = reduced.clone();
        }
    }
    Ok(out)
}

/// Batch padded to the next multiple of eight, and the useful fraction.
pub fn padded_batch_utilization(per_core_batch: usize) -> Result<(usize, f32)> {
    if per_core_batch == 0 {
        return Err(Error::Precondition("per-core batch must be >= 1".into()));
    }
    let padded = per_core_batch.div_ceil(8) * 8;
    Ok((padded, per_core_batch as f32 / padded as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sets(a: &GroupAssignment) -> Vec<Vec<usize>> {
        a.groups().map(<[usize]>::to_vec).collect()
    }

    #[test]
    fn groups_1d() {
        assert_eq!(sets(&assign_groups_1d(8, 8).unwrap()), vec![(0..8).collect::<Vec<_>>()]);
        assert_eq!(
            sets(&assign_groups_1d(8, 1).unwrap()),
            (0..8).map(|i| vec![i]).collect::<Vec<_>>()
        );
        assert_eq!(
            sets(&assign_groups_1d(8, 4).unwrap()),
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]
        );
        assert!(assign_groups_1d(8, 3).is_err());
    }

    #[test]
    fn groups_2d_tiles() {
        let topo = ReplicaTopology::with_grid(4, 4).unwrap();
        let a = assign_groups_2d(&topo, (2, 2)).unwrap();
        assert_eq!(
            sets(&a),
            vec![
                vec![0, 1, 4, 5],
                vec![2, 3, 6, 7],
                vec![8, 9, 12, 13],
                vec![10, 11, 14, 15]
            ]
        );
        assert_eq!(sets(&assign_groups_2d(&topo, (4, 4)).unwrap()), vec![(0..16).collect::<Vec<_>>()]);
        assert_eq!(assign_groups_2d(&topo, (1, 1)).unwrap().num_groups(), 16);
        assert!(assign_groups_2d(&topo, (3, 2)).is_err());
    }

    #[test]
    fn default_topology_is_most_square() {
        let t = ReplicaTopology::new(1024).unwrap();
        assert_eq!((t.rows(), t.cols()), (32, 32));
        let t = ReplicaTopology::new(512).unwrap();
        assert_eq!((t.rows(), t.cols()), (16, 32));
        let t = ReplicaTopology::new(7).unwrap();
        assert_eq!((t.rows(), t.cols()), (1, 7));
        assert!(ReplicaTopology::new(0).is_err());
    }

    #[test]
    fn all_reduce_sum_all() {
        let xs = vec![
            Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(),
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
        ];
        let out = all_reduce(&xs, ReduceOp::Sum, Scope::All).unwrap();
        assert!(out.iter().all(|t| t.data() == [4.0, 6.0]));
    }

    #[test]
    fn all_reduce_group_mean() {
        let xs: Vec<Tensor> = (1..=4).map(|v| Tensor::scalar(v as f32)).collect();
        let groups = assign_groups_1d(4, 2).unwrap();
        let out = all_reduce_grouped(&xs, ReduceOp::Mean, &groups).unwrap();
        let vals: Vec<f32> = out.iter().map(|t| t.data()[0]).collect();
        assert_eq!(vals, vec![1.5, 1.5, 3.5, 3.5]);

        let one = all_reduce(&xs, ReduceOp::Mean, Scope::Group(&groups, 1)).unwrap();
        let vals: Vec<f32> = one.iter().map(|t| t.data()[0]).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.5, 3.5]);
        assert!(all_reduce(&xs, ReduceOp::Sum, Scope::Group(&groups, 2)).is_err());
    }

    #[test]
    fn all_reduce_single_replica_identity() {
        let xs = vec![Tensor::new(vec![3], vec![1.5f32, -2.0, 0.25]).unwrap()];
        assert_eq!(all_reduce(&xs, ReduceOp::Sum, Scope::All).unwrap(), xs);
    }

    #[test]
    fn all_reduce_shape_mismatch() {
        let xs = vec![Tensor::<f32>::zeros(&[2]), Tensor::zeros(&[3])];
        assert!(matches!(
            all_reduce(&xs, ReduceOp::Sum, Scope::All),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn padding_examples() {
        assert_eq!(padded_batch_utilization(8).unwrap(), (8, 1.0));
        assert_eq!(padded_batch_utilization(4).unwrap(), (8, 0.5));
        assert_eq!(padded_batch_utilization(9).unwrap(), (16, 0.5625));
        assert!(padded_batch_utilization(0).is_err());
    }

    proptest! {
        #[test]
        fn assignments_partition(n_log in 0u32..7, g_log in 0u32..7) {
            prop_assume!(g_log <= n_log);
            let (n, g) = (1usize << n_log, 1usize << g_log);
            let a = assign_groups_1d(n, g).unwrap();
            let mut seen = vec![false; n];
            for m in a.groups() {
                prop_assert_eq!(m.len(), g);
                for &r in m {
                    prop_assert!(!seen[r]);
                    seen[r] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn tiles_partition(tr in 1usize..5, tc in 1usize..5, mr in 1usize..4, mc in 1usize..4) {
            let (r, c) = (tr * mr, tc * mc);
            let topo = ReplicaTopology::with_grid(r, c).unwrap();
            let a = assign_groups_2d(&topo, (tr, tc)).unwrap();
            prop_assert_eq!(a.group_size(), tr * tc);
            let mut all: Vec<usize> = a.groups().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..r * c).collect::<Vec<_>>());
        }

        #[test]
        fn row_tiles_match_1d(g in 1usize..16, m in 1usize..8) {
            let n = g * m;
            let topo = ReplicaTopology::with_grid(1, n).unwrap();
            prop_assert_eq!(
                assign_groups_2d(&topo, (1, g)).unwrap(),
                assign_groups_1d(n, g).unwrap()
            );
        }

        #[test]
        fn utilization_bounds(b in 1usize..10_000) {
            let (padded, u) = padded_batch_utilization(b).unwrap();
            prop_assert_eq!(padded % 8, 0);
            prop_assert_eq!(u == 1.0, b % 8 == 0);
            prop_assert!(u >= b as f32 / (b + 7) as f32);
        }

        #[test]
        fn sum_matches_pairwise_tree(vals in proptest::collection::vec(-1e3f32..1e3, 1..16)) {
            fn tree(v: &[f32]) -> f32 {
                if v.len() == 1 { v[0] } else { let (l, r) = v.split_at(v.len() / 2); tree(l) + tree(r) }
            }
            let xs: Vec<Tensor> = vals.iter().map(|&v| Tensor::scalar(v)).collect();
            let expect = tree(&vals);
            for t in all_reduce(&xs, ReduceOp::Sum, Scope::All).unwrap() {
                prop_assert_eq!(t.data()[0].to_bits(), expect.to_bits());
            }
        }
    }
}
