//! Partitions replicas into BN groups (contiguous blocks or 2D tiles) and
//! runs the all-reduce primitives over them.

use podsim::collectives::{
    all_reduce, all_reduce_grouped, assign_groups_1d, assign_groups_2d, padded_batch_utilization, ReduceOp,
    ReplicaTopology, Scope,
};
use podsim::Tensor;

fn main() -> podsim::Result<()> {
    let blocks = assign_groups_1d(8, 4)?;
    println!("1D, 8 replicas, G=4: {:?}", blocks.groups().collect::<Vec<_>>());

    let grid = ReplicaTopology::with_grid(4, 4)?;
    let tiles = assign_groups_2d(&grid, (2, 2))?;
    println!("2D, 4x4 grid, 2x2 tiles: {:?}", tiles.groups().collect::<Vec<_>>());

    let locals: Vec<Tensor<f64>> = (0..8).map(|r| Tensor::full(&[2], r as f64)).collect();
    let mean = all_reduce(&locals, ReduceOp::Mean, Scope::All)?;
    println!("global mean on every replica: {:?}", mean[0].data());
    let grouped = all_reduce_grouped(&locals, ReduceOp::Sum, &blocks)?;
    println!(
        "group sums per replica: {:?}",
        grouped.iter().map(|t| t.data()[0]).collect::<Vec<_>>()
    );

    for b in [1, 4, 8, 12, 32] {
        let (padded, util) = padded_batch_utilization(b)?;
        println!("per-core batch {b:>2} pads to {padded:>2}: utilization {util:.3}");
    }
    Ok(())
}
