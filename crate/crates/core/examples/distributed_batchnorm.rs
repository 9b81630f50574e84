//! Group batch norm: the effective BN batch grows with the group size, and a
//! group of G replicas matches single-device BN over their concatenated batch.

use podsim::distbn::{bn_batch_size, group_bn_forward, BnState};
use podsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> podsim::Result<()> {
    let (replicas, b, channels) = (8, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<Tensor> = (0..replicas)
        .map(|r| Tensor::from_fn(&[b, channels], |_| rng.gen_range(-1.0f32..1.0) + r as f32 * 0.25))
        .collect();
    let state = BnState::new(channels, 0.99, 1e-3)?;

    for g in [1, 2, 4, 8] {
        let first_group = group_bn_forward(&xs[..g], &state)?;
        println!(
            "G={g}: BN batch {:>2}, group mean {:?}",
            bn_batch_size(g, b),
            first_group.mean.data()
        );
    }

    let grouped = group_bn_forward(&xs, &state)?;
    let concat = Tensor::new(
        vec![replicas * b, channels],
        xs.iter().flat_map(|x| x.data().to_vec()).collect(),
    )?;
    let single = group_bn_forward(std::slice::from_ref(&concat), &state)?;
    let same = grouped
        .ys
        .iter()
        .flat_map(|y| y.data().iter())
        .zip(single.ys[0].data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("G=8 equals single-device BN over 32 samples bit for bit: {same}");
    Ok(())
}
