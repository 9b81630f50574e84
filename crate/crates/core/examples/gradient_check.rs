//! Compares backprop gradients of a small CNN with central differences, on a
//! single device and with BN statistics pooled across replica groups.

use podsim::collectives::assign_groups_1d;
use podsim::config::ModelKind;
use podsim::nn::gradcheck::{grad_check, grad_check_replicated};
use podsim::nn::model::Network;
use podsim::precision::PrecisionPolicy;
use podsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> podsim::Result<()> {
    let net = Network::new(ModelKind::PoolCnn.layers(3), [6, 6, 2])?;
    let state = net.init::<f64>(1, 0.99, 1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut batch = |b: usize| Tensor::<f64>::from_fn(&[b, 6, 6, 2], |_| rng.gen_range(-1.0..1.0));

    let r = grad_check(&net, &state, &batch(4), &[0, 1, 2, 1], 1e-3)?;
    println!("single device: max_rel_err {:.2e} over {} elements", r.max_rel_err, r.checked);

    let inputs: Vec<_> = (0..4).map(|_| batch(2)).collect();
    let labels: [&[usize]; 4] = [&[0, 1], &[2, 2], &[1, 0], &[2, 1]];
    for g in [1, 2, 4] {
        let groups = assign_groups_1d(4, g)?;
        let r = grad_check_replicated(&net, &state, &inputs, &labels, &groups, PrecisionPolicy::Fp32Only, 1e-3)?;
        println!(
            "4 replicas, BN group size {g}: max_rel_err {:.2e} (worst {}[{}])",
            r.max_rel_err, r.worst_param, r.worst_index
        );
    }
    Ok(())
}
