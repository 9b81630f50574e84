//! Sharded evaluation: each replica scores a contiguous shard padded with
//! zero-weight dummies; summed counts make accuracy independent of N.

use podsim::config::parse_config;
use podsim::data::SyntheticSpec;
use podsim::trainer::{aggregate_counts, distributed_eval};

fn main() -> podsim::Result<()> {
    println!("counts (3,4) + (2,4) -> {}", aggregate_counts(&[(3.0, 4.0), (2.0, 4.0)])?);

    let cfg = parse_config("preset = toy-rmsprop-512\n")?;
    let eval = SyntheticSpec::new(10, 16, 16, 1, 9).generate(0..1000)?;
    let net = cfg.network(eval.image_shape(), eval.num_classes)?;
    let state = net.init(cfg.seed, cfg.bn_momentum, cfg.bn_eps)?;
    for n in [1, 2, 4, 8, 16] {
        let top1 = distributed_eval(&net, &state, &eval, n, 48, cfg.precision)?;
        println!("N={n:>2}: top-1 {top1} (bits {:08x})", top1.to_bits());
    }
    Ok(())
}
