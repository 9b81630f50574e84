//! LARS keeps each layer's update proportional to its weight norm no matter
//! how the gradient is scaled; RMSProp normalizes per element instead.

use podsim::nn::model::{ParamTag, Parameter};
use podsim::optim::{lars_trust_ratio, LarsConfig, Optimizer, OptimizerConfig, RmsPropConfig};
use podsim::Tensor;

fn update_norm(config: OptimizerConfig, grad_scale: f64) -> podsim::Result<f64> {
    let w = Tensor::from_fn(&[16], |i| (i as f64 - 7.5) / 8.0);
    let mut params = vec![Parameter::new("layer/kernel", w.clone(), ParamTag::Kernel)];
    params[0].grad = Tensor::from_fn(&[16], |i| grad_scale * ((i % 5) as f64 - 2.0));
    let mut opt = Optimizer::new(config, &params)?;
    opt.step(&mut params, 1.0)?;
    Ok(params[0].value.zip_map(&w, |a, b| a - b)?.l2_norm())
}

fn main() -> podsim::Result<()> {
    let lars = LarsConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        ..LarsConfig::default()
    };
    for (w, g) in [(1.0, 0.1), (1.0, 1.0), (1.0, 10.0), (0.0, 1.0)] {
        println!("trust ratio |w|={w} |g|={g}: {:.5}", lars_trust_ratio(w, g, &lars));
    }
    for scale in [1e-3, 1.0, 1e3] {
        println!(
            "gradient x{scale:<6}: LARS |dw| {:.6}   RMSProp |dw| {:.6}",
            update_norm(OptimizerConfig::Lars(lars.clone()), scale)?,
            update_norm(OptimizerConfig::RmsProp(RmsPropConfig::default()), scale)?
        );
    }
    Ok(())
}
