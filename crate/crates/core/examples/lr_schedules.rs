//! Learning-rate schedules of the pod-scale presets: linear scaling of the
//! base rate, linear warmup, then exponential staircase or polynomial decay.

use podsim::config::{preset, TrainConfig};
use podsim::schedule::lr_at_epoch;

fn main() -> podsim::Result<()> {
    for name in ["b2-rmsprop-4096", "b5-lars-32768", "b5-lars-65536"] {
        let mut cfg = TrainConfig::default();
        preset(name)?.apply(&mut cfg)?;
        let spec = cfg.schedule(100);
        println!(
            "{name}: lr_per_256 {} x {}/256 = peak {:.4}, warmup {} epochs, {} decay",
            cfg.lr_per_256,
            cfg.global_batch,
            spec.peak(),
            cfg.warmup_epochs,
            cfg.decay
        );
        let row: Vec<String> = [0.0, 2.5, 5.0, 25.0, 50.0, 100.0, 200.0, 300.0, 350.0]
            .iter()
            .map(|&e| format!("{e}:{:.4}", lr_at_epoch(&spec, e)))
            .collect();
        println!("  {}", row.join("  "));
    }
    Ok(())
}
