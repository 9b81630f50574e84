//! Trains the toy CNN on synthetic 16×16 images with a desk-scale preset and
//! prints the eval curve and the modeled time to peak accuracy.
//!
//! ```text
//! cargo run --release --example toy_training -- toy-lars-2048 lr_per_256=0.5 seed=3
//! ```
//!
//! Arguments after the preset name override config keys.

use podsim::config::parse_config;
use podsim::trainer::{run, time_to_peak};

fn main() -> podsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "toy-rmsprop-512".into());
    let mut text = format!("preset = {preset}\n");
    for kv in args {
        text.push_str(&kv);
        text.push('\n');
    }
    let cfg = parse_config(&text)?;
    println!(
        "{preset}: N={} B={} optimizer={:?} peak lr={:.4}",
        cfg.num_replicas,
        cfg.global_batch,
        cfg.optimizer,
        cfg.schedule(1).peak()
    );
    let report = run(&cfg)?;
    for r in report.records.iter().filter(|r| r.eval_top1.is_some()) {
        println!(
            "epoch {:>5.2}  lr {:.5}  loss {:.4}  top1 {:.4}",
            r.epoch,
            r.lr,
            r.train_loss.unwrap_or(f32::NAN),
            r.eval_top1.unwrap()
        );
    }
    if let Some(msg) = &report.abort {
        println!("aborted: {msg}");
    }
    let (peak, minutes) = time_to_peak(&report.records, |r| r.modeled_minutes())?;
    println!("peak top-1 {peak:.4} after {minutes:.4} modeled minutes");
    Ok(())
}
