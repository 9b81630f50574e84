//! The preset catalog, and a preset expanded into a full config file.

use podsim::config::{parse_config, presets, to_config_text};

fn main() -> podsim::Result<()> {
    for p in presets() {
        println!(
            "{:<18} N={:<5} B={:<6} {:<8} lr/256={:<6} warmup={}",
            p.name, p.num_replicas, p.global_batch, p.optimizer, p.lr_per_256, p.warmup_epochs
        );
    }
    // Pod-scale presets run at desk scale by overriding the replica count;
    // the learning rate follows the global batch, not N.
    let cfg = parse_config("preset = b5-lars-65536\nnum_replicas = 8\n")?;
    let text = to_config_text(&cfg);
    println!("\n{text}");
    assert_eq!(parse_config(&text)?, cfg);
    Ok(())
}
