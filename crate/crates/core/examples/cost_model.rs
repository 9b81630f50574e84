//! Fits the step-time model (compute + ring all-reduce) to the measured
//! throughput table on 128-512 cores and extrapolates to 1024 cores.
//!
//! ```text
//! cargo run --example cost_model -- path/to/table.csv
//! ```

use std::fs::File;

use podsim::cli::bench_predictions;
use podsim::perf::read_bench_csv;

fn main() -> podsim::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/throughput_table.csv").into());
    let file = File::open(&path).map_err(|e| podsim::Error::Io { path: path.clone(), source: e })?;
    let rows = read_bench_csv(file)?;
    let preds = bench_predictions(&rows, &[128, 256, 512], None)?;
    println!("model cores  batch  observed  predicted  err%   ar% obs/pred");
    for p in &preds {
        println!(
            "{:>5} {:>5} {:>6} {:>9.2} {:>10.2} {:>5.1} {:>5.2}/{:.2}{}",
            p.model,
            p.cores,
            p.global_batch,
            p.observed_throughput,
            p.predicted_throughput,
            100.0 * (p.predicted_throughput - p.observed_throughput) / p.observed_throughput,
            p.observed_allreduce_pct,
            p.predicted_allreduce_pct,
            if p.used_in_fit { "" } else { "  (held out)" }
        );
    }
    Ok(())
}
