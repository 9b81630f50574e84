//! The `podsim` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::collectives::assign_groups_1d;
use crate::config::{self, parse_config, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::gradcheck::grad_check_replicated;
use crate::nn::model::ModelState;
use crate::perf::{self, BenchPrediction, BenchRow};
use crate::precision::PrecisionPolicy;
use crate::trainer::{self, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "podsim", version, about = "Large-batch data-parallel training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train per a config file and write the metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the final replica state as JSON.
        #[arg(long)]
        weights_out: Option<PathBuf>,
        /// Worker threads (defaults to all cores). Does not change results.
        #[arg(long)]
        workers: Option<usize>,
        /// Record wall-clock seconds in the metrics (not reproducible).
        #[arg(long)]
        wallclock: bool,
    },
    /// Evaluate saved weights on the config's eval set.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Check analytic gradients of the configured model in f64.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Fit the step-time model to a throughput table and predict every row.
    Bench {
        #[arg(long)]
        table: PathBuf,
        /// Core counts whose rows are used for fitting.
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        fit_cores: Vec<usize>,
        /// Gradient bytes per all-reduce; needed for models other than b2/b5.
        #[arg(long)]
        param_bytes: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the named presets.
    Presets,
}

/// Runs the command line and returns the process exit code.
pub fn cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(parsed.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            weights_out,
            workers,
            wallclock,
        } => train(&config, &out, weights_out.as_deref(), workers, wallclock),
        Command::Eval { weights, config } => eval(&weights, &config),
        Command::Gradcheck { config, eps } => gradcheck(&config, eps),
        Command::Bench {
            table,
            fit_cores,
            param_bytes,
            out,
        } => bench(&table, &fit_cores, param_bytes, out.as_deref()),
        Command::Presets => presets(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn train(
    config: &Path,
    out: &Path,
    weights_out: Option<&Path>,
    workers: Option<usize>,
    wallclock: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    let opts = RunOptions { wallclock };
    let report = match workers {
        None => trainer::run_with(&cfg, opts)?,
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?
            .install(|| trainer::run_with(&cfg, opts))?,
    };
    trainer::write_metrics_csv(create(out)?, &report.records)?;
    if let Some(path) = weights_out {
        let mut w = create(path)?;
        w.write_all(report.state.to_json().as_bytes())
            .and_then(|_| w.flush())
            .map_err(io_err(path))?;
    }
    if let Some(msg) = report.abort {
        return Err(Error::NonFinite(format!("training aborted: {msg}")));
    }
    if let Some(top1) = report.records.iter().rev().find_map(|r| r.eval_top1) {
        println!("steps {} final eval_top1 {top1:.4}", report.records.len());
    }
    Ok(())
}

fn eval(weights: &Path, config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let state = ModelState::<f32>::from_json(&fs::read_to_string(weights).map_err(io_err(weights))?)?;
    let (_, eval) = trainer::load_datasets(&cfg)?;
    let net = cfg.network(eval.image_shape(), eval.num_classes)?;
    net.check_state(&state)?;
    let top1 = trainer::distributed_eval(&net, &state, &eval, cfg.num_replicas, cfg.eval_batch, cfg.precision)?;
    println!("eval_top1 {top1:.6}");
    Ok(())
}

/// Two replicas of two examples each, BN pooled over both, full precision.
fn gradcheck(config: &Path, eps: f64) -> Result<()> {
    let cfg = load_config(config)?;
    let (train, _) = trainer::load_datasets(&cfg)?;
    let net = cfg.network(train.image_shape(), train.num_classes)?;
    let state = net.init::<f64>(cfg.seed, cfg.bn_momentum, cfg.bn_eps)?;
    let (replicas, per_replica) = (2, 2);
    if train.len() < replicas * per_replica {
        return Err(Error::Precondition("gradcheck needs at least 4 training examples".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for r in 0..replicas {
        let idx: Vec<usize> = (r * per_replica..(r + 1) * per_replica).collect();
        let (x, y) = train.gather(&idx)?;
        inputs.push(x.cast::<f64>());
        labels.push(y);
    }
    let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let groups = assign_groups_1d(replicas, replicas)?;
    let report = grad_check_replicated(
        &net,
        &state,
        &inputs,
        &label_refs,
        &groups,
        PrecisionPolicy::Fp32Only,
        eps,
    )?;
    println!(
        "max_rel_err {:.3e} over {} elements (worst {}[{}])",
        report.max_rel_err, report.checked, report.worst_param, report.worst_index
    );
    if report.max_rel_err >= GRADCHECK_TOLERANCE {
        return Err(Error::Precondition(format!(
            "gradcheck failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

/// All-reduced gradient bytes for the throughput-table models (fp32 weights).
pub fn default_param_bytes(model: &str) -> Option<u64> {
    match model.to_ascii_lowercase().as_str() {
        "b2" | "efficientnet-b2" => Some(4 * 9_200_000),
        "b5" | "efficientnet-b5" => Some(4 * 30_000_000),
        _ => None,
    }
}

/// Calibrates one model's rows on `fit_cores` and predicts all of them.
pub fn bench_predictions(
    rows: &[BenchRow],
    fit_cores: &[usize],
    param_bytes: Option<u64>,
) -> Result<Vec<BenchPrediction>> {
    let mut by_model: BTreeMap<&str, Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        by_model.entry(&r.model).or_default().push(r);
    }
    let mut preds = Vec::with_capacity(rows.len());
    for (model, model_rows) in by_model {
        let bytes = param_bytes.or_else(|| default_param_bytes(model)).ok_or_else(|| {
            Error::Precondition(format!("no parameter size known for model {model:?}; pass --param-bytes"))
        })?;
        let fit: Vec<BenchRow> = model_rows
            .iter()
            .filter(|r| fit_cores.contains(&r.cores))
            .map(|r| (*r).clone())
            .collect();
        let params = perf::calibrate(&fit, bytes)?;
        for r in model_rows {
            preds.push(BenchPrediction::new(r, &params, fit_cores.contains(&r.cores))?);
        }
    }
    Ok(preds)
}

fn bench(table: &Path, fit_cores: &[usize], param_bytes: Option<u64>, out: Option<&Path>) -> Result<()> {
    let rows = perf::read_bench_csv(File::open(table).map_err(io_err(table))?)?;
    let preds = bench_predictions(&rows, fit_cores, param_bytes)?;
    match out {
        Some(path) => perf::write_predictions_csv(create(path)?, &preds),
        None => perf::write_predictions_csv(io::stdout().lock(), &preds),
    }
}

fn presets() -> Result<()> {
    println!("name,model,num_replicas,global_batch,optimizer,lr_per_256,decay,warmup_epochs");
    for p in config::presets() {
        println!(
            "{},{},{},{},{},{},{},{}",
            p.name,
            p.model,
            p.num_replicas,
            p.global_batch,
            p.optimizer,
            p.lr_per_256,
            p.decay,
            p.warmup_epochs
        );
    }
    Ok(())
}
