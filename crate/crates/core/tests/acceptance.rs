//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use podsim::cli::bench_predictions;
use podsim::collectives::{assign_groups_1d, assign_groups_2d, GroupAssignment, ReplicaTopology};
use podsim::config::{parse_config, preset, ModelKind, TrainConfig};
use podsim::data::{Dataset, SyntheticSpec};
use podsim::distbn::{group_bn_forward, BnState};
use podsim::nn::gradcheck::grad_check_replicated;
use podsim::nn::layers::{argmax_rows, conv2d_forward, Padding};
use podsim::nn::model::{LayerSpec, ModelState, Network, ParamTag, Parameter};
use podsim::optim::{LarsConfig, Optimizer, OptimizerConfig, RmsPropConfig};
use podsim::perf::read_bench_csv;
use podsim::precision::{conv2d_mixed, to_bf16, PrecisionPolicy};
use podsim::schedule::lr_at_epoch;
use podsim::trainer::{distributed_eval, run, RunReport};
use podsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed < limit,
        format!("{detail}; {:.1}s of {}s budget", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let net = Network::new(ModelKind::PoolCnn.layers(3), [5, 5, 2]).map_err(|e| e.to_string())?;
    let groups = assign_groups_1d(2, 2).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let state = net.init::<f64>(seed, 0.99, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<_> = (0..2).map(|_| uniform(&[3, 5, 5, 2], &mut rng)).collect();
        let labels: Vec<Vec<usize>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(0..3)).collect()).collect();
        let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let report = grad_check_replicated(&net, &state, &inputs, &refs, &groups, PrecisionPolicy::Fp32Only, 1e-3)
            .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_err);
    }
    let ok = worst < 1e-3;
    within(
        started.elapsed(),
        Duration::from_secs(120),
        format!("max_rel_err {worst:.2e} over 20 seeds (< 1e-3)"),
    )
    .and_then(|d| check(ok, d))
}

/// Inference-free BN over the whole batch, computed directly in f64.
fn reference_bn(x: &[f64], channels: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let col: Vec<f64> = (0..rows).map(|r| x[r * channels + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * channels + c] = (x[r * channels + c] - mean) / (var + eps).sqrt();
        }
    }
    out
}

fn distributed_bn() -> Outcome {
    let (n, b, shape) = (8usize, 4usize, [3usize, 3, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Tensor<f32>> = (0..n)
        .map(|_| Tensor::from_fn(&[b, 3, 3, 2], |_| rng.gen_range(-1.0f32..1.0) * 3.0 + 0.5))
        .collect();
    let state = BnState::<f32>::new(2, 0.99, 1e-3).unwrap();
    let grouped = group_bn_forward(&xs, &state).map_err(|e| e.to_string())?;
    let concat = Tensor::new(vec![n * b, 3, 3, 2], xs.iter().flat_map(|x| x.data().to_vec()).collect()).unwrap();
    let single = group_bn_forward(std::slice::from_ref(&concat), &state).map_err(|e| e.to_string())?;
    let all: Vec<f64> = concat.data().iter().map(|&v| v as f64).collect();
    let oracle = reference_bn(&all, 2, 1e-3);
    let got: Vec<f32> = grouped.ys.iter().flat_map(|t| t.data().to_vec()).collect();
    let vs_single = got.iter().zip(single.ys[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    let vs_oracle = got.iter().zip(&oracle).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);

    let net = Network::new(vec![LayerSpec::batchnorm("bn"), LayerSpec::pool("pool"), LayerSpec::head("head", 2)], shape)
        .map_err(|e| e.to_string())?;
    let replicas = vec![net.init::<f32>(0, 0.99, 1e-3).unwrap(); n];
    let labels = vec![vec![0usize; b]; n];
    let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let policy = PrecisionPolicy::Fp32Only;
    let per_replica = net
        .forward_train(&replicas, &xs, &refs, &GroupAssignment::singletons(n), policy)
        .map_err(|e| e.to_string())?;
    let g1_bitwise = (0..n).all(|r| {
        let alone = net
            .forward_train(&replicas[..1], &xs[r..r + 1], &refs[r..r + 1], &GroupAssignment::singletons(1), policy)
            .unwrap();
        alone.logits[0].bitwise_eq(&per_replica.logits[r])
    });

    let grid = assign_groups_2d(&ReplicaTopology::with_grid(4, 4).unwrap(), (2, 2)).unwrap();
    let expected: [&[usize]; 4] = [&[0, 1, 4, 5], &[2, 3, 6, 7], &[8, 9, 12, 13], &[10, 11, 14, 15]];
    let tiles_ok = grid.num_groups() == 4 && grid.groups().zip(expected).all(|(g, e)| g == e);

    check(
        vs_single <= 1e-6 && vs_oracle <= 1e-6 && g1_bitwise && tiles_ok,
        format!(
            "G=8 max err {vs_single:.1e} vs single device, {vs_oracle:.1e} vs f64 oracle (<= 1e-6); \
             G=1 bitwise {g1_bitwise}; 4x4 grid 2x2 tiles exact {tiles_ok}"
        ),
    )
}

fn data_parallel_config(n: usize) -> TrainConfig {
    parse_config(&format!(
        "model = toy_cnn\ndataset = synthetic\nsynthetic_train = 640\nsynthetic_eval = 64\n\
         image_height = 8\nimage_width = 8\nimage_channels = 1\nsynthetic_classes = 4\n\
         num_replicas = {n}\nbn_group_size = {n}\nglobal_batch = 64\noptimizer = rmsprop\n\
         lr_per_256 = 0.016\nwarmup_epochs = 1\ntotal_epochs = 10\neval_every_epochs = 10\n"
    ))
    .expect("valid config")
}

fn max_rel_diff(a: &ModelState, b: &ModelState) -> f64 {
    let mut worst = 0.0f64;
    for (p, q) in a.params.iter().zip(&b.params) {
        for (&x, &y) in p.value.data().iter().zip(q.value.data()) {
            let scale = x.abs().max(y.abs()) as f64;
            if scale > 0.0 {
                worst = worst.max((x as f64 - y as f64).abs() / scale);
            }
        }
    }
    worst
}

fn data_parallel_equivalence() -> Outcome {
    let started = Instant::now();
    let reference = run(&data_parallel_config(1)).map_err(|e| e.to_string())?;
    let steps = reference.records.len();
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for n in [2, 4, 8] {
        let other = run(&data_parallel_config(n)).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_diff(&reference.state, &other.state));
        bitwise &= reference.state.bitwise_eq(&other.state);
    }
    let ok = steps == 100 && worst <= 1e-5;
    within(
        started.elapsed(),
        Duration::from_secs(300),
        format!("{steps} steps; max relative parameter difference {worst:.1e} (<= 1e-5), bitwise {bitwise}"),
    )
    .and_then(|d| check(ok, d))
}

fn schedule_closed_forms() -> Outcome {
    let mut lars = TrainConfig::default();
    preset("b5-lars-32768").unwrap().apply(&mut lars).unwrap();
    let spec = lars.schedule(1000);
    let peak: f64 = 0.118 * 32768.0 / 256.0;
    let mut err = (lr_at_epoch(&spec, 50.0) - peak).abs();
    err = err.max((peak - 15.104).abs());
    err = err.max(lr_at_epoch(&spec, 350.0).abs());
    for e in [0.0, 10.0, 25.0, 49.5] {
        err = err.max((lr_at_epoch(&spec, e) - peak * e / 50.0).abs());
    }
    for e in [60.0f64, 125.0, 200.0, 349.0] {
        let closed = peak * (1.0 - (e - 50.0) / 300.0).powi(2);
        err = err.max((lr_at_epoch(&spec, e) - closed).abs());
    }

    let mut rms = TrainConfig::default();
    preset("b2-rmsprop-4096").unwrap().apply(&mut rms).unwrap();
    let spec = rms.schedule(1000);
    err = err.max((lr_at_epoch(&spec, 5.0) - 0.256).abs());
    for k in 0..=100 {
        let e = 5.0 + 2.4 * k as f64;
        if e > 350.0 {
            break;
        }
        err = err.max((lr_at_epoch(&spec, e) - 0.256 * 0.97f64.powi(k)).abs());
    }
    check(
        err <= 1e-12,
        format!("b5-lars-32768 peak {:.3} at epoch 50, 0 at 350; b2-rmsprop-4096 staircase; max error {err:.1e} (<= 1e-12)", peak),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn scalar(value: f64, tag: ParamTag) -> Vec<Parameter<f64>> {
    vec![Parameter::new("w", Tensor::new(vec![1], vec![value]).unwrap(), tag)]
}

fn optimizer_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = RmsPropConfig {
            decay: rng.gen_range(0.5..0.999),
            momentum: rng.gen_range(0.0..0.99),
            eps: 10f64.powf(rng.gen_range(-8.0..-1.0)),
        };
        let mut w = rng.gen_range(-2.0..2.0);
        let mut params = scalar(w, ParamTag::Kernel);
        let mut opt = Optimizer::new(OptimizerConfig::RmsProp(cfg), &params).unwrap();
        let (mut acc, mut mom) = (0.0, 0.0);
        for _ in 0..rng.gen_range(1..6) {
            let (g, lr) = (rng.gen_range(-3.0..3.0), rng.gen_range(1e-4..1.0));
            params[0].grad = Tensor::new(vec![1], vec![g]).unwrap();
            opt.step(&mut params, lr).unwrap();
            acc = cfg.decay * acc + (1.0 - cfg.decay) * g * g;
            mom = cfg.momentum * mom + lr * g / (acc + cfg.eps).sqrt();
            w -= mom;
            worst = worst.max(rel(params[0].value.data()[0], w));
        }
    }
    for case in 0..100 {
        let cfg = LarsConfig {
            eta: rng.gen_range(1e-4..0.1),
            momentum: rng.gen_range(0.0..0.99),
            weight_decay: rng.gen_range(0.0..1e-3),
            eps: if case % 2 == 0 { 0.0 } else { 1e-9 },
            ..LarsConfig::default()
        };
        let tag = if case % 4 == 3 { ParamTag::Bias } else { ParamTag::Kernel };
        let excluded = tag == ParamTag::Bias;
        let mut w = rng.gen_range(-2.0..2.0);
        let mut params = scalar(w, tag);
        let mut opt = Optimizer::new(OptimizerConfig::Lars(cfg.clone()), &params).unwrap();
        let mut mom = 0.0;
        for _ in 0..rng.gen_range(1..6) {
            let (g, lr) = (rng.gen_range(-3.0..3.0), rng.gen_range(1e-3..10.0));
            params[0].grad = Tensor::new(vec![1], vec![g]).unwrap();
            opt.step(&mut params, lr).unwrap();
            let (local, wd) = if excluded {
                (lr, 0.0)
            } else {
                let trust = cfg.eta * w.abs() / (g.abs() + cfg.weight_decay * w.abs() + cfg.eps);
                (lr * trust, cfg.weight_decay)
            };
            mom = cfg.momentum * mom + local * (g + wd * w);
            w -= mom;
            worst = worst.max(rel(params[0].value.data()[0], w));
        }
    }

    let mut invariance = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(2..64);
        let cfg = LarsConfig {
            eta: rng.gen_range(1e-4..0.1),
            momentum: 0.0,
            weight_decay: 0.0,
            eps: 0.0,
            ..LarsConfig::default()
        };
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let mut params = vec![Parameter::new("w", Tensor::new(vec![len], w.clone()).unwrap(), ParamTag::Kernel)];
        params[0].grad = Tensor::from_fn(&[len], |_| scale * rng.gen_range(-1.0..1.0));
        let lr = rng.gen_range(0.01..10.0);
        let mut opt = Optimizer::new(OptimizerConfig::Lars(cfg.clone()), &params).unwrap();
        opt.step(&mut params, lr).unwrap();
        let dw: f64 = params[0].value.data().iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let wn: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        invariance = invariance.max(rel(dw, lr * cfg.eta * wn));
    }
    check(
        worst < 1e-12 && invariance <= 1e-10,
        format!("max formula rel err {worst:.1e} (< 1e-12); LARS |dw| invariance rel err {invariance:.1e} (<= 1e-10)"),
    )
}

fn bf16_properties() -> Outcome {
    let roundtrip = (0u32..1 << 16).all(|hi| {
        let x = f32::from_bits(hi << 16);
        to_bf16(x).to_bits() == x.to_bits()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut samples: Vec<f32> = Vec::with_capacity(1_000_000);
    while samples.len() < 1_000_000 {
        let x = f32::from_bits(rng.gen());
        if !x.is_nan() {
            samples.push(x);
        }
    }
    let idempotent = samples.iter().all(|&x| to_bf16(to_bf16(x)).to_bits() == to_bf16(x).to_bits());
    samples.sort_by(|a, b| a.total_cmp(b));
    let monotone = samples.windows(2).all(|p| to_bf16(p[0]) <= to_bf16(p[1]));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = Tensor::<f32>::from_fn(&[2, 7, 7, 3], |_| rng.gen_range(-1.0..1.0));
    let kernel = Tensor::<f32>::from_fn(&[3, 3, 3, 4], |_| rng.gen_range(-1.0..1.0));
    let conv_same = [Padding::Same, Padding::Valid].into_iter().all(|pad| {
        conv2d_mixed(&input, &kernel, 2, pad, PrecisionPolicy::Fp32Only)
            .unwrap()
            .bitwise_eq(&conv2d_forward(&input, &kernel, 2, pad).unwrap())
    });
    check(
        roundtrip && idempotent && monotone && conv_same,
        format!(
            "2^16 round-trip {roundtrip}; idempotent {idempotent} and monotone {monotone} over 1e6 samples; fp32 conv bitwise {conv_same}"
        ),
    )
}

fn final_top1(report: &RunReport) -> f32 {
    report.records.iter().rev().find_map(|r| r.eval_top1).unwrap_or(0.0)
}

fn toy_training() -> Result<(String, RunReport, TrainConfig), String> {
    let mut results = Vec::new();
    let mut detail = Vec::new();
    for name in ["toy-rmsprop-512", "toy-lars-2048"] {
        let started = Instant::now();
        let cfg = parse_config(&format!("preset = {name}\n")).map_err(|e| e.to_string())?;
        let report = run(&cfg).map_err(|e| e.to_string())?;
        if let Some(msg) = &report.abort {
            return Err(format!("{name} aborted: {msg}"));
        }
        let elapsed = started.elapsed();
        detail.push(format!("{name} top-1 {:.4} in {:.1}s", final_top1(&report), elapsed.as_secs_f64()));
        if elapsed > Duration::from_secs(600) {
            return Err(format!("{} (over 600s)", detail.join("; ")));
        }
        results.push((report, cfg));
    }
    let (lars, _) = results.pop().unwrap();
    let (rms, rms_cfg) = results.pop().unwrap();
    let (a, b) = (final_top1(&rms), final_top1(&lars));
    let detail = format!("{}; need rmsprop >= 0.95 and lars >= rmsprop - 0.015", detail.join("; "));
    if a >= 0.95 && b >= a - 0.015 {
        Ok((detail, rms, rms_cfg))
    } else {
        Err(detail)
    }
}

fn cost_model() -> Outcome {
    let table = fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/data/throughput_table.csv")).map_err(|e| e.to_string())?;
    let rows = read_bench_csv(table.as_slice()).map_err(|e| e.to_string())?;
    let preds = bench_predictions(&rows, &[128, 256, 512], None).map_err(|e| e.to_string())?;
    let at_1024 = |model: &str| preds.iter().find(|p| p.model == model && p.cores == 1024).unwrap();
    let (b2, b5) = (at_1024("b2"), at_1024("b5"));
    let e2 = (b2.predicted_throughput - 451.35).abs() / 451.35;
    let e5 = (b5.predicted_throughput - 77.44).abs() / 77.44;
    let max_pct = preds.iter().map(|p| p.predicted_allreduce_pct).fold(0.0, f64::max);
    check(
        e2 <= 0.10 && e5 <= 0.10 && max_pct < 5.0,
        format!(
            "B2@1024 {:.2} vs 451.35 ({:.1}%); B5@1024 {:.2} vs 77.44 ({:.1}%); max all-reduce {max_pct:.2}% (< 5%)",
            b2.predicted_throughput,
            100.0 * e2,
            b5.predicted_throughput,
            100.0 * e5
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.cfg");
    fs::write(&config, "preset = toy-rmsprop-512\ntotal_epochs = 2\nsynthetic_train = 2048\nsynthetic_eval = 512\n")
        .map_err(|e| e.to_string())?;
    let train = |tag: &str, workers: Option<usize>| -> Result<Vec<u8>, String> {
        let out = dir.path().join(format!("{tag}.csv"));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_podsim"));
        cmd.arg("train").arg("--config").arg(&config).arg("--out").arg(&out);
        if let Some(w) = workers {
            cmd.arg("--workers").arg(w.to_string());
        }
        let status = cmd.output().map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{tag}: {}", String::from_utf8_lossy(&status.stderr)));
        }
        fs::read(&out).map_err(|e| e.to_string())
    };
    let first = train("a", None)?;
    let runs = [train("b", None)?, train("w1", Some(1))?, train("w3", Some(3))?];
    let same = runs.iter().all(|r| *r == first);
    check(
        same && !first.is_empty(),
        format!("{} byte metrics CSV identical across 2 runs and 1/3/default workers: {same}", first.len()),
    )
}

/// Accuracies of `state` on 10,000 held-out examples for N = 1, 2, 4, 8, and
/// a direct batch-by-batch count.
fn eval_accuracies(state: &ModelState, cfg: &TrainConfig) -> (Vec<f32>, f32) {
    let spec = SyntheticSpec::new(cfg.synthetic_classes, cfg.image_height, cfg.image_width, cfg.image_channels, cfg.seed);
    let first = cfg.synthetic_train + cfg.synthetic_eval;
    let eval: Dataset = spec.generate(first..first + 10_000).unwrap();
    let net = cfg.network(eval.image_shape(), eval.num_classes).unwrap();
    let mut correct = 0usize;
    for start in (0..eval.len()).step_by(100) {
        let idx: Vec<usize> = (start..start + 100).collect();
        let (x, y) = eval.gather(&idx).unwrap();
        let logits = net.forward_eval(state, &x, cfg.precision).unwrap();
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    let accs = [1, 2, 4, 8]
        .into_iter()
        .map(|n| distributed_eval(&net, state, &eval, n, cfg.eval_batch, cfg.precision).unwrap())
        .collect();
    (accs, correct as f32 / eval.len() as f32)
}

fn eval_invariance(trained: Option<&ModelState>, cfg: &TrainConfig) -> Outcome {
    let net = cfg.network([cfg.image_height, cfg.image_width, cfg.image_channels], cfg.synthetic_classes).unwrap();
    let untrained = net.init(cfg.seed, cfg.bn_momentum, cfg.bn_eps).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (label, state) in [("untrained", Some(&untrained)), ("trained", trained)] {
        let Some(state) = state else { continue };
        let (accs, direct) = eval_accuracies(state, cfg);
        ok &= accs.iter().all(|a| a.to_bits() == direct.to_bits());
        detail.push(format!("{label} top-1 for N=1,2,4,8 {accs:?}, direct count {direct}"));
    }
    check(ok, detail.join("; "))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail}");
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "distributed batch norm", distributed_bn());
    report(3, "data-parallel equivalence", data_parallel_equivalence());
    report(4, "schedule closed forms", schedule_closed_forms());
    report(5, "optimizer oracles", optimizer_oracles());
    report(6, "bfloat16", bf16_properties());
    let trained = toy_training();
    let (outcome7, trained) = match trained {
        Ok((d, rep, cfg)) => (Ok(d), Some((rep, cfg))),
        Err(d) => (Err(d), None),
    };
    report(7, "toy training", outcome7);
    report(8, "cost model", cost_model());
    report(9, "determinism", determinism());
    let outcome10 = match &trained {
        Some((rep, cfg)) => eval_invariance(Some(&rep.state), cfg),
        None => eval_invariance(None, &parse_config("preset = toy-rmsprop-512\n").unwrap()),
    };
    report(10, "evaluation invariance", outcome10);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
