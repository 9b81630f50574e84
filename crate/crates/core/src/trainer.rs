//! Synchronous data-parallel training and sharded evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::collectives::{self, GroupAssignment, ReduceOp, Scope};
use crate::config::{DatasetSource, TrainConfig};
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::layers::argmax_rows;
use crate::nn::{ModelState, Network};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::perf;
use crate::precision::PrecisionPolicy;
use crate::rng;
use crate::schedule::lr_at;
use crate::tensor::Tensor;

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    perm
}

/// Example indices `[replica][step][i]` for one epoch.
///
/// Global batch `t` is `perm[t·B .. (t+1)·B]` with `B = N·b`, and replica `r`
/// takes its `r`-th slice of `b`. Remainder examples are dropped. Any
/// factorization of the same `B` therefore sees the same global batches.
pub fn shard_train_data(
    num_examples: usize,
    num_replicas: usize,
    per_core_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let global = num_replicas * per_core_batch;
    if global == 0 {
        return Err(Error::Precondition("global batch must be >= 1".into()));
    }
    if num_examples < global {
        return Err(Error::Precondition(format!(
            "dataset of {num_examples} examples is smaller than one global batch of {global}"
        )));
    }
    let perm = epoch_permutation(num_examples, seed, epoch);
    let steps = num_examples / global;
    Ok((0..num_replicas)
        .map(|r| {
            (0..steps)
                .map(|t| {
                    let start = t * global + r * per_core_batch;
                    perm[start..start + per_core_batch].to_vec()
                })
                .collect()
        })
        .collect())
}

/// N replicas in lockstep, each with its own parameters and optimizer slots.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    groups: GroupAssignment,
    policy: PrecisionPolicy,
    replicas: Vec<ModelState>,
    optimizers: Vec<Optimizer>,
    audit_every: usize,
    steps: usize,
}

impl Trainer {
    /// Every replica starts from a copy of `init`.
    pub fn new(
        net: Network,
        groups: GroupAssignment,
        policy: PrecisionPolicy,
        init: ModelState,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        net.check_state(&init)?;
        let n = groups.num_replicas();
        let opt = Optimizer::new(optimizer, &init.params)?;
        Ok(Trainer {
            net,
            groups,
            policy,
            replicas: vec![init; n],
            optimizers: vec![opt; n],
            audit_every: 1,
            steps: 0,
        })
    }

    /// Audits replica agreement every `every` steps (0 disables).
    pub fn with_audit_every(mut self, every: usize) -> Self {
        self.audit_every = every;
        self
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn num_replicas(&self) -> usize {
        self.replicas.len()
    }

    pub fn replicas(&self) -> &[ModelState] {
        &self.replicas
    }

    pub fn state(&self) -> &ModelState {
        &self.replicas[0]
    }

    pub fn optimizers(&self) -> &[Optimizer] {
        &self.optimizers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, backward, mean gradient all-reduce, identical optimizer step
    /// on every replica, and moving-statistics sync. Returns the mean loss.
    pub fn train_step(&mut self, inputs: &[Tensor], labels: &[&[usize]], lr: f32) -> Result<f32> {
        let pass = self
            .net
            .forward_train(&self.replicas, inputs, labels, &self.groups, self.policy)?;
        let loss = pass.mean_loss();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {}",
                self.steps
            )));
        }
        self.net
            .backward_train(&mut self.replicas, &pass, &self.groups, self.policy)?;
        for i in 0..self.replicas[0].params.len() {
            let local: Vec<Tensor> = self.replicas.iter().map(|s| s.params[i].grad.clone()).collect();
            let mean = collectives::all_reduce(&local, ReduceOp::Mean, Scope::All)?;
            for (st, g) in self.replicas.iter_mut().zip(mean) {
                st.params[i].grad = g;
            }
        }
        self.replicas
            .par_iter_mut()
            .zip(self.optimizers.par_iter_mut())
            .map(|(st, opt)| opt.step(&mut st.params, lr))
            .collect::<Result<Vec<()>>>()?;
        self.net
            .sync_moving_stats(&mut self.replicas, &pass, &self.groups)?;
        self.steps += 1;
        if self.audit_every > 0 && self.steps % self.audit_every == 0 {
            self.audit()?;
        }
        Ok(loss)
    }

    /// Fails unless every replica matches replica 0 bit for bit.
    pub fn audit(&self) -> Result<()> {
        for r in 1..self.replicas.len() {
            if !self.replicas[r].bitwise_eq(&self.replicas[0]) {
                return Err(Error::Consistency(format!(
                    "replica {r} parameters diverged from replica 0 after step {}",
                    self.steps
                )));
            }
            if !self.optimizers[r].state.bitwise_eq(&self.optimizers[0].state) {
                return Err(Error::Consistency(format!(
                    "replica {r} optimizer state diverged from replica 0 after step {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    #[doc(hidden)]
    pub fn replicas_mut(&mut self) -> &mut [ModelState] {
        &mut self.replicas
    }
}

/// `correct / total` over summed per-replica `(correct, total)` counts.
pub fn aggregate_counts(per_replica: &[(f32, f32)]) -> Result<f32> {
    let parts: Vec<Tensor> = per_replica
        .iter()
        .map(|&(c, t)| Tensor::new(vec![2], vec![c, t]))
        .collect::<Result<_>>()?;
    let sums = collectives::all_reduce(&parts, ReduceOp::Sum, Scope::All)?;
    let (correct, total) = (sums[0].data()[0], sums[0].data()[1]);
    if !(total > 0.0) {
        return Err(Error::Precondition("evaluation over zero examples".into()));
    }
    Ok(correct / total)
}

/// Top-1 accuracy with the eval set sharded over `num_replicas`.
///
/// The set is padded with zero-weight dummies to a multiple of
/// `num_replicas · eval_batch`; replica `r` evaluates the `r`-th contiguous
/// shard in batches of `eval_batch`. Counts are integers, so the result does
/// not depend on `num_replicas`.
pub fn distributed_eval(
    net: &Network,
    state: &ModelState,
    eval: &Dataset,
    num_replicas: usize,
    eval_batch: usize,
    policy: PrecisionPolicy,
) -> Result<f32> {
    if eval.is_empty() {
        return Err(Error::Precondition("empty eval dataset".into()));
    }
    if num_replicas == 0 || eval_batch == 0 {
        return Err(Error::Precondition("num_replicas and eval_batch must be >= 1".into()));
    }
    let chunk = num_replicas * eval_batch;
    let padded = eval.len().div_ceil(chunk) * chunk;
    let per_replica = padded / num_replicas;
    let [h, w, c] = eval.image_shape();
    let per_image = h * w * c;
    let counts = (0..num_replicas)
        .into_par_iter()
        .map(|r| {
            let (mut correct, mut total) = (0.0f32, 0.0f32);
            let start = r * per_replica;
            for b0 in (start..start + per_replica).step_by(eval_batch) {
                let real: Vec<usize> = (b0..b0 + eval_batch).filter(|&i| i < eval.len()).collect();
                let (x, labels) = if real.is_empty() {
                    (Tensor::zeros(&[eval_batch, h, w, c]), Vec::new())
                } else {
                    let (x, labels) = eval.gather(&real)?;
                    let mut d = x.into_data();
                    d.resize(eval_batch * per_image, 0.0);
                    (Tensor::new(vec![eval_batch, h, w, c], d)?, labels)
                };
                let logits = net.forward_eval(state, &x, policy)?;
                let pred = argmax_rows(&logits);
                for (i, p) in pred.iter().enumerate() {
                    let weight = if i < real.len() { 1.0 } else { 0.0 };
                    let label = labels.get(i).copied().unwrap_or(0);
                    if *p == label {
                        correct += weight;
                    }
                    total += weight;
                }
            }
            Ok((correct, total))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_counts(&counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Optimizer steps completed.
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    /// Absent on the evaluation-only record of a run with no training.
    pub train_loss: Option<f32>,
    pub eval_top1: Option<f32>,
    pub modeled_step_ms: f64,
    /// All-reduce share of the modeled step, in `[0, 1]`.
    pub allreduce_frac: f64,
    pub elapsed_s: Option<f64>,
}

impl MetricsRecord {
    /// Modeled time of the steps completed so far, in minutes.
    pub fn modeled_minutes(&self) -> f64 {
        self.step as f64 * self.modeled_step_ms / 60_000.0
    }
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "epoch",
    "lr",
    "train_loss",
    "eval_top1",
    "modeled_step_ms",
    "allreduce_frac",
    "elapsed_s",
];

pub fn write_metrics_csv(writer: impl Write, records: &[MetricsRecord]) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format(format!("writing metrics: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER).map_err(fmt_err)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            opt(r.train_loss.map(|v| v.to_string())),
            opt(r.eval_top1.map(|v| v.to_string())),
            r.modeled_step_ms.to_string(),
            r.allreduce_frac.to_string(),
            opt(r.elapsed_s.map(|v| v.to_string())),
        ])
        .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<metrics>".into(),
        source: e,
    })
}

/// Best eval accuracy and the time of its first attainment under `time_model`.
pub fn time_to_peak(
    records: &[MetricsRecord],
    time_model: impl Fn(&MetricsRecord) -> f64,
) -> Result<(f32, f64)> {
    let mut best: Option<(f32, f64)> = None;
    for r in records {
        if let Some(acc) = r.eval_top1 {
            if best.map_or(true, |(b, _)| acc > b) {
                best = Some((acc, time_model(r)));
            }
        }
    }
    best.ok_or_else(|| Error::Precondition("no evaluation records".into()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Fill `elapsed_s` with wall-clock seconds (breaks bitwise reproducibility
    /// of the metrics stream).
    pub wallclock: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    /// Diagnostic when training stopped on a non-finite loss.
    pub abort: Option<String>,
    pub state: ModelState,
    pub network: Network,
}

/// Training and evaluation datasets named by the config.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic => {
            let spec = SyntheticSpec::new(
                cfg.synthetic_classes,
                cfg.image_height,
                cfg.image_width,
                cfg.image_channels,
                cfg.seed,
            );
            let train = spec.generate(0..cfg.synthetic_train)?;
            let eval = spec.generate(cfg.synthetic_train..cfg.synthetic_train + cfg.synthetic_eval)?;
            Ok((train, eval))
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            eval,
        } => {
            let train = data::load_idx(train_images, train_labels)?;
            let eval = match eval {
                Some((i, l)) => data::load_idx(i, l)?,
                None => train.clone(),
            };
            let k = train.num_classes.max(eval.num_classes);
            Ok((
                Dataset { num_classes: k, ..train },
                Dataset { num_classes: k, ..eval },
            ))
        }
    }
}

pub fn run(cfg: &TrainConfig) -> Result<RunReport> {
    run_with(cfg, RunOptions::default())
}

/// Trains per `cfg`, evaluating every `eval_every_epochs` and at the end.
pub fn run_with(cfg: &TrainConfig, opts: RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, eval) = load_datasets(cfg)?;
    let net = cfg.network(train.image_shape(), train.num_classes)?;
    let init = net.init::<f32>(cfg.seed, cfg.bn_momentum, cfg.bn_eps)?;
    let (n, b) = (cfg.num_replicas, cfg.per_core_batch());
    let mut trainer = Trainer::new(net, cfg.groups()?, cfg.precision, init, cfg.optimizer_config())?;

    let steps_per_epoch = train.len() / cfg.global_batch;
    if steps_per_epoch == 0 {
        return Err(Error::Precondition(format!(
            "dataset of {} examples is smaller than one global batch of {}",
            train.len(),
            cfg.global_batch
        )));
    }
    let schedule = cfg.schedule(steps_per_epoch);
    let total_steps = schedule.total_steps();
    let eval_every = ((cfg.eval_every_epochs * steps_per_epoch as f64).round() as usize).max(1);
    let cost = cfg.cost_params(trainer.network().num_parameters());
    let modeled_step_ms = perf::step_time(b, n, &cost)?;
    let allreduce_frac = perf::allreduce_fraction(b, n, &cost)? / 100.0;

    let elapsed = || opts.wallclock.then(|| started.elapsed().as_secs_f64());
    let evaluate = |t: &Trainer| {
        distributed_eval(t.network(), t.state(), &eval, n, cfg.eval_batch, cfg.precision)
    };
    let mut records = Vec::with_capacity(total_steps + 1);
    if total_steps == 0 {
        records.push(MetricsRecord {
            step: 0,
            epoch: 0.0,
            lr: lr_at(&schedule, 0),
            train_loss: None,
            eval_top1: Some(evaluate(&trainer)?),
            modeled_step_ms,
            allreduce_frac,
            elapsed_s: elapsed(),
        });
    }

    let mut shards = Vec::new();
    let mut abort = None;
    for step in 0..total_steps {
        let (epoch, within) = (step / steps_per_epoch, step % steps_per_epoch);
        if within == 0 {
            shards = shard_train_data(train.len(), n, b, cfg.seed, epoch)?;
        }
        let batches = shards
            .iter()
            .map(|per_step| train.gather(&per_step[within]))
            .collect::<Result<Vec<_>>>()?;
        let (inputs, labels): (Vec<Tensor>, Vec<Vec<usize>>) = batches.into_iter().unzip();
        let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let lr = lr_at(&schedule, step);
        let done = step + 1;
        let mut record = MetricsRecord {
            step: done,
            epoch: done as f64 / steps_per_epoch as f64,
            lr,
            train_loss: None,
            eval_top1: None,
            modeled_step_ms,
            allreduce_frac,
            elapsed_s: None,
        };
        match trainer.train_step(&inputs, &label_refs, lr as f32) {
            Ok(loss) => record.train_loss = Some(loss),
            Err(Error::NonFinite(msg)) => {
                record.train_loss = Some(f32::NAN);
                record.elapsed_s = elapsed();
                records.push(record);
                abort = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
        if done % eval_every == 0 || done == total_steps {
            record.eval_top1 = Some(evaluate(&trainer)?);
        }
        record.elapsed_s = elapsed();
        records.push(record);
    }

    Ok(RunReport {
        records,
        abort,
        state: trainer.state().clone(),
        network: trainer.network().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::assign_groups_1d;
    use crate::config::{parse_config, ModelKind};
    use crate::nn::LayerSpec;
    use crate::optim::RmsPropConfig;

    #[test]
    fn sharding_layout() {
        let s = shard_train_data(8, 2, 2, 1, 0).unwrap();
        let p = epoch_permutation(8, 1, 0);
        assert_eq!(s[0], vec![vec![p[0], p[1]], vec![p[4], p[5]]]);
        assert_eq!(s[1], vec![vec![p[2], p[3]], vec![p[6], p[7]]]);
        let single = shard_train_data(8, 1, 2, 1, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 4);
        assert!(shard_train_data(3, 2, 2, 1, 0).is_err());
    }

    #[test]
    fn sharding_drops_remainder_and_is_disjoint() {
        let s = shard_train_data(103, 4, 5, 9, 2).unwrap();
        let mut all: Vec<usize> = s.iter().flatten().flatten().copied().collect();
        assert_eq!(all.len(), 100);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_ne!(epoch_permutation(50, 9, 0), epoch_permutation(50, 9, 1));
    }

    #[test]
    fn global_batches_independent_of_factorization() {
        let flat = |n: usize, b: usize| -> Vec<Vec<usize>> {
            let s = shard_train_data(64, n, b, 4, 3).unwrap();
            (0..s[0].len())
                .map(|t| s.iter().flat_map(|r| r[t].clone()).collect())
                .collect()
        };
        assert_eq!(flat(1, 16), flat(4, 4));
        assert_eq!(flat(2, 8), flat(16, 1));
    }

    #[test]
    fn count_aggregation() {
        assert_eq!(aggregate_counts(&[(3.0, 4.0), (2.0, 4.0)]).unwrap(), 0.625);
        assert!(aggregate_counts(&[(0.0, 0.0)]).is_err());
    }

    fn linear_setup() -> (Network, ModelState, Dataset) {
        let d = data::gen_synthetic(3, 10, 2, 2, 1, 1).unwrap();
        let net = Network::new(ModelKind::Linear.layers(3), [2, 2, 1]).unwrap();
        let st = net.init::<f32>(0, 0.9, 1e-3).unwrap();
        (net, st, d)
    }

    #[test]
    fn eval_padding_keeps_denominator() {
        let (net, st, d) = linear_setup();
        let plain = {
            let (x, y) = d.gather(&(0..10).collect::<Vec<_>>()).unwrap();
            let pred = argmax_rows(&net.forward_eval(&st, &x, PrecisionPolicy::Fp32Only).unwrap());
            pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f32 / 10.0
        };
        for (n, eb) in [(1, 10), (4, 2), (3, 7)] {
            let acc = distributed_eval(&net, &st, &d, n, eb, PrecisionPolicy::Fp32Only).unwrap();
            assert_eq!(acc.to_bits(), plain.to_bits(), "n={n} eb={eb}");
        }
    }

    #[test]
    fn zero_gradient_step_is_fixed_point() {
        let net = Network::new(
            vec![LayerSpec::dense("fc", 2), LayerSpec::head("head", 2)],
            [1, 1, 1],
        )
        .unwrap();
        let mut st = net.init::<f32>(0, 0.9, 1e-3).unwrap();
        for p in &mut st.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        // Balanced labels on identical zero inputs give exactly zero gradient.
        let x = Tensor::zeros(&[2, 1, 1, 1]);
        let cfg = OptimizerConfig::RmsProp(RmsPropConfig {
            momentum: 0.0,
            ..RmsPropConfig::default()
        });
        let mut t = Trainer::new(net, assign_groups_1d(1, 1).unwrap(), PrecisionPolicy::Fp32Only, st.clone(), cfg).unwrap();
        t.train_step(&[x], &[&[0, 1]], 0.5).unwrap();
        assert!(t.state().params.iter().zip(&st.params).all(|(a, b)| a.value.bitwise_eq(&b.value)));
    }

    #[test]
    fn divergence_is_detected() {
        let (net, st, _) = linear_setup();
        let mut t = Trainer::new(
            net,
            assign_groups_1d(2, 2).unwrap(),
            PrecisionPolicy::Fp32Only,
            st,
            OptimizerConfig::RmsProp(RmsPropConfig::default()),
        )
        .unwrap();
        t.audit().unwrap();
        t.replicas_mut()[1].params[0].value.data_mut()[0] += 1.0;
        assert!(matches!(t.audit(), Err(Error::Consistency(_))));
    }

    fn tiny_cfg(overrides: &[(&str, &str)]) -> TrainConfig {
        let mut cfg = parse_config(
            "num_replicas = 2\nglobal_batch = 8\noptimizer = rmsprop\nlr_per_256 = 0.5\n\
             model = linear\nsynthetic_classes = 3\nsynthetic_train = 32\nsynthetic_eval = 10\n\
             image_height = 3\nimage_width = 3\nwarmup_epochs = 1\ntotal_epochs = 3\n",
        )
        .unwrap();
        for (k, v) in overrides {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn run_records_and_determinism() {
        let cfg = tiny_cfg(&[]);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 12);
        assert!(a.abort.is_none());
        let evals = a.records.iter().filter(|r| r.eval_top1.is_some()).count();
        assert_eq!(evals, 3);
        assert!(a.records.iter().all(|r| r.eval_top1.map_or(true, |v| (0.0..=1.0).contains(&v))));
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &a.records).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,epoch,lr,train_loss,eval_top1,modeled_step_ms,allreduce_frac,elapsed_s\n"));
        assert!(text.lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn zero_epochs_gives_single_eval() {
        let cfg = tiny_cfg(&[]);
        let cfg = TrainConfig {
            total_epochs: 0.0,
            warmup_epochs: 0.0,
            ..cfg
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].step, 0);
        assert!(r.records[0].train_loss.is_none());
        assert!(r.records[0].eval_top1.is_some());
    }

    #[test]
    fn divergent_run_aborts_with_diagnostic() {
        let cfg = tiny_cfg(&[("optimizer", "lars"), ("lr_per_256", "1e38"), ("warmup_epochs", "0")]);
        let r = run(&cfg).unwrap();
        assert!(r.abort.is_some());
        assert!(r.records.last().unwrap().train_loss.unwrap().is_nan());
    }

    #[test]
    fn too_small_dataset() {
        let cfg = tiny_cfg(&[("global_batch", "64")]);
        assert!(run(&cfg).is_err());
    }

    fn rec(step: usize, acc: Option<f32>) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch: 0.0,
            lr: 0.0,
            train_loss: None,
            eval_top1: acc,
            modeled_step_ms: 1.0,
            allreduce_frac: 0.0,
            elapsed_s: None,
        }
    }

    #[test]
    fn peak_extraction() {
        let t = |r: &MetricsRecord| r.step as f64;
        assert_eq!(time_to_peak(&[rec(10, Some(0.8))], t).unwrap(), (0.8, 10.0));
        let rs = [rec(1, Some(0.5)), rec(2, Some(0.9)), rec(3, Some(0.9))];
        assert_eq!(time_to_peak(&rs, t).unwrap(), (0.9, 2.0));
        assert!(time_to_peak(&[rec(1, None)], t).is_err());
        assert!(time_to_peak(&[], t).is_err());
        assert_eq!(rec(60_000, None).modeled_minutes(), 1.0);
    }
}
