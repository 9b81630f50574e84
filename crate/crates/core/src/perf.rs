//! Analytic step-time model: padded per-core compute followed by a ring
//! all-reduce of the gradients, with no compute/communication overlap.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::collectives::padded_batch_utilization;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub per_image_compute_ms: f64,
    /// Four bytes per fp32 parameter.
    pub param_bytes: u64,
    pub link_bandwidth_bytes_per_ms: f64,
    pub per_hop_latency_ms: f64,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.per_image_compute_ms > 0.0
            && self.param_bytes > 0
            && self.link_bandwidth_bytes_per_ms > 0.0
            && self.per_hop_latency_ms >= 0.0
            && self.per_hop_latency_ms.is_finite();
        if !ok {
            return Err(Error::Precondition(format!(
                "cost model needs positive compute, param bytes and bandwidth, and finite latency >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Ring all-reduce of `param_bytes` over `n` replicas, in ms.
pub fn allreduce_time(param_bytes: u64, n: usize, p: &CostModelParams) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n_f = n as f64;
    2.0 * (n_f - 1.0) / n_f * param_bytes as f64 / p.link_bandwidth_bytes_per_ms
        + 2.0 * (n_f - 1.0) * p.per_hop_latency_ms
}

/// Compute charged for a per-core batch padded to a multiple of eight.
pub fn compute_time(per_core_batch: usize, p: &CostModelParams) -> Result<f64> {
    let (padded, _) = padded_batch_utilization(per_core_batch)?;
    Ok(padded as f64 * p.per_image_compute_ms)
}

pub fn step_time(per_core_batch: usize, n: usize, p: &CostModelParams) -> Result<f64> {
    Ok(compute_time(per_core_batch, p)? + allreduce_time(p.param_bytes, n, p))
}

/// Images per ms.
pub fn throughput(global_batch: usize, step_ms: f64) -> f64 {
    global_batch as f64 / step_ms
}

/// Percent of the step spent in the all-reduce.
pub fn allreduce_fraction(per_core_batch: usize, n: usize, p: &CostModelParams) -> Result<f64> {
    Ok(allreduce_time(p.param_bytes, n, p) / step_time(per_core_batch, n, p)? * 100.0)
}

/// One measured configuration, shaped like a row of a throughput table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub cores: usize,
    pub global_batch: usize,
    /// Images per ms.
    pub throughput: f64,
    pub allreduce_pct: f64,
}

impl BenchRow {
    fn per_core_batch(&self) -> Result<usize> {
        if self.cores == 0 || self.global_batch == 0 || self.global_batch % self.cores != 0 {
            return Err(Error::Precondition(format!(
                "{} cores do not evenly split a global batch of {}",
                self.cores, self.global_batch
            )));
        }
        Ok(self.global_batch / self.cores)
    }

    fn step_ms(&self) -> f64 {
        self.global_batch as f64 / self.throughput
    }
}

/// Modeled throughput and all-reduce percent for `cores` replicas sharing
/// `global_batch`.
pub fn predict(p: &CostModelParams, cores: usize, global_batch: usize) -> Result<(f64, f64)> {
    let row = BenchRow {
        model: String::new(),
        cores,
        global_batch,
        throughput: 1.0,
        allreduce_pct: 0.0,
    };
    let b = row.per_core_batch()?;
    let step = step_time(b, cores, p)?;
    Ok((throughput(global_batch, step), allreduce_fraction(b, cores, p)?))
}

/// Fits compute, bandwidth and latency to measured rows.
///
/// Each row yields two linear equations in `(c, q = param_bytes/bandwidth, L)`:
/// one for the step time `B / throughput` and one for the all-reduce time
/// `step · pct / 100`, each divided by its measured value so residuals are
/// relative. The non-negative least-squares solution is found by solving
/// every subset of free variables and keeping the best feasible one.
pub fn calibrate(rows: &[BenchRow], param_bytes: u64) -> Result<CostModelParams> {
    if rows.len() < 2 {
        return Err(Error::Precondition(format!(
            "calibration needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    if rows.iter().all(|r| r.cores == rows[0].cores) {
        return Err(Error::Precondition(format!(
            "calibration rows all use {} cores; bandwidth and latency are not separable",
            rows[0].cores
        )));
    }
    if param_bytes == 0 {
        return Err(Error::Precondition("param_bytes must be > 0".into()));
    }
    let mut eqs: Vec<([f64; 3], f64)> = Vec::with_capacity(2 * rows.len());
    for r in rows {
        if !(r.throughput > 0.0) || !(0.0..100.0).contains(&r.allreduce_pct) {
            return Err(Error::Precondition(format!(
                "row needs throughput > 0 and 0 <= allreduce_pct < 100: {r:?}"
            )));
        }
        let b = r.per_core_batch()?;
        let (padded, _) = padded_batch_utilization(b)?;
        let n = r.cores as f64;
        let ring = 2.0 * (n - 1.0) / n;
        let hops = 2.0 * (n - 1.0);
        let step = r.step_ms();
        eqs.push(([padded as f64 / step, ring / step, hops / step], 1.0));
        let ar = step * r.allreduce_pct / 100.0;
        if ar > 0.0 {
            eqs.push(([0.0, ring / ar, hops / ar], 1.0));
        }
    }

    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 1u8..8 {
        let cols: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let a = DMatrix::from_fn(eqs.len(), cols.len(), |i, j| eqs[i].0[cols[j]]);
        let y = DVector::from_iterator(eqs.len(), eqs.iter().map(|e| e.1));
        let Ok(sol) = a.clone().svd(true, true).solve(&y, 1e-12) else {
            continue;
        };
        if sol.iter().any(|&v| !(v >= 0.0)) {
            continue;
        }
        let mut x = [0.0; 3];
        for (j, &c) in cols.iter().enumerate() {
            x[c] = sol[j];
        }
        let ssr = (a * sol - y).norm_squared();
        if best.map_or(true, |(_, s)| ssr < s) {
            best = Some((x, ssr));
        }
    }
    let ([c, q, lat], _) =
        best.ok_or_else(|| Error::Precondition("no non-negative fit exists".into()))?;
    if !(c > 0.0 && q > 0.0) {
        return Err(Error::Precondition(format!(
            "degenerate fit: compute {c} ms/image, transfer {q} ms"
        )));
    }
    Ok(CostModelParams {
        per_image_compute_ms: c,
        param_bytes,
        link_bandwidth_bytes_per_ms: param_bytes as f64 / q,
        per_hop_latency_ms: lat,
    })
}

/// Parses `model,cores,global_batch,throughput,allreduce_pct` rows.
pub fn read_bench_csv(reader: impl Read) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<BenchRow>, _>>()
        .map_err(|e| Error::Format(format!("bench table: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Format("bench table has no rows".into()));
    }
    Ok(rows)
}

/// Observed and modeled values for one row under fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPrediction {
    pub model: String,
    pub cores: usize,
    pub global_batch: usize,
    pub observed_throughput: f64,
    pub predicted_throughput: f64,
    pub observed_allreduce_pct: f64,
    pub predicted_allreduce_pct: f64,
    pub used_in_fit: bool,
    pub per_image_compute_ms: f64,
    pub param_bytes: u64,
    pub link_bandwidth_bytes_per_ms: f64,
    pub per_hop_latency_ms: f64,
}

impl BenchPrediction {
    pub fn new(row: &BenchRow, p: &CostModelParams, used_in_fit: bool) -> Result<Self> {
        let (tp, pct) = predict(p, row.cores, row.global_batch)?;
        Ok(BenchPrediction {
            model: row.model.clone(),
            cores: row.cores,
            global_batch: row.global_batch,
            observed_throughput: row.throughput,
            predicted_throughput: tp,
            observed_allreduce_pct: row.allreduce_pct,
            predicted_allreduce_pct: pct,
            used_in_fit,
            per_image_compute_ms: p.per_image_compute_ms,
            param_bytes: p.param_bytes,
            link_bandwidth_bytes_per_ms: p.link_bandwidth_bytes_per_ms,
            per_hop_latency_ms: p.per_hop_latency_ms,
        })
    }
}

pub fn write_predictions_csv(writer: impl Write, preds: &[BenchPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in preds {
        w.serialize(p)
            .map_err(|e| Error::Format(format!("writing predictions: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Io {
            path: "<predictions>".into(),
            source: e,
        })
}
