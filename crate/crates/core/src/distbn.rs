//! Batch normalization with statistics shared across a replica group.
//!
//! Statistics are per channel (last axis) over every sample and spatial
//! position of every replica in the group, so the effective BN batch size is
//! `G · b`. Cross-replica sums go through [`collectives::all_reduce`].

use serde::{Deserialize, Serialize};

use crate::collectives::{self, ReduceOp, Scope};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{pairwise_sum, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct BnState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BnState<T> {
    /// gamma = 1, beta = 0, moving mean 0, moving variance 1.
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Precondition(format!(
                "bn momentum must be in (0, 1), got {momentum}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Precondition(format!("bn eps must be > 0, got {eps}")));
        }
        Ok(BnState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], T::one()),
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Output of a group forward pass; `mean`/`var` are the shared group
/// statistics (population variance).
#[derive(Debug, Clone)]
pub struct GroupBnForward<T = f32> {
    pub ys: Vec<Tensor<T>>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Samples contributing to the statistics: `G · b`.
    pub bn_batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct GroupBnBackward<T = f32> {
    pub grad_xs: Vec<Tensor<T>>,
    /// Summed over the whole group.
    pub grad_gamma: Tensor<T>,
    /// Summed over the whole group.
    pub grad_beta: Tensor<T>,
}

/// BN batch size seen by a group of `group_size` replicas with `per_core_batch`
/// samples each.
pub fn bn_batch_size(group_size: usize, per_core_batch: usize) -> usize {
    group_size * per_core_batch
}

/// Validates the group and returns (rows per replica, channels).
fn group_geometry<T: Real>(xs: &[Tensor<T>], channels: usize) -> Result<(usize, usize)> {
    let Some(first) = xs.first() else {
        return Err(Error::Precondition("empty BN group".into()));
    };
    for x in &xs[1..] {
        first.same_shape("group_bn", x)?;
    }
    let shape = first.shape();
    if shape.len() < 2 || *shape.last().unwrap() != channels {
        return Err(Error::Dimension {
            op: "group_bn",
            lhs: shape.to_vec(),
            rhs: vec![channels],
        });
    }
    Ok((first.len() / channels, channels))
}

/// Per-channel sum of `f(index, channel)` over the rows of `x`.
fn channel_sums<T: Real>(x: &Tensor<T>, c: usize, f: impl Fn(usize, usize) -> T) -> Tensor<T> {
    channel_sums_of(x.shape()[0], x.len(), c, f)
}

/// Per-channel sum over `len` flat indices split into `examples` equal
/// blocks: row order within an example, then pairwise over examples.
fn channel_sums_of<T: Real>(
    examples: usize,
    len: usize,
    c: usize,
    f: impl Fn(usize, usize) -> T,
) -> Tensor<T> {
    let per_example = len / examples;
    let partials: Vec<Vec<T>> = (0..examples)
        .map(|n| {
            let mut acc = vec![T::zero(); c];
            for i in (n * per_example..(n + 1) * per_example).step_by(c) {
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += f(i + ch, ch);
                }
            }
            acc
        })
        .collect();
    Tensor::new(vec![c], pairwise_sum(&partials)).expect("channel count is positive")
}

fn group_sum<T: Real>(partials: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut reduced = collectives::all_reduce(&partials, ReduceOp::Sum, Scope::All)?;
    Ok(reduced.swap_remove(0))
}

fn inv_std<T: Real>(var: &Tensor<T>, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Forward pass over all replicas of one group (`xs` in ascending replica order).
pub fn group_bn_forward<T: Real>(
    xs: &[Tensor<T>],
    state: &BnState<T>,
) -> Result<GroupBnForward<T>> {
    let (rows, c) = group_geometry(xs, state.channels())?;
    let count = T::from_usize(rows * xs.len());

    let sums = group_sum(
        xs.iter()
            .map(|x| channel_sums(x, c, |i, _| x.data()[i]))
            .collect(),
    )?;
    let mean = sums.map(|s| s / count);
    let m = mean.data();
    let sq = group_sum(
        xs.iter()
            .map(|x| {
                channel_sums(x, c, |i, ch| {
                    let d = x.data()[i] - m[ch];
                    d * d
                })
            })
            .collect(),
    )?;
    let var = sq.map(|s| s / count);

    let istd = inv_std(&var, state.eps);
    let (g, b) = (state.gamma.data(), state.beta.data());
    let ys = xs
        .iter()
        .map(|x| {
            let mut y = x.clone();
            for row in y.data_mut().chunks_mut(c) {
                for (ch, v) in row.iter_mut().enumerate() {
                    *v = g[ch] * ((*v - m[ch]) * istd[ch]) + b[ch];
                }
            }
            y
        })
        .collect();

    let bn_batch_size = xs[0].shape()[0] * xs.len();
    Ok(GroupBnForward {
        ys,
        mean,
        var,
        bn_batch_size,
    })
}

/// Exact gradients of [`group_bn_forward`], treating the shared statistics as
/// functions of every input in the group.
pub fn group_bn_backward<T: Real>(
    xs: &[Tensor<T>],
    grad_ys: &[Tensor<T>],
    mean: &Tensor<T>,
    var: &Tensor<T>,
    state: &BnState<T>,
) -> Result<GroupBnBackward<T>> {
    let (rows, c) = group_geometry(xs, state.channels())?;
    if grad_ys.len() != xs.len() {
        return Err(Error::Precondition(format!(
            "{} inputs but {} upstream gradients",
            xs.len(),
            grad_ys.len()
        )));
    }
    for (x, gy) in xs.iter().zip(grad_ys) {
        x.same_shape("group_bn_backward", gy)?;
    }
    if mean.shape() != [c] || var.shape() != [c] {
        return Err(Error::Dimension {
            op: "group_bn_backward stats",
            lhs: mean.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let count = T::from_usize(rows * xs.len());
    let m = mean.data();
    let istd = inv_std(var, state.eps);

    let grad_beta = group_sum(
        grad_ys
            .iter()
            .map(|gy| channel_sums(gy, c, |i, _| gy.data()[i]))
            .collect(),
    )?;
    let grad_gamma = group_sum(
        xs.iter()
            .zip(grad_ys)
            .map(|(x, gy)| {
                let (x, gy) = (x.data(), gy.data());
                channel_sums_of(xs[0].shape()[0], x.len(), c, |i, ch| {
                    gy[i] * ((x[i] - m[ch]) * istd[ch])
                })
            })
            .collect(),
    )?;

    let (gb, gg, gamma) = (grad_beta.data(), grad_gamma.data(), state.gamma.data());
    let grad_xs = xs
        .iter()
        .zip(grad_ys)
        .map(|(x, gy)| {
            let mut gx = gy.clone();
            for (gxr, xr) in gx.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                for ch in 0..c {
                    let xhat = (xr[ch] - m[ch]) * istd[ch];
                    gxr[ch] = gamma[ch]
                        * istd[ch]
                        * (gxr[ch] - gb[ch] / count - xhat * gg[ch] / count);
                }
            }
            gx
        })
        .collect();

    Ok(GroupBnBackward {
        grad_xs,
        grad_gamma,
        grad_beta,
    })
}

/// `moving ← momentum · moving + (1 − momentum) · saved`.
pub fn update_moving_stats<T: Real>(
    state: &BnState<T>,
    saved_mean: &Tensor<T>,
    saved_var: &Tensor<T>,
) -> Result<BnState<T>> {
    state.moving_mean.same_shape("update_moving_stats", saved_mean)?;
    state.moving_var.same_shape("update_moving_stats", saved_var)?;
    let mo = T::from_f64(state.momentum);
    let keep = T::from_f64(1.0 - state.momentum);
    let blend = |moving: &Tensor<T>, saved: &Tensor<T>| {
        moving
            .zip_map(saved, |a, s| mo * a + keep * s)
            .expect("shapes checked")
    };
    Ok(BnState {
        moving_mean: blend(&state.moving_mean, saved_mean),
        moving_var: blend(&state.moving_var, saved_var),
        ..state.clone()
    })
}

/// Inference-mode normalization with the moving statistics.
pub fn bn_inference<T: Real>(x: &Tensor<T>, state: &BnState<T>) -> Result<Tensor<T>> {
    let (_, c) = group_geometry(std::slice::from_ref(x), state.channels())?;
    let istd = inv_std(&state.moving_var, state.eps);
    let (g, b, m) = (
        state.gamma.data(),
        state.beta.data(),
        state.moving_mean.data(),
    );
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = g[ch] * ((*v - m[ch]) * istd[ch]) + b[ch];
        }
    }
    Ok(y)
}
