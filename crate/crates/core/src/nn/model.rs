//! Layer pipelines, parameters, and the lockstep multi-replica forward and
//! backward passes.
//!
//! A [`Network`] is a shape-checked list of [`LayerSpec`]s ending in a softmax
//! cross-entropy head. Training passes run every replica one layer at a time
//! so batch-normalization layers can pool statistics across a BN group.

use std::collections::HashSet;
use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collectives::{self, GroupAssignment, ReduceOp, Scope};
use crate::distbn::{self, BnState};
use crate::error::{Error, Result};
use crate::nn::layers::{self, Padding};
use crate::precision::{self, PrecisionPolicy};
use crate::real::Real;
use crate::rng;
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel_hw: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        kernel_hw: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    /// Flattens everything after the batch axis.
    Dense {
        out_features: usize,
    },
    BatchNorm,
    Swish,
    Relu,
    GlobalAvgPool,
    SoftmaxXentHead {
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: &str, out_channels: usize, k: usize, stride: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                out_channels,
                kernel_hw: (k, k),
                stride,
                padding: Padding::Same,
            },
        )
    }

    pub fn depthwise(name: &str, k: usize, stride: usize) -> Self {
        Self::new(
            name,
            LayerKind::DepthwiseConv2d {
                kernel_hw: (k, k),
                stride,
                padding: Padding::Same,
            },
        )
    }

    pub fn dense(name: &str, out_features: usize) -> Self {
        Self::new(name, LayerKind::Dense { out_features })
    }

    pub fn batchnorm(name: &str) -> Self {
        Self::new(name, LayerKind::BatchNorm)
    }

    pub fn swish(name: &str) -> Self {
        Self::new(name, LayerKind::Swish)
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn pool(name: &str) -> Self {
        Self::new(name, LayerKind::GlobalAvgPool)
    }

    pub fn head(name: &str, num_classes: usize) -> Self {
        Self::new(name, LayerKind::SoftmaxXentHead { num_classes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Kernel,
    Bias,
    BnGamma,
    BnBeta,
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamTag::Kernel => "kernel",
            ParamTag::Bias => "bias",
            ParamTag::BnGamma => "bn_gamma",
            ParamTag::BnBeta => "bn_beta",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub tag: ParamTag,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, tag: ParamTag) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            tag,
        }
    }
}

/// Inference statistics of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct BnStats<T = f32> {
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
}

/// Everything one replica holds: trainable parameters and BN moving stats.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub params: Vec<Parameter<T>>,
    pub bn: Vec<BnStats<T>>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct WeightsFile<T> {
    params: Vec<(String, ParamTag, Tensor<T>)>,
    bn: Vec<BnStats<T>>,
    bn_momentum: f64,
    bn_eps: f64,
}

impl<T: Real> ModelState<T> {
    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    tag: p.tag,
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BnStats {
                    moving_mean: s.moving_mean.cast(),
                    moving_var: s.moving_var.cast(),
                })
                .collect(),
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    /// Bitwise comparison of parameter values and BN statistics.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
            && self.bn.len() == other.bn.len()
            && self.bn.iter().zip(&other.bn).all(|(a, b)| {
                a.moving_mean.bitwise_eq(&b.moving_mean) && a.moving_var.bitwise_eq(&b.moving_var)
            })
    }
}

impl<T: Real + Serialize + for<'de> Deserialize<'de>> ModelState<T> {
    pub fn to_json(&self) -> String {
        let file = WeightsFile {
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tag, p.value.clone()))
                .collect(),
            bn: self.bn.clone(),
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        };
        serde_json::to_string(&file).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile<T> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("weights file: {e}")))?;
        Ok(ModelState {
            params: file
                .params
                .into_iter()
                .map(|(name, tag, value)| Parameter::new(name, value, tag))
                .collect(),
            bn: file.bn,
            bn_momentum: file.bn_momentum,
            bn_eps: file.bn_eps,
        })
    }
}

#[derive(Debug, Clone)]
struct LayerPlan {
    /// Per-sample input shape.
    in_shape: Vec<usize>,
    params: Vec<usize>,
    bn_index: Option<usize>,
}

/// A validated layer pipeline over per-sample inputs of shape `[H, W, C]`.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    plan: Vec<LayerPlan>,
    param_specs: Vec<(String, Vec<usize>, ParamTag, usize)>,
    num_classes: usize,
}

fn shape_err(layer: &LayerSpec, msg: impl fmt::Display) -> Error {
    Error::Shape(format!("layer {:?}: {msg}", layer.name))
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>, input_shape: [usize; 3]) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("input shape {input_shape:?} has a zero extent")));
        }
        let mut names = HashSet::new();
        for l in &layers {
            if l.name.is_empty() || !names.insert(l.name.as_str()) {
                return Err(Error::Config(format!("layer name {:?} is empty or repeated", l.name)));
            }
        }
        let mut shape = input_shape.to_vec();
        let mut plan = Vec::with_capacity(layers.len());
        let mut param_specs = Vec::new();
        let mut bn_count = 0;
        let mut num_classes = None;
        for (i, layer) in layers.iter().enumerate() {
            if num_classes.is_some() {
                return Err(shape_err(layer, "layers after the softmax head"));
            }
            let in_shape = shape.clone();
            let mut params = Vec::new();
            let mut add = |suffix: &str, pshape: Vec<usize>, tag, fan_in| {
                params.push(param_specs.len());
                param_specs.push((format!("{}/{suffix}", layer.name), pshape, tag, fan_in));
            };
            let mut bn_index = None;
            shape = match &layer.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel_hw,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = spatial(layer, &shape)?;
                    if *out_channels == 0 {
                        return Err(shape_err(layer, "zero output channels"));
                    }
                    let (ho, wo) =
                        layers::conv_output_hw(h, w, *kernel_hw, *stride, *padding)
                            .map_err(|e| shape_err(layer, e))?;
                    add(
                        "kernel",
                        vec![kernel_hw.0, kernel_hw.1, c, *out_channels],
                        ParamTag::Kernel,
                        kernel_hw.0 * kernel_hw.1 * c,
                    );
                    vec![ho, wo, *out_channels]
                }
                LayerKind::DepthwiseConv2d {
                    kernel_hw,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = spatial(layer, &shape)?;
                    let (ho, wo) =
                        layers::conv_output_hw(h, w, *kernel_hw, *stride, *padding)
                            .map_err(|e| shape_err(layer, e))?;
                    add(
                        "kernel",
                        vec![kernel_hw.0, kernel_hw.1, c],
                        ParamTag::Kernel,
                        kernel_hw.0 * kernel_hw.1,
                    );
                    vec![ho, wo, c]
                }
                LayerKind::Dense { out_features } => {
                    if *out_features == 0 {
                        return Err(shape_err(layer, "zero output features"));
                    }
                    let f: usize = shape.iter().product();
                    add("kernel", vec![f, *out_features], ParamTag::Kernel, f);
                    add("bias", vec![*out_features], ParamTag::Bias, 0);
                    vec![*out_features]
                }
                LayerKind::BatchNorm => {
                    let c = *shape.last().unwrap();
                    add("gamma", vec![c], ParamTag::BnGamma, 0);
                    add("beta", vec![c], ParamTag::BnBeta, 0);
                    bn_index = Some(bn_count);
                    bn_count += 1;
                    shape.clone()
                }
                LayerKind::Swish | LayerKind::Relu => shape.clone(),
                LayerKind::GlobalAvgPool => {
                    let [_, _, c] = spatial(layer, &shape)?;
                    vec![c]
                }
                LayerKind::SoftmaxXentHead { num_classes: k } => {
                    if shape != [*k] {
                        return Err(shape_err(
                            layer,
                            format!("head over {k} classes fed with per-sample shape {shape:?}"),
                        ));
                    }
                    num_classes = Some(*k);
                    shape.clone()
                }
            };
            plan.push(LayerPlan {
                in_shape,
                params,
                bn_index,
            });
            debug_assert_eq!(plan.len(), i + 1);
        }
        let Some(num_classes) = num_classes else {
            return Err(Error::Shape("network must end with a softmax_xent head".into()));
        };
        Ok(Network {
            layers,
            input_shape,
            plan,
            param_specs,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_bn_layers(&self) -> usize {
        self.plan.iter().filter(|p| p.bn_index.is_some()).count()
    }

    pub fn num_parameters(&self) -> usize {
        self.param_specs
            .iter()
            .map(|(_, s, _, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Kernels: truncated normal (±2σ) with σ = √(2 / fan_in); biases and BN
    /// beta zero; BN gamma one. Each parameter draws from the stream keyed by
    /// `(seed, name)`.
    pub fn init<T: Real>(&self, seed: u64, bn_momentum: f64, bn_eps: f64) -> Result<ModelState<T>> {
        let params = self
            .param_specs
            .iter()
            .map(|(name, shape, tag, fan_in)| {
                let value = match tag {
                    ParamTag::Kernel => {
                        let sd = (2.0 / *fan_in as f64).sqrt();
                        let mut r = rng::stream(seed, name, 0);
                        Tensor::from_fn(shape, |_| loop {
                            let z: f64 = StandardNormal.sample(&mut r);
                            if z.abs() <= 2.0 {
                                break T::from_f64(z * sd);
                            }
                        })
                    }
                    ParamTag::Bias | ParamTag::BnBeta => Tensor::zeros(shape),
                    ParamTag::BnGamma => Tensor::full(shape, T::one()),
                };
                Parameter::new(name.clone(), value, *tag)
            })
            .collect();
        let bn = self
            .plan
            .iter()
            .filter(|p| p.bn_index.is_some())
            .map(|p| {
                let st = BnState::<T>::new(*p.in_shape.last().unwrap(), bn_momentum, bn_eps)?;
                Ok(BnStats {
                    moving_mean: st.moving_mean,
                    moving_var: st.moving_var,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelState {
            params,
            bn,
            bn_momentum,
            bn_eps,
        })
    }

    /// Checks that `state` was built for this network.
    pub fn check_state<T: Real>(&self, state: &ModelState<T>) -> Result<()> {
        if state.params.len() != self.param_specs.len() || state.bn.len() != self.num_bn_layers() {
            return Err(Error::Shape(format!(
                "state has {} params / {} bn layers, network expects {} / {}",
                state.params.len(),
                state.bn.len(),
                self.param_specs.len(),
                self.num_bn_layers()
            )));
        }
        for (p, (name, shape, tag, _)) in state.params.iter().zip(&self.param_specs) {
            if &p.name != name || p.value.shape() != shape.as_slice() || p.tag != *tag {
                return Err(Error::Shape(format!(
                    "parameter {:?} {:?} does not match expected {name:?} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.input_shape);
        s
    }

    fn bn_state<T: Real>(&self, state: &ModelState<T>, layer: usize) -> BnState<T> {
        let plan = &self.plan[layer];
        let stats = &state.bn[plan.bn_index.expect("bn layer")];
        BnState {
            gamma: state.params[plan.params[0]].value.clone(),
            beta: state.params[plan.params[1]].value.clone(),
            moving_mean: stats.moving_mean.clone(),
            moving_var: stats.moving_var.clone(),
            momentum: state.bn_momentum,
            eps: state.bn_eps,
        }
    }

    /// Forward of a parameterized or elementwise layer on one replica.
    fn forward_local<T: Real>(
        &self,
        layer: usize,
        state: &ModelState<T>,
        x: &Tensor<T>,
        policy: PrecisionPolicy,
    ) -> Result<Tensor<T>> {
        let plan = &self.plan[layer];
        let p = |i: usize| &state.params[plan.params[i]].value;
        match &self.layers[layer].kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => precision::conv2d_mixed(x, p(0), *stride, *padding, policy),
            LayerKind::DepthwiseConv2d {
                stride, padding, ..
            } => precision::depthwise_mixed(x, p(0), *stride, *padding, policy),
            LayerKind::Dense { .. } => layers::dense_forward(x, p(0), p(1)),
            LayerKind::Swish => Ok(layers::swish_forward(x)),
            LayerKind::Relu => Ok(layers::relu_forward(x)),
            LayerKind::GlobalAvgPool => layers::global_avg_pool_forward(x),
            LayerKind::BatchNorm | LayerKind::SoftmaxXentHead { .. } => {
                unreachable!("handled by the caller")
            }
        }
    }

    /// Backward of a local layer: gradient w.r.t. its input plus parameter
    /// gradients as `(param index, grad)`.
    #[allow(clippy::type_complexity)]
    fn backward_local<T: Real>(
        &self,
        layer: usize,
        state: &ModelState<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        policy: PrecisionPolicy,
    ) -> Result<(Tensor<T>, Vec<(usize, Tensor<T>)>)> {
        let plan = &self.plan[layer];
        let p = |i: usize| &state.params[plan.params[i]].value;
        Ok(match &self.layers[layer].kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let (gx, gk) =
                    precision::conv2d_mixed_backward(x, p(0), gy, *stride, *padding, policy)?;
                (gx, vec![(plan.params[0], gk)])
            }
            LayerKind::DepthwiseConv2d {
                stride, padding, ..
            } => {
                let (gx, gk) =
                    precision::depthwise_mixed_backward(x, p(0), gy, *stride, *padding, policy)?;
                (gx, vec![(plan.params[0], gk)])
            }
            LayerKind::Dense { .. } => {
                let (gx, gk, gb) = layers::dense_backward(x, p(0), gy)?;
                (gx, vec![(plan.params[0], gk), (plan.params[1], gb)])
            }
            LayerKind::Swish => (layers::swish_backward(x, gy)?, vec![]),
            LayerKind::Relu => (layers::relu_backward(x, gy)?, vec![]),
            LayerKind::GlobalAvgPool => (layers::global_avg_pool_backward(x.shape(), gy)?, vec![]),
            LayerKind::BatchNorm | LayerKind::SoftmaxXentHead { .. } => {
                unreachable!("handled by the caller")
            }
        })
    }

    /// Training-mode forward of every replica in lockstep. BN layers normalize
    /// with statistics pooled over each replica's group.
    pub fn forward_train<T: Real>(
        &self,
        replicas: &[ModelState<T>],
        inputs: &[Tensor<T>],
        labels: &[&[usize]],
        groups: &GroupAssignment,
        policy: PrecisionPolicy,
    ) -> Result<TrainPass<T>> {
        let n = replicas.len();
        if n == 0 || inputs.len() != n || labels.len() != n || groups.num_replicas() != n {
            return Err(Error::Precondition(format!(
                "{n} replicas, {} inputs, {} label sets, assignment over {}",
                inputs.len(),
                labels.len(),
                groups.num_replicas()
            )));
        }
        for (x, l) in inputs.iter().zip(labels) {
            let b = x.shape().first().copied().unwrap_or(0);
            if x.shape() != self.batch_shape(b) || l.len() != b {
                return Err(Error::Dimension {
                    op: "forward_train input",
                    lhs: x.shape().to_vec(),
                    rhs: self.batch_shape(l.len()),
                });
            }
        }

        let mut acts: Vec<Tensor<T>> = inputs.to_vec();
        let mut layer_inputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut bn_saved = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::SoftmaxXentHead { .. } => {
                    let heads = acts
                        .par_iter()
                        .zip(labels.par_iter())
                        .map(|(logits, lab)| layers::softmax_xent(logits, lab))
                        .collect::<Result<Vec<_>>>()?;
                    let (losses, grad_logits) = heads.into_iter().unzip();
                    return Ok(TrainPass {
                        layer_inputs,
                        logits: acts,
                        losses,
                        grad_logits,
                        bn_saved,
                    });
                }
                LayerKind::BatchNorm => {
                    let mut next = acts.clone();
                    let mut saved = Vec::with_capacity(groups.num_groups());
                    let outs = groups
                        .groups()
                        .collect::<Vec<_>>()
                        .par_iter()
                        .map(|members| {
                            let xs: Vec<_> = members.iter().map(|&r| acts[r].clone()).collect();
                            let st = self.bn_state(&replicas[members[0]], l);
                            distbn::group_bn_forward(&xs, &st)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for (members, out) in groups.groups().zip(outs) {
                        for (&r, y) in members.iter().zip(out.ys) {
                            next[r] = y;
                        }
                        saved.push((out.mean, out.var));
                    }
                    bn_saved.push(saved);
                    layer_inputs.push(std::mem::replace(&mut acts, next));
                }
                _ => {
                    let next = acts
                        .par_iter()
                        .zip(replicas.par_iter())
                        .map(|(x, st)| self.forward_local(l, st, x, policy))
                        .collect::<Result<Vec<_>>>()?;
                    layer_inputs.push(std::mem::replace(&mut acts, next));
                }
            }
        }
        unreachable!("validated networks end with a head")
    }

    /// Writes each replica's local parameter gradients into `Parameter::grad`.
    ///
    /// Local gradients are w.r.t. the replica's own mean loss, except that
    /// gradients flowing through shared BN statistics include the terms from
    /// the whole group; BN gamma/beta receive the group sum divided by `G`.
    /// The mean of the local gradients over all replicas is therefore the
    /// gradient of the mean replica loss.
    pub fn backward_train<T: Real>(
        &self,
        replicas: &mut [ModelState<T>],
        pass: &TrainPass<T>,
        groups: &GroupAssignment,
        policy: PrecisionPolicy,
    ) -> Result<()> {
        let mut grads = pass.grad_logits.clone();
        let mut bn_i = pass.bn_saved.len();
        for l in (0..self.layers.len() - 1).rev() {
            let xs = &pass.layer_inputs[l];
            if matches!(self.layers[l].kind, LayerKind::BatchNorm) {
                bn_i -= 1;
                let plan = &self.plan[l];
                let g = T::from_usize(groups.group_size());
                let mut next = grads.clone();
                let outs = groups
                    .groups()
                    .enumerate()
                    .collect::<Vec<_>>()
                    .par_iter()
                    .map(|(gi, members)| {
                        let gx: Vec<_> = members.iter().map(|&r| xs[r].clone()).collect();
                        let gy: Vec<_> = members.iter().map(|&r| grads[r].clone()).collect();
                        let (mean, var) = &pass.bn_saved[bn_i][*gi];
                        let st = self.bn_state(&replicas[members[0]], l);
                        distbn::group_bn_backward(&gx, &gy, mean, var, &st)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (members, out) in groups.groups().zip(outs) {
                    let gamma = out.grad_gamma.map(|v| v / g);
                    let beta = out.grad_beta.map(|v| v / g);
                    for (&r, gx) in members.iter().zip(out.grad_xs) {
                        next[r] = gx;
                        replicas[r].params[plan.params[0]].grad = gamma.clone();
                        replicas[r].params[plan.params[1]].grad = beta.clone();
                    }
                }
                grads = next;
            } else {
                let outs = xs
                    .par_iter()
                    .zip(grads.par_iter())
                    .zip(replicas.par_iter())
                    .map(|((x, gy), st)| self.backward_local(l, st, x, gy, policy))
                    .collect::<Result<Vec<_>>>()?;
                grads = Vec::with_capacity(outs.len());
                for (st, (gx, pgrads)) in replicas.iter_mut().zip(outs) {
                    for (i, g) in pgrads {
                        st.params[i].grad = g;
                    }
                    grads.push(gx);
                }
            }
        }
        Ok(())
    }

    /// Averages each BN layer's group statistics over all replicas and folds
    /// them into every replica's moving statistics.
    pub fn sync_moving_stats<T: Real>(
        &self,
        replicas: &mut [ModelState<T>],
        pass: &TrainPass<T>,
        groups: &GroupAssignment,
    ) -> Result<()> {
        for (bn_i, saved) in pass.bn_saved.iter().enumerate() {
            let per_replica = |pick: fn(&(Tensor<T>, Tensor<T>)) -> &Tensor<T>| {
                (0..replicas.len())
                    .map(|r| pick(&saved[groups.group_of(r)]).clone())
                    .collect::<Vec<_>>()
            };
            let mean = collectives::all_reduce(&per_replica(|s| &s.0), ReduceOp::Mean, Scope::All)?;
            let var = collectives::all_reduce(&per_replica(|s| &s.1), ReduceOp::Mean, Scope::All)?;
            let layer = self
                .plan
                .iter()
                .position(|p| p.bn_index == Some(bn_i))
                .expect("bn layer exists");
            for (r, st) in replicas.iter_mut().enumerate() {
                let bn = distbn::update_moving_stats(&self.bn_state(st, layer), &mean[r], &var[r])?;
                st.bn[bn_i] = BnStats {
                    moving_mean: bn.moving_mean,
                    moving_var: bn.moving_var,
                };
            }
        }
        Ok(())
    }

    /// Inference-mode logits for one replica (BN uses moving statistics).
    pub fn forward_eval<T: Real>(
        &self,
        state: &ModelState<T>,
        input: &Tensor<T>,
        policy: PrecisionPolicy,
    ) -> Result<Tensor<T>> {
        let b = input.shape().first().copied().unwrap_or(0);
        if input.shape() != self.batch_shape(b) {
            return Err(Error::Dimension {
                op: "forward_eval input",
                lhs: input.shape().to_vec(),
                rhs: self.batch_shape(b),
            });
        }
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            x = match &layer.kind {
                LayerKind::SoftmaxXentHead { .. } => return Ok(x),
                LayerKind::BatchNorm => distbn::bn_inference(&x, &self.bn_state(state, l))?,
                _ => self.forward_local(l, state, &x, policy)?,
            };
        }
        Ok(x)
    }

    /// Mean training loss over replicas, without keeping activations.
    pub fn replicated_loss<T: Real>(
        &self,
        replicas: &[ModelState<T>],
        inputs: &[Tensor<T>],
        labels: &[&[usize]],
        groups: &GroupAssignment,
        policy: PrecisionPolicy,
    ) -> Result<T> {
        let pass = self.forward_train(replicas, inputs, labels, groups, policy)?;
        Ok(pass.mean_loss())
    }
}

fn spatial(layer: &LayerSpec, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[h, w, c] => Ok([h, w, c]),
        other => Err(shape_err(layer, format!("expects an HWC input, got {other:?}"))),
    }
}

/// Activations saved by [`Network::forward_train`].
#[derive(Debug, Clone)]
pub struct TrainPass<T = f32> {
    /// `[layer][replica]` inputs of every non-head layer.
    layer_inputs: Vec<Vec<Tensor<T>>>,
    pub logits: Vec<Tensor<T>>,
    pub losses: Vec<T>,
    grad_logits: Vec<Tensor<T>>,
    /// `[bn layer][group]` shared (mean, var).
    bn_saved: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> TrainPass<T> {
    /// Mean of the per-replica losses, reduced pairwise in replica order.
    pub fn mean_loss(&self) -> T {
        let parts: Vec<[T; 1]> = self.losses.iter().map(|&l| [l]).collect();
        pairwise_sum(&parts)[0] / T::from_usize(self.losses.len())
    }

    /// Group statistics of BN layer `bn_layer` for group `group`.
    pub fn bn_stats(&self, bn_layer: usize, group: usize) -> (&Tensor<T>, &Tensor<T>) {
        let (m, v) = &self.bn_saved[bn_layer][group];
        (m, v)
    }
}
