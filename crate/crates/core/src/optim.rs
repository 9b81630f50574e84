//! RMSProp and LARS.
//!
//! Both read gradients from [`Parameter::grad`] and keep per-parameter slots
//! keyed by parameter name, so visiting order never changes the result.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::nn::{ParamTag, Parameter};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            decay: 0.9,
            momentum: 0.9,
            eps: 1e-3,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.eps > 0.0)
        {
            return Err(Error::Precondition(format!(
                "rmsprop needs decay in (0,1), momentum in [0,1), eps > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LarsConfig {
    /// Trust coefficient η.
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Tags updated with plain momentum SGD: no trust ratio, no weight decay.
    pub exclude_tags: BTreeSet<ParamTag>,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig {
            eta: 0.001,
            momentum: 0.9,
            weight_decay: 1e-5,
            eps: 0.0,
            exclude_tags: [ParamTag::Bias, ParamTag::BnGamma, ParamTag::BnBeta]
                .into_iter()
                .collect(),
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || !(self.eps >= 0.0)
        {
            return Err(Error::Precondition(format!(
                "lars needs eta > 0, momentum in [0,1), weight_decay >= 0, eps >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerConfig {
    RmsProp(RmsPropConfig),
    Lars(LarsConfig),
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::RmsProp(_) => "rmsprop",
            OptimizerConfig::Lars(_) => "lars",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::RmsProp(c) => c.validate(),
            OptimizerConfig::Lars(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slots<T = f32> {
    /// RMSProp mean-square accumulator; absent for LARS.
    pub mean_square: Option<Tensor<T>>,
    pub momentum: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    slots: BTreeMap<String, Slots<T>>,
}

impl<T: Real> OptimizerState<T> {
    /// Zeroed slots for every parameter.
    pub fn new(config: &OptimizerConfig, params: &[Parameter<T>]) -> Self {
        let with_ms = matches!(config, OptimizerConfig::RmsProp(_));
        let slots = params
            .iter()
            .map(|p| {
                let z = Tensor::zeros(p.value.shape());
                (
                    p.name.clone(),
                    Slots {
                        mean_square: with_ms.then(|| z.clone()),
                        momentum: z,
                    },
                )
            })
            .collect();
        OptimizerState { slots }
    }

    pub fn slots(&self, name: &str) -> Option<&Slots<T>> {
        self.slots.get(name)
    }

    fn slots_for(&mut self, p: &Parameter<T>) -> Result<&mut Slots<T>> {
        let s = self
            .slots
            .get_mut(&p.name)
            .ok_or_else(|| Error::Precondition(format!("no optimizer slots for {:?}", p.name)))?;
        if s.momentum.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "optimizer step",
                lhs: p.value.shape().to_vec(),
                rhs: s.momentum.shape().to_vec(),
            });
        }
        Ok(s)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.momentum.bitwise_eq(&b.momentum)
                    && match (&a.mean_square, &b.mean_square) {
                        (Some(x), Some(y)) => x.bitwise_eq(y),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }
}

/// Per element: `acc ← ρ·acc + (1−ρ)·g²; mom ← m·mom + lr·g/√(acc+ε); w ← w − mom`.
pub fn rmsprop_step<T: Real>(
    params: &mut [Parameter<T>],
    lr: T,
    cfg: &RmsPropConfig,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let rho = T::from_f64(cfg.decay);
    let one_minus_rho = T::from_f64(1.0 - cfg.decay);
    let m = T::from_f64(cfg.momentum);
    let eps = T::from_f64(cfg.eps);
    for p in params.iter_mut() {
        let slots = state.slots_for(p)?;
        let acc = slots
            .mean_square
            .as_mut()
            .ok_or_else(|| Error::Precondition("optimizer state was built for LARS".into()))?;
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for (((w, &g), a), mo) in w
            .iter_mut()
            .zip(g)
            .zip(acc.data_mut())
            .zip(slots.momentum.data_mut())
        {
            *a = rho * *a + one_minus_rho * g * g;
            *mo = m * *mo + lr * g / (*a + eps).sqrt();
            *w -= *mo;
        }
    }
    Ok(())
}

/// `η·‖w‖ / (‖g‖ + λ·‖w‖ + ε)`, or 1 when `‖w‖ = 0` or the denominator
/// before ε vanishes.
pub fn lars_trust_ratio<T: Real>(w_norm: T, g_norm: T, cfg: &LarsConfig) -> T {
    let wd = T::from_f64(cfg.weight_decay);
    let denom = g_norm + wd * w_norm;
    if w_norm > T::zero() && denom > T::zero() {
        T::from_f64(cfg.eta) * w_norm / (denom + T::from_f64(cfg.eps))
    } else {
        T::one()
    }
}

/// Per parameter: `g' = g + λw` and `local_lr = lr · trust_ratio(‖w‖, ‖g‖)`
/// unless the tag is excluded (then `g' = g`, `local_lr = lr`);
/// `mom ← m·mom + local_lr·g'; w ← w − mom`.
pub fn lars_step<T: Real>(
    params: &mut [Parameter<T>],
    lr: T,
    cfg: &LarsConfig,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let m = T::from_f64(cfg.momentum);
    for p in params.iter_mut() {
        let excluded = cfg.exclude_tags.contains(&p.tag);
        let slots = state.slots_for(p)?;
        let (local_lr, wd) = if excluded {
            (lr, T::zero())
        } else {
            let ratio = lars_trust_ratio(p.value.l2_norm(), p.grad.l2_norm(), cfg);
            (lr * ratio, T::from_f64(cfg.weight_decay))
        };
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for ((w, &g), mo) in w.iter_mut().zip(g).zip(slots.momentum.data_mut()) {
            let gd = g + wd * *w;
            *mo = m * *mo + local_lr * gd;
            *w -= *mo;
        }
    }
    Ok(())
}

/// A configured optimizer together with its slot state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T = f32> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Parameter<T>]) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(&config, params);
        Ok(Optimizer { config, state })
    }

    pub fn step(&mut self, params: &mut [Parameter<T>], lr: T) -> Result<()> {
        match &self.config {
            OptimizerConfig::RmsProp(c) => rmsprop_step(params, lr, c, &mut self.state),
            OptimizerConfig::Lars(c) => lars_step(params, lr, c, &mut self.state),
        }
    }
}
