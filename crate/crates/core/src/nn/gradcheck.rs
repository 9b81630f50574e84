//! Central-difference gradient checking of whole networks.

use crate::collectives::{self, GroupAssignment, ReduceOp, Scope};
use crate::error::{Error, Result};
use crate::nn::model::{ModelState, Network};
use crate::precision::PrecisionPolicy;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over elements of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Single-device gradient check: one replica, BN over its own batch.
pub fn grad_check<T: Real>(
    net: &Network,
    state: &ModelState<T>,
    input: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check_replicated(
        net,
        state,
        std::slice::from_ref(input),
        &[labels],
        &GroupAssignment::singletons(1),
        PrecisionPolicy::Fp32Only,
        eps,
    )
}

/// Gradient check of the data-parallel objective: the mean of per-replica
/// losses, with BN statistics pooled per group. The analytic side is the
/// all-reduced mean of the replicas' local gradients.
pub fn grad_check_replicated<T: Real>(
    net: &Network,
    state: &ModelState<T>,
    inputs: &[Tensor<T>],
    labels: &[&[usize]],
    groups: &GroupAssignment,
    policy: PrecisionPolicy,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("gradcheck eps must be > 0, got {eps}")));
    }
    net.check_state(state)?;
    let n = inputs.len();
    let mut replicas = vec![state.clone(); n];
    let pass = net.forward_train(&replicas, inputs, labels, groups, policy)?;
    let base = pass.mean_loss();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    net.backward_train(&mut replicas, &pass, groups, policy)?;

    let loss_with = |pi: usize, i: usize, delta: f64| -> Result<f64> {
        let mut perturbed = state.clone();
        let v = &mut perturbed.params[pi].value.data_mut()[i];
        *v = T::from_f64(v.as_f64() + delta);
        let reps = vec![perturbed; n];
        let loss = net.replicated_loss(&reps, inputs, labels, groups, policy)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss {loss}")));
        }
        Ok(loss.as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for pi in 0..state.params.len() {
        let local: Vec<Tensor<T>> = replicas.iter().map(|r| r.params[pi].grad.clone()).collect();
        let analytic = collectives::all_reduce(&local, ReduceOp::Mean, Scope::All)?.swap_remove(0);
        for i in 0..analytic.len() {
            let numeric = (loss_with(pi, i, eps)? - loss_with(pi, i, -eps)?) / (2.0 * eps);
            let a = analytic.data()[i].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst_param = state.params[pi].name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
