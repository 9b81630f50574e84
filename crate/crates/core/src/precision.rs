//! bfloat16 emulation and the mixed-precision convolution policy.
//!
//! Values stay in fp32 storage but are rounded to the nearest bfloat16 value
//! (8-bit exponent, 7 stored mantissa bits) before entering a convolution.
//! Accumulation, and every non-convolution op, stays in the full precision
//! of the tensor element type.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::layers::{self, Padding};
use crate::real::Real;
use crate::tensor::Tensor;

/// Rounds `x` to the nearest bfloat16-representable value, ties to even.
///
/// NaN payloads are truncated (quieted only if truncation would leave an
/// infinity); infinities pass through; finite values beyond the bf16 range
/// round to infinity like the hardware conversion.
pub fn to_bf16(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        let high = bits & 0xFFFF_0000;
        let quiet = if high & 0x007F_0000 == 0 { 0x0040_0000 } else { 0 };
        return f32::from_bits(high | quiet);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    f32::from_bits(rounded & 0xFFFF_0000)
}

/// Rounds every element of `t` through bfloat16.
pub fn round_tensor_bf16<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| x.round_bf16())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrecisionPolicy {
    Fp32Only,
    #[default]
    MixedBf16Conv,
}

impl PrecisionPolicy {
    fn round<T: Real>(self, t: &Tensor<T>) -> Option<Tensor<T>> {
        match self {
            PrecisionPolicy::Fp32Only => None,
            PrecisionPolicy::MixedBf16Conv => Some(round_tensor_bf16(t)),
        }
    }
}

impl fmt::Display for PrecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecisionPolicy::Fp32Only => "fp32",
            PrecisionPolicy::MixedBf16Conv => "mixed_bf16",
        })
    }
}

impl FromStr for PrecisionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" | "fp32_only" => Ok(PrecisionPolicy::Fp32Only),
            "mixed_bf16" | "mixed_bf16_conv" => Ok(PrecisionPolicy::MixedBf16Conv),
            other => Err(Error::Config(format!(
                "precision must be fp32 or mixed_bf16, got {other:?}"
            ))),
        }
    }
}

/// Convolution under `policy`: bf16-rounded operands with full-precision
/// accumulation, or the plain kernel for `Fp32Only`.
pub fn conv2d_mixed<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    policy: PrecisionPolicy,
) -> Result<Tensor<T>> {
    match (policy.round(input), policy.round(kernel)) {
        (Some(x), Some(k)) => layers::conv2d_forward(&x, &k, stride, padding),
        _ => layers::conv2d_forward(input, kernel, stride, padding),
    }
}

/// Backward of [`conv2d_mixed`]. Under the mixed policy every operand of the
/// two backward convolutions (input, kernel, upstream gradient) is rounded.
pub fn conv2d_mixed_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    policy: PrecisionPolicy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match policy {
        PrecisionPolicy::Fp32Only => {
            layers::conv2d_backward(input, kernel, grad_out, stride, padding)
        }
        PrecisionPolicy::MixedBf16Conv => layers::conv2d_backward(
            &round_tensor_bf16(input),
            &round_tensor_bf16(kernel),
            &round_tensor_bf16(grad_out),
            stride,
            padding,
        ),
    }
}

pub fn depthwise_mixed<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    policy: PrecisionPolicy,
) -> Result<Tensor<T>> {
    match (policy.round(input), policy.round(kernel)) {
        (Some(x), Some(k)) => layers::depthwise_conv2d_forward(&x, &k, stride, padding),
        _ => layers::depthwise_conv2d_forward(input, kernel, stride, padding),
    }
}

pub fn depthwise_mixed_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    policy: PrecisionPolicy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match policy {
        PrecisionPolicy::Fp32Only => {
            layers::depthwise_conv2d_backward(input, kernel, grad_out, stride, padding)
        }
        PrecisionPolicy::MixedBf16Conv => layers::depthwise_conv2d_backward(
            &round_tensor_bf16(input),
            &round_tensor_bf16(kernel),
            &round_tensor_bf16(grad_out),
            stride,
            padding,
        ),
    }
}
