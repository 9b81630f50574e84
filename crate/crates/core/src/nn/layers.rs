//! Forward and backward kernels for the layer vocabulary.
//!
//! Image tensors are NHWC. Convolution kernels are `[kh, kw, C, Co]`,
//! depthwise kernels `[kh, kw, C]`. Every reduction runs in a fixed,
//! documented order so results are bit-reproducible. Sums over the batch
//! dimension reduce per-example partials with [`pairwise_sum`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{matmul, pairwise_sum, transpose, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if input < k {
                (0, 0)
            } else {
                ((input - k) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    pad_l: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(
        input: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::Shape(format!("conv input must be NHWC, got {input:?}")));
        }
        if stride == 0 {
            return Err(Error::Precondition("conv stride must be >= 1".into()));
        }
        let (ho, pad_t) = out_extent(input[1], kh, stride, padding);
        let (wo, pad_l) = out_extent(input[2], kw, stride, padding);
        if ho == 0 || wo == 0 {
            return Err(Error::Shape(format!(
                "conv of {input:?} with {kh}x{kw} kernel ({padding:?}) has zero-size output"
            )));
        }
        Ok(ConvGeom {
            n: input[0],
            h: input[1],
            w: input[2],
            c: input[3],
            kh,
            kw,
            ho,
            wo,
            pad_t,
            pad_l,
            stride,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < limit)
    }
}

/// Spatial output shape of a convolution, for shape checking without data.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kernel_hw: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let g = ConvGeom::new(&[1, h, w, 1], kernel_hw.0, kernel_hw.1, stride, padding)?;
    Ok((g.ho, g.wo))
}

/// Cross-correlation. Each output sums over (kh, kw, C) in ascending order.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    if ks.len() != 4 || input.rank() != 4 || ks[2] != input.shape()[3] {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let g = ConvGeom::new(input.shape(), ks[0], ks[1], stride, padding)?;
    let co = ks[3];
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.n * g.ho * g.wo * co];
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let base = ((n * g.ho + oh) * g.wo + ow) * co;
                let acc = &mut out[base..base + co];
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, g.pad_t, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, g.pad_l, g.w) else { continue };
                        let xoff = ((n * g.h + ih) * g.w + iw) * g.c;
                        for c in 0..g.c {
                            let xv = x[xoff + c];
                            let koff = ((i * g.kw + j) * g.c + c) * co;
                            for (a, &kv) in acc.iter_mut().zip(&k[koff..koff + co]) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.ho, g.wo, co], out)
}

/// Exact gradients of [`conv2d_forward`] with respect to input and kernel.
///
/// Within an example both gradients accumulate over output positions in
/// (oh, ow) order; kernel partials are then reduced pairwise over examples.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ks = kernel.shape();
    if ks.len() != 4 || input.rank() != 4 || ks[2] != input.shape()[3] {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            lhs: input.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let g = ConvGeom::new(input.shape(), ks[0], ks[1], stride, padding)?;
    let co = ks[3];
    let expected = [g.n, g.ho, g.wo, co];
    if grad_out.shape() != expected {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let x = input.data();
    let k = kernel.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut per_example = Vec::with_capacity(g.n);
    for n in 0..g.n {
        let mut gk = vec![T::zero(); k.len()];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let goff = ((n * g.ho + oh) * g.wo + ow) * co;
                let gvec = &gy[goff..goff + co];
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, g.pad_t, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, g.pad_l, g.w) else { continue };
                        let xoff = ((n * g.h + ih) * g.w + iw) * g.c;
                        for c in 0..g.c {
                            let koff = ((i * g.kw + j) * g.c + c) * co;
                            let xv = x[xoff + c];
                            let mut acc = T::zero();
                            for o in 0..co {
                                acc += k[koff + o] * gvec[o];
                                gk[koff + o] += xv * gvec[o];
                            }
                            gx[xoff + c] += acc;
                        }
                    }
                }
            }
        }
        per_example.push(gk);
    }
    let gk = pairwise_sum(&per_example);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(ks.to_vec(), gk)?,
    ))
}

/// Per-channel convolution with a `[kh, kw, C]` kernel.
pub fn depthwise_conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    if ks.len() != 3 || input.rank() != 4 || ks[2] != input.shape()[3] {
        return Err(Error::Dimension {
            op: "depthwise_conv2d",
            lhs: input.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let g = ConvGeom::new(input.shape(), ks[0], ks[1], stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.n * g.ho * g.wo * g.c];
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let base = ((n * g.ho + oh) * g.wo + ow) * g.c;
                let acc = &mut out[base..base + g.c];
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, g.pad_t, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, g.pad_l, g.w) else { continue };
                        let xoff = ((n * g.h + ih) * g.w + iw) * g.c;
                        let koff = (i * g.kw + j) * g.c;
                        for c in 0..g.c {
                            acc[c] += x[xoff + c] * k[koff + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.ho, g.wo, g.c], out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ks = kernel.shape();
    if ks.len() != 3 || input.rank() != 4 || ks[2] != input.shape()[3] {
        return Err(Error::Dimension {
            op: "depthwise_conv2d_backward",
            lhs: input.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let g = ConvGeom::new(input.shape(), ks[0], ks[1], stride, padding)?;
    let expected = [g.n, g.ho, g.wo, g.c];
    if grad_out.shape() != expected {
        return Err(Error::Dimension {
            op: "depthwise_conv2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let x = input.data();
    let k = kernel.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut per_example = Vec::with_capacity(g.n);
    for n in 0..g.n {
        let mut gk = vec![T::zero(); k.len()];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let goff = ((n * g.ho + oh) * g.wo + ow) * g.c;
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, g.pad_t, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, g.pad_l, g.w) else { continue };
                        let xoff = ((n * g.h + ih) * g.w + iw) * g.c;
                        let koff = (i * g.kw + j) * g.c;
                        for c in 0..g.c {
                            let gv = gy[goff + c];
                            gx[xoff + c] += k[koff + c] * gv;
                            gk[koff + c] += x[xoff + c] * gv;
                        }
                    }
                }
            }
        }
        per_example.push(gk);
    }
    let gk = pairwise_sum(&per_example);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(ks.to_vec(), gk)?,
    ))
}

fn flatten_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let f = x.len() / n;
    x.clone().reshape(&[n, f])
}

/// Fully connected layer; trailing input dims are flattened.
/// `kernel` is `[features, out]`, `bias` is `[out]`.
pub fn dense_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let x = flatten_rows(input)?;
    let mut y = matmul(&x, kernel)?;
    let out = kernel.shape()[1];
    if bias.shape() != [out] {
        return Err(Error::Dimension {
            op: "dense bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![out],
        });
    }
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Returns `(grad_input, grad_kernel, grad_bias)`; the kernel and bias
/// gradients reduce per-example outer products pairwise over rows.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let x = flatten_rows(input)?;
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let out = kernel.shape()[1];
    if kernel.shape()[0] != f || grad_out.shape() != [n, out] {
        return Err(Error::Dimension {
            op: "dense_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![n, out],
        });
    }
    let gx = matmul(grad_out, &transpose(kernel)?)?.reshape(input.shape())?;
    let rows: Vec<&[T]> = grad_out.data().chunks(out).collect();
    let outer: Vec<Vec<T>> = x
        .data()
        .chunks(f)
        .zip(&rows)
        .map(|(xr, gr)| {
            let mut o = Vec::with_capacity(f * out);
            for &xv in xr {
                o.extend(gr.iter().map(|&g| xv * g));
            }
            o
        })
        .collect();
    let gk = Tensor::new(vec![f, out], pairwise_sum(&outer))?;
    let gb = Tensor::new(vec![out], pairwise_sum(&rows))?;
    Ok((gx, gk, gb))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x · σ(x)`.
pub fn swish_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// `σ(x) · (1 + x · (1 − σ(x)))` times the upstream gradient.
pub fn swish_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| {
        let s = sigmoid(v);
        g * s * (T::one() + v * (T::one() - s))
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// `[N, H, W, C] → [N, C]` spatial mean.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "global_avg_pool expects NHWC, got {:?}",
            x.shape()
        )));
    }
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = T::from_usize(h * w);
    let mut out = vec![T::zero(); n * c];
    for (b, acc) in out.chunks_mut(c).enumerate() {
        for px in x.data()[b * h * w * c..(b + 1) * h * w * c].chunks(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= hw;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    if grad_out.shape() != [n, c] {
        return Err(Error::Dimension {
            op: "global_avg_pool_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![n, c],
        });
    }
    let hw = T::from_usize(h * w);
    let g = grad_out.data();
    Ok(Tensor::from_fn(input_shape, |i| {
        let b = i / (h * w * c);
        g[b * c + i % c] / hw
    }))
}

/// Mean softmax cross-entropy over the batch and its logit gradient
/// `(softmax − onehot) / N`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            op: "softmax_xent",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let inv_n = T::one() / T::from_usize(n);
    let mut losses = Vec::with_capacity(n);
    let mut grad = vec![T::zero(); n * k];
    for (i, row) in logits.data().chunks(k).enumerate() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        losses.push([lse - row[labels[i]]]);
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - m).exp() / z;
            let onehot = if j == labels[i] { T::one() } else { T::zero() };
            *gv = (p - onehot) * inv_n;
        }
    }
    let loss = pairwise_sum(&losses)[0];
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
