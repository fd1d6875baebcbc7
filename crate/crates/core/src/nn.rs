//! Batched kernels for network graphs: dense convolution, 2x2 max-pooling,
//! ReLU and softmax cross-entropy, each with its adjoint.
//!
//! Batched tensors are `(B, H, W, C)` for images and `(B, C)` for logits.

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{crop_spatial, pad_spatial, ConvSpec, DenseTensor};

fn conv_dims(x: &DenseTensor, k: &DenseTensor, stride: usize, pad: usize) -> Result<(ConvSpec, usize)> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || xs[3] != ks[2] {
        return Err(Error::shape(format!(
            "conv expects x (B,H,W,I) and k (D,D,I,O), got {xs:?} and {ks:?}"
        )));
    }
    let spec = ConvSpec {
        height: xs[1],
        width: xs[2],
        in_channels: xs[3],
        out_channels: ks[3],
        filter: ks[0],
        stride,
        padding: pad,
    };
    Ok((spec, xs[0]))
}

/// Batched direct convolution, `(B,H,W,I) * (D,D,I,O) -> (B,H',W',O)`.
///
/// Padded taps are multiplied like any other, so the MAC count is always
/// `B*H'*W'*D^2*I*O`.
pub fn conv2d_batch(x: &DenseTensor, k: &DenseTensor, stride: usize, pad: usize) -> Result<DenseTensor> {
    let (spec, b) = conv_dims(x, k, stride, pad)?;
    let (ho, wo) = spec.output_hw()?;
    let (d, ci, co) = (spec.filter, spec.in_channels, spec.out_channels);
    let xp = pad_spatial(x, pad);
    let (hp, wp) = (spec.height + 2 * pad, spec.width + 2 * pad);
    let (xd, kd) = (xp.data(), k.data());
    let mut out = vec![0.0; b * ho * wo * co];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = &mut out[((bi * ho + y) * wo + xx) * co..][..co];
                for d1 in 0..d {
                    for d2 in 0..d {
                        let src = ((bi * hp + y * stride + d1) * wp + xx * stride + d2) * ci;
                        for (i, &xv) in xd[src..src + ci].iter().enumerate() {
                            let krow = &kd[((d1 * d + d2) * ci + i) * co..][..co];
                            for (o, &kv) in dst.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    flops::add(b * ho * wo * d * d * ci * co);
    DenseTensor::new(vec![b, ho, wo, co], out)
}

/// Adjoints of [`conv2d_batch`] with respect to `x` and `k`.
pub fn conv2d_batch_backward(
    x: &DenseTensor,
    k: &DenseTensor,
    grad: &DenseTensor,
    stride: usize,
    pad: usize,
) -> Result<(DenseTensor, DenseTensor)> {
    let (spec, b) = conv_dims(x, k, stride, pad)?;
    let (ho, wo) = spec.output_hw()?;
    let (d, ci, co) = (spec.filter, spec.in_channels, spec.out_channels);
    if grad.shape() != [b, ho, wo, co] {
        return Err(Error::shape(format!("conv adjoint has shape {:?}", grad.shape())));
    }
    let xp = pad_spatial(x, pad);
    let (hp, wp) = (spec.height + 2 * pad, spec.width + 2 * pad);
    let (xd, kd, gd) = (xp.data(), k.data(), grad.data());
    let mut dx = vec![0.0; b * hp * wp * ci];
    let mut dk = vec![0.0; d * d * ci * co];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                let g = &gd[((bi * ho + y) * wo + xx) * co..][..co];
                for d1 in 0..d {
                    for d2 in 0..d {
                        let src = ((bi * hp + y * stride + d1) * wp + xx * stride + d2) * ci;
                        for i in 0..ci {
                            let kr = ((d1 * d + d2) * ci + i) * co;
                            let xv = xd[src + i];
                            let mut acc = 0.0;
                            for o in 0..co {
                                acc += g[o] * kd[kr + o];
                                dk[kr + o] += g[o] * xv;
                            }
                            dx[src + i] += acc;
                        }
                    }
                }
            }
        }
    }
    let dx = DenseTensor::new(vec![b, hp, wp, ci], dx)?;
    Ok((crop_spatial(&dx, pad), DenseTensor::new(k.shape().to_vec(), dk)?))
}

/// Non-overlapping 2x2 max-pooling of `(B,H,W,C)`; odd trailing rows and
/// columns are dropped. Also returns the flat source index of every output.
pub fn max_pool2(x: &DenseTensor) -> Result<(DenseTensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || s[1] < 2 || s[2] < 2 {
        return Err(Error::shape(format!(
            "max-pool expects (B,H,W,C) with H,W >= 2, got {s:?}"
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * ho * wo * c);
    let mut arg = Vec::with_capacity(b * ho * wo * c);
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut best = ((bi * h + 2 * y) * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((DenseTensor::new(vec![b, ho, wo, c], out)?, arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], grad: &DenseTensor) -> Result<DenseTensor> {
    let mut dx = DenseTensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn relu(x: &DenseTensor) -> DenseTensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Passes `grad` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &DenseTensor, grad: &DenseTensor) -> DenseTensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Adds `bias` (length C) along the last mode.
pub fn add_bias(x: &DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
    let c = *x.shape().last().unwrap_or(&1);
    if bias.shape() != [c] {
        return Err(Error::shape(format!(
            "bias {:?} does not match last mode of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let bd = bias.data();
    let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % c]).collect();
    DenseTensor::new(x.shape().to_vec(), data)
}

/// Sums `grad` over every mode but the last.
pub fn bias_grad(grad: &DenseTensor) -> DenseTensor {
    let c = *grad.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; c];
    for (i, &g) in grad.data().iter().enumerate() {
        out[i % c] += g;
    }
    DenseTensor::new(vec![c], out).expect("nonzero length")
}

/// Mean softmax cross-entropy of `(B, C)` logits and the gradient of that
/// mean with respect to the logits. Each row is shifted by its max first.
pub fn softmax_xent(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, c) = (s[0], s[1]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[label];
        let g = &mut grad[i * c..(i + 1) * c];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp() / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, DenseTensor::new(vec![b, c], grad)?))
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &DenseTensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}
