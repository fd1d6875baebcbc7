//! Dense row-major multiway arrays and the reference kernels built on them.
//!
//! Everything here is `f64`. The contraction routine accumulates every output
//! element in ascending order of the contracted flat index, so results do not
//! depend on scheduling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flops;

/// A d-mode real tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::ZeroMode(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if data.len() != expected {
            return Err(Error::ShapeData {
                shape,
                expected,
                data: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// i.i.d. normal entries with mean 0 and the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Identity matrix of size `n x n`.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index {index:?} has wrong arity for shape {:?}",
                self.shape
            )));
        }
        let mut flat = 0;
        for (i, (&ix, &n)) in index.iter().zip(&self.shape).enumerate() {
            if ix >= n {
                return Err(Error::AxisOutOfRange { axis: i, ndim: n });
            }
            flat = flat * n + ix;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    /// Same data reinterpreted under a new shape with equal product.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        self.clone().into_shape(new_shape)
    }

    pub fn into_shape(self, new_shape: &[usize]) -> Result<Self> {
        if new_shape.contains(&0) {
            return Err(Error::ZeroMode(new_shape.to_vec()));
        }
        let to: usize = new_shape.iter().product();
        if to != self.data.len() {
            return Err(Error::ReshapeMismatch {
                from: self.data.len(),
                to,
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders modes so that output mode `k` is input mode `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_axes(perm, self.ndim())?;
        if perm.len() != self.ndim() {
            return Err(Error::shape(format!(
                "permutation {perm:?} does not cover {} modes",
                self.ndim()
            )));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let src_strides = strides(&self.shape);
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let data = gather_copy(&self.data, &new_shape, &gather);
        Ok(Self { shape: new_shape, data })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// `max|a - b| / max(max|b|, tiny)`: relative error against `reference`.
    pub fn rel_err(&self, reference: &Self) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }

    /// Sum over the diagonal of the first and last modes.
    pub fn trace_ends(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 || self.shape[0] != self.shape[nd - 1] {
            return Err(Error::shape(format!(
                "trace needs matching first/last modes, got {:?}",
                self.shape
            )));
        }
        let r = self.shape[0];
        let inner: Vec<usize> = self.shape[1..nd - 1].to_vec();
        let m: usize = inner.iter().product();
        let mut out = vec![0.0; m];
        for a in 0..r {
            let base = a * m * r;
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.data[base + j * r + a];
            }
        }
        flops::add(r * m);
        Ok(Self {
            shape: inner,
            data: out,
        })
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

fn gather_copy(src: &[f64], shape: &[usize], gather: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if shape.is_empty() {
        out.push(src[0]);
        return out;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let last_stride = gather[last];
    let last_len = shape[last];
    let rows = n / last_len;
    for _ in 0..rows {
        for k in 0..last_len {
            out.push(src[off + k * last_stride]);
        }
        // advance all but the last mode
        for k in (0..last).rev() {
            idx[k] += 1;
            off += gather[k];
            if idx[k] < shape[k] {
                break;
            }
            off -= gather[k] * shape[k];
            idx[k] = 0;
        }
    }
    out
}

fn check_axes(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    for &a in axes {
        if a >= ndim {
            return Err(Error::AxisOutOfRange { axis: a, ndim });
        }
        if seen[a] {
            return Err(Error::DuplicateAxis(a));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Sum-product of `a` and `b` over the paired axes `a_axes[k] <-> b_axes[k]`.
///
/// The result's modes are the free modes of `a` (in order) followed by the
/// free modes of `b`. Counts `free * contracted` multiply-accumulates.
pub fn contract(a: &DenseTensor, a_axes: &[usize], b: &DenseTensor, b_axes: &[usize]) -> Result<DenseTensor> {
    if a_axes.len() != b_axes.len() {
        return Err(Error::invalid(format!(
            "axis lists differ in length: {a_axes:?} vs {b_axes:?}"
        )));
    }
    check_axes(a_axes, a.ndim())?;
    check_axes(b_axes, b.ndim())?;
    for (&i, &j) in a_axes.iter().zip(b_axes) {
        if a.shape[i] != b.shape[j] {
            return Err(Error::ContractSize {
                left: a.shape[i],
                right: b.shape[j],
            });
        }
    }
    let a_free: Vec<usize> = (0..a.ndim()).filter(|i| !a_axes.contains(i)).collect();
    let b_free: Vec<usize> = (0..b.ndim()).filter(|i| !b_axes.contains(i)).collect();

    let m: usize = a_free.iter().map(|&i| a.shape[i]).product();
    let k: usize = a_axes.iter().map(|&i| a.shape[i]).product();
    let n: usize = b_free.iter().map(|&i| b.shape[i]).product();

    let a_perm: Vec<usize> = a_free.iter().chain(a_axes).copied().collect();
    let b_perm: Vec<usize> = b_axes.iter().chain(&b_free).copied().collect();
    let am = a.permute(&a_perm)?;
    let bm = b.permute(&b_perm)?;

    let mut out = vec![0.0; m * n];
    matmul_into(am.data(), bm.data(), &mut out, m, k, n);
    flops::add(m * k * n);

    let shape: Vec<usize> = a_free
        .iter()
        .map(|&i| a.shape[i])
        .chain(b_free.iter().map(|&i| b.shape[i]))
        .collect();
    Ok(DenseTensor { shape, data: out })
}

/// `out (m x n) += a (m x k) * b (k x n)`, accumulating in ascending `k`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution with a square filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// `floor((H + 2p - D) / s) + 1` for each spatial axis.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.filter == 0 || self.stride == 0 {
            return Err(Error::invalid("filter and stride must be >= 1"));
        }
        let out = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.filter {
                return Err(Error::invalid(format!(
                    "filter {} larger than padded extent {padded}",
                    self.filter
                )));
            }
            Ok((padded - self.filter) / self.stride + 1)
        };
        Ok((out(self.height)?, out(self.width)?))
    }
}

/// Direct convolution: `y[h,w,o] = sum x[h*s+d1-p, w*s+d2-p, i] k[d1,d2,i,o]`,
/// with out-of-range reads contributing zero.
pub fn conv2d_reference(x: &DenseTensor, k: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let (h, w, ci, co, dd) = (
        spec.height,
        spec.width,
        spec.in_channels,
        spec.out_channels,
        spec.filter,
    );
    if x.shape() != [h, w, ci] {
        return Err(Error::shape(format!(
            "input {:?} does not match spec ({h}, {w}, {ci})",
            x.shape()
        )));
    }
    if k.shape() != [dd, dd, ci, co] {
        return Err(Error::shape(format!(
            "kernel {:?} does not match spec ({dd}, {dd}, {ci}, {co})",
            k.shape()
        )));
    }
    let (ho, wo) = spec.output_hw()?;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut out = vec![0.0; ho * wo * co];
    let xd = x.data();
    let kd = k.data();
    for oh in 0..ho {
        for ow in 0..wo {
            let dst = &mut out[(oh * wo + ow) * co..(oh * wo + ow + 1) * co];
            for d1 in 0..dd {
                let ih = oh as isize * s + d1 as isize - p;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for d2 in 0..dd {
                    let iw = ow as isize * s + d2 as isize - p;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xrow = &xd[((ih as usize) * w + iw as usize) * ci..][..ci];
                    for (i, &xv) in xrow.iter().enumerate() {
                        let krow = &kd[((d1 * dd + d2) * ci + i) * co..][..co];
                        for (o, &kv) in dst.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    flops::add(ho * wo * dd * dd * ci * co);
    DenseTensor::new(vec![ho, wo, co], out)
}

/// Zero-pads the two spatial modes of a `(B, H, W, ...)` tensor.
pub(crate) fn pad_spatial(x: &DenseTensor, pad: usize) -> DenseTensor {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let inner: usize = s[3..].iter().product();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; b * hp * wp * inner];
    for bi in 0..b {
        for y in 0..h {
            let src = &x.data()[((bi * h + y) * w) * inner..][..w * inner];
            let dst_off = ((bi * hp + y + pad) * wp + pad) * inner;
            out[dst_off..dst_off + w * inner].copy_from_slice(src);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = hp;
    shape[2] = wp;
    DenseTensor { shape, data: out }
}

/// Inverse of [`pad_spatial`]: drops the border.
pub(crate) fn crop_spatial(x: &DenseTensor, pad: usize) -> DenseTensor {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    let (b, hp, wp) = (s[0], s[1], s[2]);
    let inner: usize = s[3..].iter().product();
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let mut out = Vec::with_capacity(b * h * w * inner);
    for bi in 0..b {
        for y in 0..h {
            let off = ((bi * hp + y + pad) * wp + pad) * inner;
            out.extend_from_slice(&x.data()[off..off + w * inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = h;
    shape[2] = w;
    DenseTensor { shape, data: out }
}

fn bond_conv_dims(p: &DenseTensor, v: &DenseTensor) -> Result<(usize, usize, usize, usize, usize)> {
    let ps = p.shape();
    let vs = v.shape();
    if ps.len() != 5 || vs.len() != 4 || vs[1] != vs[2] {
        return Err(Error::shape(format!(
            "bond convolution expects P (B,H,W,R,R) and V (R,D,D,R), got {ps:?} and {vs:?}"
        )));
    }
    let r = vs[0];
    if vs[3] != r || ps[3] != r || ps[4] != r {
        return Err(Error::shape(format!("bond ranks disagree: P {ps:?}, V {vs:?}")));
    }
    Ok((ps[0], ps[1], ps[2], r, vs[1]))
}

/// Spatial step of the factored convolution:
/// `Q[b,y,x,r3,r1] = sum_{d1,d2,r2} P[b, y*s+d1-p, x*s+d2-p, r2, r3] V[r1,d1,d2,r2]`.
///
/// Every window tap is evaluated (padding reads are explicit zeros), so this
/// always performs `B*H'*W'*R^3*D^2` multiply-accumulates.
pub fn bond_conv(p: &DenseTensor, v: &DenseTensor, stride: usize, pad: usize) -> Result<DenseTensor> {
    let (b, h, w, r, d) = bond_conv_dims(p, v)?;
    let spec = ConvSpec {
        height: h,
        width: w,
        in_channels: 1,
        out_channels: 1,
        filter: d,
        stride,
        padding: pad,
    };
    let (ho, wo) = spec.output_hw()?;
    let pp = pad_spatial(p, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let pd = pp.data();
    let vd = v.data();
    let rr = r * r;
    // V reordered to (r1, (d1, d2, r2)) is already its row-major layout.
    let taps = d * d * r;
    let mut window = vec![0.0; taps * r];
    let mut out = vec![0.0; b * ho * wo * rr];
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                // gather the window as ((d1,d2,r2), r3)
                for d1 in 0..d {
                    for d2 in 0..d {
                        let src = ((bi * hp + y * stride + d1) * wp + x * stride + d2) * rr;
                        let dst = (d1 * d + d2) * r * r;
                        window[dst..dst + rr].copy_from_slice(&pd[src..src + rr]);
                    }
                }
                let o = &mut out[((bi * ho + y) * wo + x) * rr..][..rr];
                // o[r3, r1] = sum_t window[t, r3] * V[r1, t]
                for r3 in 0..r {
                    for r1 in 0..r {
                        let vrow = &vd[r1 * taps..(r1 + 1) * taps];
                        let mut acc = 0.0;
                        for (t, &vv) in vrow.iter().enumerate() {
                            acc += window[t * r + r3] * vv;
                        }
                        o[r3 * r + r1] = acc;
                    }
                }
            }
        }
    }
    flops::add(b * ho * wo * r * r * r * d * d);
    DenseTensor::new(vec![b, ho, wo, r, r], out)
}

/// Adjoints of [`bond_conv`] with respect to `P` and `V`.
pub fn bond_conv_backward(
    p: &DenseTensor,
    v: &DenseTensor,
    grad: &DenseTensor,
    stride: usize,
    pad: usize,
) -> Result<(DenseTensor, DenseTensor)> {
    let (b, h, w, r, d) = bond_conv_dims(p, v)?;
    let gs = grad.shape();
    let (ho, wo) = (gs[1], gs[2]);
    if gs.len() != 5 || gs[0] != b || gs[3] != r || gs[4] != r {
        return Err(Error::shape(format!("bond conv adjoint has shape {gs:?}")));
    }
    let pp = pad_spatial(p, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let pd = pp.data();
    let vd = v.data();
    let gd = grad.data();
    let rr = r * r;
    let taps = d * d * r;
    let mut dp = vec![0.0; b * hp * wp * rr];
    let mut dv = vec![0.0; r * taps];
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                let g = &gd[((bi * ho + y) * wo + x) * rr..][..rr];
                for d1 in 0..d {
                    for d2 in 0..d {
                        let base = ((bi * hp + y * stride + d1) * wp + x * stride + d2) * rr;
                        for r2 in 0..r {
                            let t = (d1 * d + d2) * r + r2;
                            for r3 in 0..r {
                                let pv = pd[base + r2 * r + r3];
                                let mut acc = 0.0;
                                for r1 in 0..r {
                                    let gv = g[r3 * r + r1];
                                    acc += gv * vd[r1 * taps + t];
                                    dv[r1 * taps + t] += gv * pv;
                                }
                                dp[base + r2 * r + r3] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let dp = DenseTensor::new(vec![b, hp, wp, r, r], dp)?;
    Ok((crop_spatial(&dp, pad), DenseTensor::new(v.shape().to_vec(), dv)?))
}
