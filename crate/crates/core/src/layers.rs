//! Linear layers: tensor-ring fully-connected and convolutional layers and
//! their dense counterparts.
//!
//! Every layer exposes `apply`, written against [`Graph`] so the same code
//! serves inference and gradient recording. Parameters are passed in the
//! order of `params()`: ring cores first, then the bias if present.
//!
//! The eager `forward` methods reuse merged factors cached at construction
//! and after every parameter update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{merge_cores, Eager, Graph};
use crate::error::{Error, Result};
use crate::planner::{cost_plan, MergePlan};
use crate::ring::{random_init, InitSpec, TensorRing};
use crate::tensor::{ConvSpec, DenseTensor};

/// Where the `D x D` filter modes sit in a convolutional ring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialMode {
    /// One core of mode size `D^2`.
    #[default]
    Merged,
    /// Two cores of mode size `D`.
    Split,
}

impl SpatialMode {
    pub fn cores(self) -> usize {
        match self {
            SpatialMode::Merged => 1,
            SpatialMode::Split => 2,
        }
    }

    pub fn mode_sizes(self, filter: usize) -> Vec<usize> {
        match self {
            SpatialMode::Merged => vec![filter * filter],
            SpatialMode::Split => vec![filter, filter],
        }
    }
}

fn product(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// MAC coefficient of `R^3` for merging a chain with the balanced plan.
pub fn chain_merge_coeff(dims: &[usize]) -> u64 {
    if dims.len() < 2 {
        return 0;
    }
    let plan = MergePlan::hierarchical(0, dims.len() - 1).expect("nonempty chain");
    cost_plan(dims, 1, &plan).expect("plan matches dims").macs
}

fn check_bias(bias: &Option<DenseTensor>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [n] => Err(Error::shape(format!("bias {:?} should have shape [{n}]", b.shape()))),
        _ => Ok(()),
    }
}

fn apply_bias<G: Graph>(g: &mut G, y: G::V, bias: Option<&G::V>) -> Result<G::V> {
    match bias {
        Some(b) => g.add_bias(&y, b),
        None => Ok(y),
    }
}

/// `x (B, I_1..I_d)` through `F1 (Ra, I_1..I_d, Rb)` then `F2 (Rb, O.., Ra)`,
/// giving `(B, O)`.
fn separate<G: Graph>(g: &mut G, f1: &G::V, f2: &G::V, x: &G::V, in_shape: &[usize], out: usize) -> Result<G::V> {
    let b = g.shape(x)[0];
    let d = in_shape.len();
    let mut xs = vec![b];
    xs.extend_from_slice(in_shape);
    let x = g.reshape(x, &xs)?;
    let axes: Vec<usize> = (1..=d).collect();
    // (Ra, Rb, B)
    let z = g.contract(f1, &axes, &x, &axes)?;
    let last = g.shape(f2).len() - 1;
    let y = g.contract(&z, &[1, 0], f2, &[0, last])?;
    g.reshape(&y, &[b, out])
}

/// Fully-connected layer whose `I x O` weight is a tensor ring over the input
/// modes followed by the output modes.
#[derive(Clone, Debug)]
pub struct TrFullyConnected {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    ring: TensorRing,
    bias: Option<DenseTensor>,
    f1: DenseTensor,
    f2: DenseTensor,
}

impl TrFullyConnected {
    pub fn new(in_shape: &[usize], out_shape: &[usize], ring: TensorRing, bias: Option<DenseTensor>) -> Result<Self> {
        if in_shape.is_empty() || out_shape.is_empty() {
            return Err(Error::shape("fully-connected layers need input and output modes"));
        }
        let mut want = in_shape.to_vec();
        want.extend_from_slice(out_shape);
        if ring.shape() != want {
            return Err(Error::shape(format!(
                "ring modes {:?} do not match {in_shape:?} x {out_shape:?}",
                ring.shape()
            )));
        }
        check_bias(&bias, product(out_shape))?;
        let mut layer = Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            ring,
            bias,
            f1: DenseTensor::scalar(0.0),
            f2: DenseTensor::scalar(0.0),
        };
        layer.refresh()?;
        Ok(layer)
    }

    /// Cores drawn from the calibrated initializer with `N = I * O`.
    pub fn random(in_shape: &[usize], out_shape: &[usize], rank: usize, bias: bool, seed: u64) -> Result<Self> {
        let mut modes = in_shape.to_vec();
        modes.extend_from_slice(out_shape);
        let init = InitSpec::for_params(product(in_shape) * product(out_shape));
        let ring = random_init(&modes, rank, &init, seed)?;
        let bias = bias.then(|| DenseTensor::zeros(&[product(out_shape)])).transpose()?;
        Self::new(in_shape, out_shape, ring, bias)
    }

    /// Recomputes the cached input and output merges.
    pub fn refresh(&mut self) -> Result<()> {
        let d = self.in_shape.len();
        let n = self.ring.num_cores();
        self.f1 = self.ring.merge(0, d - 1, None)?;
        self.f2 = self.ring.merge(d, n - 1, None)?;
        Ok(())
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_size(&self) -> usize {
        product(&self.in_shape)
    }

    pub fn out_size(&self) -> usize {
        product(&self.out_shape)
    }

    pub fn ring(&self) -> &TensorRing {
        &self.ring
    }

    pub fn bias(&self) -> Option<&DenseTensor> {
        self.bias.as_ref()
    }

    pub fn f1(&self) -> &DenseTensor {
        &self.f1
    }

    pub fn f2(&self) -> &DenseTensor {
        &self.f2
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        self.ring.core_tensors().chain(self.bias.as_ref()).collect()
    }

    /// Replaces every parameter (in `params()` order) and refreshes caches.
    pub fn set_params(&mut self, params: &[DenseTensor]) -> Result<()> {
        let n = self.ring.num_cores();
        if params.len() != n + usize::from(self.bias.is_some()) {
            return Err(Error::shape(format!("expected {} parameters, got {}", n, params.len())));
        }
        for (i, p) in params[..n].iter().enumerate() {
            self.ring.set_core(i, p.clone())?;
        }
        if let Some(b) = &mut self.bias {
            if params[n].shape() != b.shape() {
                return Err(Error::shape("bias shape changed"));
            }
            *b = params[n].clone();
        }
        self.refresh()
    }

    pub fn param_count(&self) -> usize {
        self.ring.param_count() + self.bias.as_ref().map_or(0, DenseTensor::len)
    }

    /// The represented weight as an `(I, O)` matrix.
    pub fn dense_weight(&self) -> Result<DenseTensor> {
        self.ring.construct()?.into_shape(&[self.in_size(), self.out_size()])
    }

    /// `x` of shape `(B, ...)` with `I` trailing entries per sample, giving
    /// `(B, O_1, ..., O_k)`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let b = batch_of(x, self.in_size())?;
        let mut g = Eager;
        let y = separate(&mut g, &self.f1, &self.f2, x, &self.in_shape, self.out_size())?;
        let y = apply_bias(&mut g, y, self.bias.as_ref())?;
        let mut shape = vec![b];
        shape.extend_from_slice(&self.out_shape);
        y.into_shape(&shape)
    }

    /// Forward pass from explicit parameters, producing `(B, O)`.
    pub fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        let d = self.in_shape.len();
        let n = self.ring.num_cores();
        let cores: Vec<&G::V> = params[..n].iter().collect();
        let rank = self.ring.cores()[0].left_rank();
        let f1 = merge_cores(g, &cores[..d], rank)?;
        let f2 = merge_cores(g, &cores[d..], rank)?;
        let y = separate(g, &f1, &f2, x, &self.in_shape, self.out_size())?;
        apply_bias(g, y, params.get(n))
    }

    /// Per-sample MACs of `forward`: `R^2 (I + O)` at uniform rank.
    pub fn macs_per_sample(&self) -> u64 {
        let r0 = self.f1.shape()[0] as u64;
        let rd = *self.f1.shape().last().unwrap() as u64;
        r0 * rd * (self.in_size() + self.out_size()) as u64
    }

    /// MACs spent by `refresh`.
    pub fn merge_macs(&self) -> u64 {
        let r = self.ring.uniform_rank().unwrap_or(0) as u64;
        let d = self.in_shape.len();
        r.pow(3) * (chain_merge_coeff(&self.ring.shape()[..d]) + chain_merge_coeff(&self.ring.shape()[d..]))
    }
}

fn batch_of(x: &DenseTensor, per_sample: usize) -> Result<usize> {
    let b = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("input needs a batch mode"))?;
    if product(&x.shape()[1..]) != per_sample {
        return Err(Error::shape(format!(
            "input {:?} does not carry {per_sample} values per sample",
            x.shape()
        )));
    }
    Ok(b)
}

/// Intermediate tensors of the factored convolution for a batch.
#[derive(Clone, Debug)]
pub struct ConvIntermediates {
    /// `(B, H, W, R, R)`
    pub p: DenseTensor,
    /// `(B, H', W', R, R)`
    pub q: DenseTensor,
    /// `(B, H', W', O)`
    pub z: DenseTensor,
}

/// Convolution whose `D x D x I x O` kernel is a tensor ring over the spatial
/// core(s), the input-channel cores and the output-channel cores, in that
/// order. An empty input factorization means a single input channel.
#[derive(Clone, Debug)]
pub struct TrConv2d {
    spec: ConvSpec,
    mode: SpatialMode,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    ring: TensorRing,
    bias: Option<DenseTensor>,
    v: DenseTensor,
    u_in: DenseTensor,
    u_out: DenseTensor,
}

impl TrConv2d {
    pub fn new(
        spec: ConvSpec,
        mode: SpatialMode,
        in_shape: &[usize],
        out_shape: &[usize],
        ring: TensorRing,
        bias: Option<DenseTensor>,
    ) -> Result<Self> {
        spec.output_hw()?;
        if product(in_shape) != spec.in_channels || out_shape.is_empty() || product(out_shape) != spec.out_channels {
            return Err(Error::shape(format!(
                "channel factors {in_shape:?} x {out_shape:?} do not match I={} O={}",
                spec.in_channels, spec.out_channels
            )));
        }
        let mut want = mode.mode_sizes(spec.filter);
        want.extend_from_slice(in_shape);
        want.extend_from_slice(out_shape);
        if ring.shape() != want {
            return Err(Error::shape(format!(
                "ring modes {:?} should be {want:?}",
                ring.shape()
            )));
        }
        if ring.uniform_rank().is_none() {
            return Err(Error::Ring("convolutional rings need a uniform rank".into()));
        }
        check_bias(&bias, spec.out_channels)?;
        let mut layer = Self {
            spec,
            mode,
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            ring,
            bias,
            v: DenseTensor::scalar(0.0),
            u_in: DenseTensor::scalar(0.0),
            u_out: DenseTensor::scalar(0.0),
        };
        layer.refresh()?;
        Ok(layer)
    }

    /// Cores drawn from the calibrated initializer with `N = D^2 I O`.
    pub fn random(
        spec: ConvSpec,
        mode: SpatialMode,
        in_shape: &[usize],
        out_shape: &[usize],
        rank: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut modes = mode.mode_sizes(spec.filter);
        modes.extend_from_slice(in_shape);
        modes.extend_from_slice(out_shape);
        let n = spec.filter * spec.filter * spec.in_channels * spec.out_channels;
        let ring = random_init(&modes, rank, &InitSpec::for_params(n), seed)?;
        let bias = bias.then(|| DenseTensor::zeros(&[spec.out_channels])).transpose()?;
        Self::new(spec, mode, in_shape, out_shape, ring, bias)
    }

    pub fn refresh(&mut self) -> Result<()> {
        let mut g = Eager;
        let cores: Vec<&DenseTensor> = self.ring.core_tensors().collect();
        let (v, u_in, u_out) = self.factors(&mut g, &cores)?;
        (self.v, self.u_in, self.u_out) = (v, u_in, u_out);
        Ok(())
    }

    /// `(V (R,D,D,R), U_in (R,I,R), U_out (R,O,R))` from the ring cores.
    fn factors<G: Graph>(&self, g: &mut G, cores: &[&G::V]) -> Result<(G::V, G::V, G::V)> {
        let r = self.rank();
        let (s, d) = (self.mode.cores(), self.in_shape.len());
        let dd = self.spec.filter;
        let v = match self.mode {
            SpatialMode::Merged => g.reshape(cores[0], &[r, dd, dd, r])?,
            SpatialMode::Split => g.contract(cores[0], &[2], cores[1], &[0])?,
        };
        let u_in = merge_cores(g, &cores[s..s + d], r)?;
        let u_in = g.reshape(&u_in, &[r, self.spec.in_channels, r])?;
        let u_out = merge_cores(g, &cores[s + d..], r)?;
        let u_out = g.reshape(&u_out, &[r, self.spec.out_channels, r])?;
        Ok((v, u_in, u_out))
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn spatial_mode(&self) -> SpatialMode {
        self.mode
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn rank(&self) -> usize {
        self.ring.uniform_rank().expect("checked at construction")
    }

    pub fn ring(&self) -> &TensorRing {
        &self.ring
    }

    pub fn bias(&self) -> Option<&DenseTensor> {
        self.bias.as_ref()
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        self.ring.core_tensors().chain(self.bias.as_ref()).collect()
    }

    pub fn set_params(&mut self, params: &[DenseTensor]) -> Result<()> {
        let n = self.ring.num_cores();
        if params.len() != n + usize::from(self.bias.is_some()) {
            return Err(Error::shape(format!("expected {} parameters, got {}", n, params.len())));
        }
        for (i, p) in params[..n].iter().enumerate() {
            self.ring.set_core(i, p.clone())?;
        }
        if let Some(b) = &mut self.bias {
            if params[n].shape() != b.shape() {
                return Err(Error::shape("bias shape changed"));
            }
            *b = params[n].clone();
        }
        self.refresh()
    }

    pub fn param_count(&self) -> usize {
        self.ring.param_count() + self.bias.as_ref().map_or(0, DenseTensor::len)
    }

    /// The represented `(D, D, I, O)` kernel.
    pub fn kernel(&self) -> Result<DenseTensor> {
        let s = &self.spec;
        self.ring
            .construct()?
            .into_shape(&[s.filter, s.filter, s.in_channels, s.out_channels])
    }

    fn check_input(&self, x: &DenseTensor) -> Result<()> {
        let s = &self.spec;
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [s.height, s.width, s.in_channels] {
            return Err(Error::shape(format!(
                "input {xs:?} should be (B, {}, {}, {})",
                s.height, s.width, s.in_channels
            )));
        }
        Ok(())
    }

    fn three_steps<G: Graph>(&self, g: &mut G, x: &G::V, v: &G::V, u_in: &G::V, u_out: &G::V) -> Result<[G::V; 3]> {
        // (B,H,W,I) x (R,I,R) -> (B,H,W,R,R)
        let p = g.contract(x, &[3], u_in, &[1])?;
        let q = g.bond_conv(&p, v, self.spec.stride, self.spec.padding)?;
        // (B,H',W',R,R) x (R,O,R) -> (B,H',W',O)
        let z = g.contract(&q, &[3, 4], u_out, &[0, 2])?;
        Ok([p, q, z])
    }

    /// `(B, H, W, I)` to `(B, H', W', O)` through the cached factors.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self.forward_with_intermediates(x)?.0)
    }

    pub fn forward_with_intermediates(&self, x: &DenseTensor) -> Result<(DenseTensor, ConvIntermediates)> {
        self.check_input(x)?;
        let mut g = Eager;
        let [p, q, z] = self.three_steps(&mut g, x, &self.v, &self.u_in, &self.u_out)?;
        let y = apply_bias(&mut g, z.clone(), self.bias.as_ref())?;
        Ok((y, ConvIntermediates { p, q, z }))
    }

    pub fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        let n = self.ring.num_cores();
        let cores: Vec<&G::V> = params[..n].iter().collect();
        let (v, u_in, u_out) = self.factors(g, &cores)?;
        let [_, _, z] = self.three_steps(g, x, &v, &u_in, &u_out)?;
        apply_bias(g, z, params.get(n))
    }

    /// Per-sample MACs of `forward`: `HW R^2 I + H'W' R^3 D^2 + H'W' R^2 O`.
    pub fn macs_per_sample(&self) -> u64 {
        let s = &self.spec;
        let (ho, wo) = s.output_hw().expect("checked at construction");
        let r = self.rank() as u64;
        let hw = (s.height * s.width) as u64;
        let howo = (ho * wo) as u64;
        hw * r * r * s.in_channels as u64
            + howo * r.pow(3) * (s.filter * s.filter) as u64
            + howo * r * r * s.out_channels as u64
    }

    /// MACs spent by `refresh`.
    pub fn merge_macs(&self) -> u64 {
        let r = self.rank() as u64;
        let spatial = match self.mode {
            SpatialMode::Merged => 0,
            SpatialMode::Split => (self.spec.filter * self.spec.filter) as u64,
        };
        r.pow(3) * (spatial + chain_merge_coeff(&self.in_shape) + chain_merge_coeff(&self.out_shape))
    }
}

/// Uncompressed fully-connected layer, `y = x W (+ b)` with `W` of shape `(I, O)`.
#[derive(Clone, Debug)]
pub struct DenseFc {
    pub weight: DenseTensor,
    pub bias: Option<DenseTensor>,
}

impl DenseFc {
    pub fn new(weight: DenseTensor, bias: Option<DenseTensor>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::shape(format!("weight {:?} is not a matrix", weight.shape())));
        }
        check_bias(&bias, weight.shape()[1])?;
        Ok(Self { weight, bias })
    }

    /// Gaussian weights with variance `2 / (I * O)`, matching the ring target.
    pub fn random(in_size: usize, out_size: usize, bias: bool, seed: u64) -> Result<Self> {
        let std = InitSpec::for_params(in_size * out_size).target_std()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let weight = DenseTensor::random_normal(&[in_size, out_size], std, &mut rng)?;
        let bias = bias.then(|| DenseTensor::zeros(&[out_size])).transpose()?;
        Self::new(weight, bias)
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        batch_of(x, self.weight.shape()[0])?;
        let params: Vec<DenseTensor> = self.params().into_iter().cloned().collect();
        self.apply(&mut Eager, &params, x)
    }

    pub fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        let b = g.shape(x)[0];
        let x = g.reshape(x, &[b, self.weight.shape()[0]])?;
        let y = g.contract(&x, &[1], &params[0], &[0])?;
        apply_bias(g, y, params.get(1))
    }
}

/// Uncompressed convolution with a `(D, D, I, O)` kernel.
#[derive(Clone, Debug)]
pub struct DenseConv {
    pub spec: ConvSpec,
    pub kernel: DenseTensor,
    pub bias: Option<DenseTensor>,
}

impl DenseConv {
    pub fn new(spec: ConvSpec, kernel: DenseTensor, bias: Option<DenseTensor>) -> Result<Self> {
        spec.output_hw()?;
        let want = [spec.filter, spec.filter, spec.in_channels, spec.out_channels];
        if kernel.shape() != want {
            return Err(Error::shape(format!("kernel {:?} should be {want:?}", kernel.shape())));
        }
        check_bias(&bias, spec.out_channels)?;
        Ok(Self { spec, kernel, bias })
    }

    pub fn random(spec: ConvSpec, bias: bool, seed: u64) -> Result<Self> {
        let shape = [spec.filter, spec.filter, spec.in_channels, spec.out_channels];
        let std = InitSpec::for_params(product(&shape)).target_std()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let kernel = DenseTensor::random_normal(&shape, std, &mut rng)?;
        let bias = bias.then(|| DenseTensor::zeros(&[spec.out_channels])).transpose()?;
        Self::new(spec, kernel, bias)
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        std::iter::once(&self.kernel).chain(self.bias.as_ref()).collect()
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let params: Vec<DenseTensor> = self.params().into_iter().cloned().collect();
        self.apply(&mut Eager, &params, x)
    }

    pub fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        let y = g.conv2d(x, &params[0], self.spec.stride, self.spec.padding)?;
        apply_bias(g, y, params.get(1))
    }
}
