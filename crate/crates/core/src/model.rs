//! Sequential networks built from an [`ArchSpec`].
//!
//! Every unit but the last is followed by ReLU, then optional 2x2
//! max-pooling. Inputs are reshaped to whatever the next unit expects, so a
//! convolution can feed a fully-connected layer directly.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Unit};
use crate::autodiff::{Eager, Graph, Tape};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::layers::{DenseConv, DenseFc, TrConv2d, TrFullyConnected};
use crate::nn;
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Tensor-ring layers.
    #[default]
    Tr,
    /// Uncompressed baseline.
    Dense,
}

#[derive(Clone, Debug)]
enum Layer {
    TrFc(TrFullyConnected),
    TrConv(TrConv2d),
    DenseFc(DenseFc),
    DenseConv(DenseConv),
}

impl Layer {
    fn params(&self) -> Vec<&DenseTensor> {
        match self {
            Layer::TrFc(l) => l.params(),
            Layer::TrConv(l) => l.params(),
            Layer::DenseFc(l) => l.params(),
            Layer::DenseConv(l) => l.params(),
        }
    }

    fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        match self {
            Layer::TrFc(l) => l.apply(g, params, x),
            Layer::TrConv(l) => l.apply(g, params, x),
            Layer::DenseFc(l) => l.apply(g, params, x),
            Layer::DenseConv(l) => l.apply(g, params, x),
        }
    }

    fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self {
            Layer::TrFc(l) => {
                let y = l.forward(x)?;
                let b = y.shape()[0];
                y.into_shape(&[b, l.out_size()])
            }
            Layer::TrConv(l) => l.forward(x),
            Layer::DenseFc(l) => l.forward(x),
            Layer::DenseConv(l) => l.forward(x),
        }
    }

    fn set_params(&mut self, params: &[DenseTensor]) -> Result<()> {
        match self {
            Layer::TrFc(l) => l.set_params(params),
            Layer::TrConv(l) => l.set_params(params),
            Layer::DenseFc(l) => {
                l.weight = params[0].clone();
                if let Some(b) = &mut l.bias {
                    *b = params[1].clone();
                }
                Ok(())
            }
            Layer::DenseConv(l) => {
                l.kernel = params[0].clone();
                if let Some(b) = &mut l.bias {
                    *b = params[1].clone();
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    name: String,
    layer: Layer,
    /// Per-sample input shape the layer consumes.
    input: Vec<usize>,
    relu: bool,
    pool: bool,
    n_params: usize,
}

/// A feed-forward classifier.
#[derive(Clone, Debug)]
pub struct Network {
    kind: ModelKind,
    rank: usize,
    stages: Vec<Stage>,
    input_size: usize,
    output_size: usize,
}

fn unit_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Network {
    pub fn from_arch(arch: &ArchSpec, kind: ModelKind, rank: usize, seed: u64) -> Result<Self> {
        let units = arch.units()?;
        if units.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        let mut per_row = vec![0usize; arch.layers.len()];
        let n = units.len();
        let mut stages = Vec::with_capacity(n);
        let mut flowing: Option<usize> = None;
        let mut input_size = 0;
        for (k, (row, unit)) in units.into_iter().enumerate() {
            let base = arch.layers[row].label(row);
            let copies = arch.layers[row].units()?.len() * arch.layers[row].repeat;
            let name = if copies > 1 {
                format!("{base}.{}", per_row[row])
            } else {
                base
            };
            per_row[row] += 1;
            let s = unit_seed(seed, k);
            let (layer, input, out_size, pool) = match unit {
                Unit::Fc {
                    in_shape,
                    out_shape,
                    bias,
                } => {
                    let (i, o) = (in_shape.iter().product::<usize>(), out_shape.iter().product::<usize>());
                    let layer = match kind {
                        ModelKind::Tr => Layer::TrFc(TrFullyConnected::random(&in_shape, &out_shape, rank, bias, s)?),
                        ModelKind::Dense => Layer::DenseFc(DenseFc::random(i, o, bias, s)?),
                    };
                    (layer, vec![i], o, false)
                }
                Unit::Conv {
                    spec,
                    mode,
                    in_shape,
                    out_shape,
                    bias,
                    pool,
                } => {
                    let layer = match kind {
                        ModelKind::Tr => {
                            Layer::TrConv(TrConv2d::random(spec, mode, &in_shape, &out_shape, rank, bias, s)?)
                        }
                        ModelKind::Dense => Layer::DenseConv(DenseConv::random(spec, bias, s)?),
                    };
                    let (mut ho, mut wo) = spec.output_hw()?;
                    if pool {
                        if ho < 2 || wo < 2 {
                            return Err(Error::shape(format!("{name}: output {ho}x{wo} too small to pool")));
                        }
                        (ho, wo) = (ho / 2, wo / 2);
                    }
                    (
                        layer,
                        vec![spec.height, spec.width, spec.in_channels],
                        ho * wo * spec.out_channels,
                        pool,
                    )
                }
            };
            let need: usize = input.iter().product();
            match flowing {
                None => input_size = need,
                Some(have) if have != need => {
                    return Err(Error::shape(format!(
                        "{name} expects {need} values per sample but receives {have}"
                    )))
                }
                Some(_) => {}
            }
            flowing = Some(out_size);
            let n_params = layer.params().len();
            stages.push(Stage {
                name,
                layer,
                input,
                relu: k + 1 < n,
                pool,
                n_params,
            });
        }
        Ok(Self {
            kind,
            rank,
            stages,
            input_size,
            output_size: flowing.unwrap_or(0),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        self.stages.iter().flat_map(|s| s.layer.params()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.stages {
            let tensors = s.layer.params();
            let has_bias = match &s.layer {
                Layer::TrFc(l) => l.bias().is_some(),
                Layer::TrConv(l) => l.bias().is_some(),
                Layer::DenseFc(l) => l.bias.is_some(),
                Layer::DenseConv(l) => l.bias.is_some(),
            };
            let weights = tensors.len() - usize::from(has_bias);
            for i in 0..weights {
                match self.kind {
                    ModelKind::Tr => out.push(format!("{}.core{i}", s.name)),
                    ModelKind::Dense => out.push(format!("{}.weight", s.name)),
                }
            }
            if has_bias {
                out.push(format!("{}.bias", s.name));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces every parameter (in `params()` order) and refreshes caches.
    pub fn set_params(&mut self, params: &[DenseTensor]) -> Result<()> {
        let total: usize = self.stages.iter().map(|s| s.n_params).sum();
        if params.len() != total {
            return Err(Error::shape(format!(
                "expected {total} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut at = 0;
        for s in &mut self.stages {
            let chunk = &params[at..at + s.n_params];
            for (new, old) in chunk.iter().zip(s.layer.params()) {
                if new.shape() != old.shape() {
                    return Err(Error::shape(format!(
                        "{}: parameter shape {:?} should be {:?}",
                        s.name,
                        new.shape(),
                        old.shape()
                    )));
                }
            }
            s.layer.set_params(chunk)?;
            at += s.n_params;
        }
        Ok(())
    }

    fn batch_input<G: Graph>(g: &mut G, x: &G::V, input: &[usize]) -> Result<G::V> {
        let b = g.shape(x)[0];
        let mut shape = vec![b];
        shape.extend_from_slice(input);
        g.reshape(x, &shape)
    }

    /// Logits `(B, C)` for a batch whose trailing modes hold one sample each,
    /// evaluated from explicit parameters.
    pub fn apply<G: Graph>(&self, g: &mut G, params: &[G::V], x: &G::V) -> Result<G::V> {
        let mut h = x.clone();
        let mut at = 0;
        for s in &self.stages {
            let xin = Self::batch_input(g, &h, &s.input)?;
            let mut y = s.layer.apply(g, &params[at..at + s.n_params], &xin)?;
            at += s.n_params;
            if s.relu {
                y = g.relu(&y);
            }
            if s.pool {
                y = g.max_pool2(&y)?;
            }
            h = y;
        }
        let b = g.shape(&h)[0];
        g.reshape(&h, &[b, self.output_size])
    }

    /// Logits through the cached merged factors.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for s in &self.stages {
            let b = h.shape()[0];
            let mut shape = vec![b];
            shape.extend_from_slice(&s.input);
            let mut y = s.layer.forward(&h.into_shape(&shape)?)?;
            if s.relu {
                y = nn::relu(&y);
            }
            if s.pool {
                y = nn::max_pool2(&y)?.0;
            }
            h = y;
        }
        let b = h.shape()[0];
        h.into_shape(&[b, self.output_size])
    }

    fn check_batch(&self, x: &DenseTensor) -> Result<()> {
        let per: usize = x.shape().iter().skip(1).product();
        if x.ndim() < 2 || per != self.input_size {
            return Err(Error::shape(format!(
                "batch {:?} does not hold {} values per sample",
                x.shape(),
                self.input_size
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grad(&self, x: &DenseTensor, labels: &[usize]) -> Result<(f64, Vec<DenseTensor>)> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let params: Vec<_> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let input = tape.leaf(x.clone());
        let logits = self.apply(&mut tape, &params, &input)?;
        let loss = tape.softmax_xent(logits, labels)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let out = params
            .iter()
            .zip(self.params())
            .map(|(&v, p)| grads.wrt(v, p))
            .collect();
        Ok((value, out))
    }

    /// Mean cross-entropy with substitute parameters, no caching or recording.
    pub fn loss_with(&self, params: &[DenseTensor], x: &DenseTensor, labels: &[usize]) -> Result<f64> {
        self.check_batch(x)?;
        let logits = self.apply(&mut Eager, params, x)?;
        Ok(nn::softmax_xent(&logits, labels)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            ck.push(name, p.clone());
        }
        ck
    }

    /// Loads parameters by name; every parameter must be present.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let params = self
            .param_names()
            .iter()
            .map(|n| {
                ck.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.set_params(&params)
    }

    /// JSON description of the stored tensors.
    pub fn sidecar(&self, arch: &ArchSpec) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = self
            .stages
            .iter()
            .map(|s| {
                let mut v = serde_json::json!({"name": s.name, "input": s.input, "relu": s.relu, "pool": s.pool});
                match &s.layer {
                    Layer::TrFc(l) => {
                        v["type"] = "tr_fc".into();
                        v["in_shape"] = l.in_shape().into();
                        v["out_shape"] = l.out_shape().into();
                    }
                    Layer::TrConv(l) => {
                        v["type"] = "tr_conv".into();
                        v["in_shape"] = l.in_shape().into();
                        v["out_shape"] = l.out_shape().into();
                        v["spatial_mode"] = serde_json::to_value(l.spatial_mode()).unwrap_or_default();
                        v["conv"] = serde_json::to_value(l.spec()).unwrap_or_default();
                    }
                    Layer::DenseFc(_) => v["type"] = "dense_fc".into(),
                    Layer::DenseConv(l) => {
                        v["type"] = "dense_conv".into();
                        v["conv"] = serde_json::to_value(l.spec).unwrap_or_default();
                    }
                }
                v
            })
            .collect();
        let tensors: Vec<serde_json::Value> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(n, p)| serde_json::json!({"name": n, "shape": p.shape()}))
            .collect();
        serde_json::json!({
            "arch": arch,
            "model": self.kind,
            "rank": self.rank,
            "layers": layers,
            "tensors": tensors,
        })
    }
}
