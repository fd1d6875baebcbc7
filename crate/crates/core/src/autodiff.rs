//! Reverse-mode differentiation over a recorded tape.
//!
//! Layers are written once against [`Graph`]. [`Eager`] evaluates them
//! directly; [`Tape`] records every primitive with its inputs so that
//! [`Tape::backward`] can push adjoints back to the leaves (the TR cores).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn;
use crate::planner::MergePlan;
use crate::tensor::{bond_conv, bond_conv_backward, contract, DenseTensor};

/// The primitives a layer may use.
pub trait Graph {
    type V: Clone;

    fn constant(&mut self, t: DenseTensor) -> Self::V;
    fn shape<'a>(&'a self, x: &'a Self::V) -> &'a [usize];
    fn contract(&mut self, a: &Self::V, a_axes: &[usize], b: &Self::V, b_axes: &[usize]) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn trace_ends(&mut self, x: &Self::V) -> Result<Self::V>;
    fn bond_conv(&mut self, p: &Self::V, v: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, k: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn add_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn max_pool2(&mut self, x: &Self::V) -> Result<Self::V>;
}

/// Merges a contiguous chain following `plan`; leaf `k` is `cores[k - offset]`.
pub fn merge_plan<G: Graph>(g: &mut G, cores: &[&G::V], plan: &MergePlan, offset: usize) -> Result<G::V> {
    match plan {
        MergePlan::Leaf(i) => Ok(cores[i - offset].clone()),
        MergePlan::Node(l, r) => {
            let left = merge_plan(g, cores, l, offset)?;
            let right = merge_plan(g, cores, r, offset)?;
            let nl = g.shape(&left).len();
            g.contract(&left, &[nl - 1], &right, &[0])
        }
    }
}

/// Balanced merge of a chain of `(R, I, R)` cores; an empty chain is the
/// `rank x rank` identity as a `(R, 1, R)` tensor.
pub fn merge_cores<G: Graph>(g: &mut G, cores: &[&G::V], rank: usize) -> Result<G::V> {
    if cores.is_empty() {
        let eye = DenseTensor::eye(rank)?.into_shape(&[rank, 1, rank])?;
        return Ok(g.constant(eye));
    }
    let plan = MergePlan::hierarchical(0, cores.len() - 1)?;
    merge_plan(g, cores, &plan, 0)
}

/// Direct evaluation with no recording.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type V = DenseTensor;

    fn constant(&mut self, t: DenseTensor) -> DenseTensor {
        t
    }

    fn shape<'a>(&'a self, x: &'a DenseTensor) -> &'a [usize] {
        x.shape()
    }

    fn contract(&mut self, a: &DenseTensor, aa: &[usize], b: &DenseTensor, ba: &[usize]) -> Result<DenseTensor> {
        contract(a, aa, b, ba)
    }

    fn reshape(&mut self, x: &DenseTensor, shape: &[usize]) -> Result<DenseTensor> {
        x.reshape(shape)
    }

    fn trace_ends(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        x.trace_ends()
    }

    fn bond_conv(&mut self, p: &DenseTensor, v: &DenseTensor, stride: usize, pad: usize) -> Result<DenseTensor> {
        bond_conv(p, v, stride, pad)
    }

    fn conv2d(&mut self, x: &DenseTensor, k: &DenseTensor, stride: usize, pad: usize) -> Result<DenseTensor> {
        nn::conv2d_batch(x, k, stride, pad)
    }

    fn add_bias(&mut self, x: &DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
        nn::add_bias(x, bias)
    }

    fn relu(&mut self, x: &DenseTensor) -> DenseTensor {
        nn::relu(x)
    }

    fn max_pool2(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(nn::max_pool2(x)?.0)
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Contract {
        a: Var,
        a_axes: Vec<usize>,
        b: Var,
        b_axes: Vec<usize>,
    },
    Reshape(Var),
    TraceEnds(Var),
    BondConv {
        p: Var,
        v: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    SumSquares(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        grad: DenseTensor,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: DenseTensor,
}

/// Ordered record of primitives and their outputs.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: DenseTensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        self.val(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Op::Sum(x), DenseTensor::scalar(s))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().map(|v| v * v).sum();
        self.push(Op::SumSquares(x), DenseTensor::scalar(s))
    }

    /// Mean softmax cross-entropy of `(B, C)` logits.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = nn::softmax_xent(self.val(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                grad,
            },
            DenseTensor::scalar(loss),
        ))
    }

    fn eval(&self, op: &Op, value: &dyn Fn(Var) -> DenseTensor) -> Result<DenseTensor> {
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Contract { a, a_axes, b, b_axes } => contract(&value(*a), a_axes, &value(*b), b_axes)?,
            Op::Reshape(x) => value(*x),
            Op::TraceEnds(x) => value(*x).trace_ends()?,
            Op::BondConv { p, v, stride, pad } => bond_conv(&value(*p), &value(*v), *stride, *pad)?,
            Op::Conv2d { x, k, stride, pad } => nn::conv2d_batch(&value(*x), &value(*k), *stride, *pad)?,
            Op::AddBias { x, bias } => nn::add_bias(&value(*x), &value(*bias))?,
            Op::Relu(x) => nn::relu(&value(*x)),
            Op::MaxPool2 { x, .. } => nn::max_pool2(&value(*x))?.0,
            Op::Sum(x) => DenseTensor::scalar(value(*x).sum()),
            Op::SumSquares(x) => DenseTensor::scalar(value(*x).data().iter().map(|v| v * v).sum()),
            Op::SoftmaxXent { logits, labels, .. } => DenseTensor::scalar(nn::softmax_xent(&value(*logits), labels)?.0),
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<DenseTensor>> {
        let mut out: Vec<DenseTensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let mut t = self.eval(op, &|v: Var| out[v.0].clone())?;
                    if matches!(op, Op::Reshape(_)) {
                        t = t.into_shape(node.value.shape())?;
                    }
                    t
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Adjoints of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseTensor::filled(self.val(loss).shape(), 1.0)?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut keep = None;
            let mut send = |v: Var, d: DenseTensor| -> Result<()> {
                if d.shape() != self.val(v).shape() {
                    return Err(Error::shape(format!(
                        "adjoint shape {:?} drifted from value shape {:?}",
                        d.shape(),
                        self.val(v).shape()
                    )));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => keep = Some(g),
                Op::Contract { a, a_axes, b, b_axes } => {
                    let (da, db) = contract_adjoints(self.val(*a), a_axes, self.val(*b), b_axes, &g)?;
                    send(*a, da)?;
                    send(*b, db)?;
                }
                Op::Reshape(x) => send(*x, g.into_shape(self.val(*x).shape())?)?,
                Op::TraceEnds(x) => send(*x, trace_ends_adjoint(self.val(*x).shape(), &g)?)?,
                Op::BondConv { p, v, stride, pad } => {
                    let (dp, dv) = bond_conv_backward(self.val(*p), self.val(*v), &g, *stride, *pad)?;
                    send(*p, dp)?;
                    send(*v, dv)?;
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (dx, dk) = nn::conv2d_batch_backward(self.val(*x), self.val(*k), &g, *stride, *pad)?;
                    send(*x, dx)?;
                    send(*k, dk)?;
                }
                Op::AddBias { x, bias } => {
                    send(*bias, nn::bias_grad(&g))?;
                    send(*x, g)?;
                }
                Op::Relu(x) => send(*x, nn::relu_backward(self.val(*x), &g))?,
                Op::MaxPool2 { x, argmax } => send(*x, nn::max_pool2_backward(self.val(*x).shape(), argmax, &g)?)?,
                Op::Sum(x) => {
                    let s = g.data()[0];
                    send(*x, DenseTensor::filled(self.val(*x).shape(), s)?)?
                }
                Op::SumSquares(x) => {
                    let s = g.data()[0];
                    send(*x, self.val(*x).scale(2.0 * s))?
                }
                Op::SoftmaxXent { logits, grad, .. } => send(*logits, grad.scale(g.data()[0]))?,
            }
            grads[i] = keep;
        }
        Ok(Gradients { grads })
    }
}

fn contract_adjoints(
    a: &DenseTensor,
    a_axes: &[usize],
    b: &DenseTensor,
    b_axes: &[usize],
    g: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let a_free: Vec<usize> = (0..a.ndim()).filter(|i| !a_axes.contains(i)).collect();
    let b_free: Vec<usize> = (0..b.ndim()).filter(|i| !b_axes.contains(i)).collect();
    let (nfa, nfb) = (a_free.len(), b_free.len());

    // dA: g's b-free modes against b's free modes. Result modes are a_free,
    // then b's contracted modes in ascending b order.
    let g_b: Vec<usize> = (nfa..nfa + nfb).collect();
    let raw_a = contract(g, &g_b, b, &b_free)?;
    let mut a_src: Vec<usize> = a_free.clone();
    let mut sorted_b = b_axes.to_vec();
    sorted_b.sort_unstable();
    for s in &sorted_b {
        let k = b_axes.iter().position(|x| x == s).unwrap();
        a_src.push(a_axes[k]);
    }
    let da = raw_a.permute(&inverse_positions(&a_src))?;

    let g_a: Vec<usize> = (0..nfa).collect();
    let raw_b = contract(a, &a_free, g, &g_a)?;
    let mut sorted_a = a_axes.to_vec();
    sorted_a.sort_unstable();
    let mut b_src: Vec<usize> = Vec::with_capacity(b.ndim());
    for s in &sorted_a {
        let k = a_axes.iter().position(|x| x == s).unwrap();
        b_src.push(b_axes[k]);
    }
    b_src.extend(&b_free);
    let db = raw_b.permute(&inverse_positions(&b_src))?;
    Ok((da, db))
}

/// `src[j]` names the original mode held at position `j`; returns the
/// permutation that restores original order.
fn inverse_positions(src: &[usize]) -> Vec<usize> {
    let mut perm = vec![0; src.len()];
    for (pos, &axis) in src.iter().enumerate() {
        perm[axis] = pos;
    }
    perm
}

fn trace_ends_adjoint(shape: &[usize], g: &DenseTensor) -> Result<DenseTensor> {
    let r = shape[0];
    let m = g.len();
    let mut out = DenseTensor::zeros(shape)?;
    let d = out.data_mut();
    for a in 0..r {
        for (j, &gv) in g.data().iter().enumerate() {
            d[(a * m + j) * r + a] = gv;
        }
    }
    Ok(out)
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, t: DenseTensor) -> Var {
        self.leaf(t)
    }

    fn shape<'a>(&'a self, x: &'a Var) -> &'a [usize] {
        self.val(*x).shape()
    }

    fn contract(&mut self, a: &Var, a_axes: &[usize], b: &Var, b_axes: &[usize]) -> Result<Var> {
        let v = contract(self.val(*a), a_axes, self.val(*b), b_axes)?;
        Ok(self.push(
            Op::Contract {
                a: *a,
                a_axes: a_axes.to_vec(),
                b: *b,
                b_axes: b_axes.to_vec(),
            },
            v,
        ))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(*x).reshape(shape)?;
        Ok(self.push(Op::Reshape(*x), v))
    }

    fn trace_ends(&mut self, x: &Var) -> Result<Var> {
        let v = self.val(*x).trace_ends()?;
        Ok(self.push(Op::TraceEnds(*x), v))
    }

    fn bond_conv(&mut self, p: &Var, v: &Var, stride: usize, pad: usize) -> Result<Var> {
        let out = bond_conv(self.val(*p), self.val(*v), stride, pad)?;
        Ok(self.push(
            Op::BondConv {
                p: *p,
                v: *v,
                stride,
                pad,
            },
            out,
        ))
    }

    fn conv2d(&mut self, x: &Var, k: &Var, stride: usize, pad: usize) -> Result<Var> {
        let out = nn::conv2d_batch(self.val(*x), self.val(*k), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                x: *x,
                k: *k,
                stride,
                pad,
            },
            out,
        ))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = nn::add_bias(self.val(*x), self.val(*bias))?;
        Ok(self.push(Op::AddBias { x: *x, bias: *bias }, out))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = nn::relu(self.val(*x));
        self.push(Op::Relu(*x), out)
    }

    fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let (out, argmax) = nn::max_pool2(self.val(*x))?;
        Ok(self.push(Op::MaxPool2 { x: *x, argmax }, out))
    }
}

/// Adjoints of the tape's leaves.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` does not reach the loss.
    pub fn wrt(&self, v: Var, like: &DenseTensor) -> DenseTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseTensor::zeros(like.shape()).expect("valid shape"))
    }
}

/// One sampled coordinate of a finite-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct FdSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub max_rel_err: f64,
    pub samples: Vec<FdSample>,
}

/// Compares `grads` against central differences of `loss` at `sample_count`
/// coordinates drawn uniformly from all parameters without replacement.
///
/// Relative error is `|a - n| / (max(|a|, |n|) + 1e-12)`.
pub fn finite_diff_check(
    params: &[DenseTensor],
    grads: &[DenseTensor],
    mut loss: impl FnMut(&[DenseTensor]) -> Result<f64>,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<FdReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::shape("gradients do not match parameters"));
    }
    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(DenseTensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, sample_count.min(total));
    let mut work = params.to_vec();
    let mut samples = Vec::with_capacity(picks.len());
    for flat in picks {
        let param = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[param];
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + h;
        let up = loss(&work)?;
        work[param].data_mut()[index] = orig - h;
        let down = loss(&work)?;
        work[param].data_mut()[index] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at parameter {param}[{index}]")));
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[param].data()[index];
        let rel_err = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-12);
        samples.push(FdSample {
            param,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        h,
        max_rel_err,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::gaussian_ring;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn contract_adjoint_matches_fd_for_scrambled_axes() {
        let mut r = rng(1);
        let a = DenseTensor::random_normal(&[2, 3, 4], 1.0, &mut r).unwrap();
        let b = DenseTensor::random_normal(&[4, 5, 3], 1.0, &mut r).unwrap();
        let w = DenseTensor::random_normal(&[2, 5], 1.0, &mut r).unwrap();
        let f = |p: &[DenseTensor]| -> Result<(f64, Vec<DenseTensor>)> {
            let mut t = Tape::new();
            let (va, vb, vw) = (t.leaf(p[0].clone()), t.leaf(p[1].clone()), t.leaf(w.clone()));
            let c = t.contract(&va, &[2, 1], &vb, &[0, 2])?;
            let y = t.contract(&c, &[0, 1], &vw, &[0, 1])?;
            let g = t.backward(y)?;
            Ok((t.value(y).data()[0], vec![g.wrt(va, &p[0]), g.wrt(vb, &p[1])]))
        };
        let params = vec![a, b];
        let (_, grads) = f(&params).unwrap();
        let rep = finite_diff_check(&params, &grads, |p| Ok(f(p)?.0), 1e-5, 30, 0).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn sum_of_construct_matches_closed_form() {
        // d(sum X)/dU_k[a,i,b] = sum over the other modes of the complement
        // chain entry [b, ..., a].
        let ring = gaussian_ring(&[2, 2, 2], 2, 1.0, 5).unwrap();
        let mut t = Tape::new();
        let vars: Vec<Var> = ring.core_tensors().map(|c| t.leaf(c.clone())).collect();
        let refs: Vec<&Var> = vars.iter().collect();
        let full = merge_cores(&mut t, &refs, 2).unwrap();
        let x = t.trace_ends(&full).unwrap();
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        for k in 0..3 {
            let summed: Vec<DenseTensor> = ring
                .core_tensors()
                .map(|c| {
                    // sum out the physical mode: (R, I, R) -> (R, 1, R)
                    let ones = DenseTensor::filled(&[c.shape()[1]], 1.0).unwrap();
                    contract(c, &[1], &ones, &[0]).unwrap().into_shape(&[2, 1, 2]).unwrap()
                })
                .collect();
            let others: Vec<DenseTensor> = (1..3).map(|s| summed[(k + s) % 3].clone()).collect();
            let comp = crate::ring::merge_chain(&others, 2)
                .unwrap()
                .into_shape(&[2, 2])
                .unwrap();
            let got = g.get(vars[k]).unwrap();
            for a in 0..2 {
                for i in 0..2 {
                    for b in 0..2 {
                        let want = comp.get(&[b, a]).unwrap();
                        assert!((got.get(&[a, i, b]).unwrap() - want).abs() < 1e-12 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_fd_is_tight() {
        let p = vec![DenseTensor::random_normal(&[2, 3, 2], 1.0, &mut rng(2)).unwrap()];
        let f = |p: &[DenseTensor]| -> Result<(f64, Vec<DenseTensor>)> {
            let mut t = Tape::new();
            let v = t.leaf(p[0].clone());
            let l = t.sum_squares(v);
            let g = t.backward(l)?;
            Ok((t.value(l).data()[0], vec![g.wrt(v, &p[0])]))
        };
        let (_, g) = f(&p).unwrap();
        let rep = finite_diff_check(&p, &g, |q| Ok(f(q)?.0), 1e-5, 12, 1).unwrap();
        assert!(rep.max_rel_err <= 1e-9, "{rep:?}");
        assert_eq!(rep.samples.len(), 12);
        assert!(finite_diff_check(&p, &g, |q| Ok(f(q)?.0), 0.0, 1, 1).is_err());
    }

    #[test]
    fn replay_is_bit_exact_and_backward_needs_scalar() {
        let mut r = rng(3);
        let mut t = Tape::new();
        let x = t.leaf(DenseTensor::random_normal(&[2, 4, 4, 2], 1.0, &mut r).unwrap());
        let k = t.leaf(DenseTensor::random_normal(&[3, 3, 2, 2], 1.0, &mut r).unwrap());
        let y = t.conv2d(&x, &k, 1, 1).unwrap();
        let y = t.relu(&y);
        let y = t.max_pool2(&y).unwrap();
        let b = t.leaf(DenseTensor::filled(&[8], 0.1).unwrap());
        let y = t.reshape(&y, &[2, 8]).unwrap();
        let y = t.add_bias(&y, &b).unwrap();
        let l = t.softmax_xent(y, &[1, 7]).unwrap();
        let again = t.replay().unwrap();
        for (i, v) in again.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)));
        }
        assert!(t.backward(y).is_err());
        assert!(t.backward(l).is_ok());
    }
}
