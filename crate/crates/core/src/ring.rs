//! Tensor rings: cores, merging, reconstruction, ALS fitting and
//! variance-calibrated random initialization.
//!
//! A ring of `d` cores `U_i` of shape `(R_{i-1}, I_i, R_i)` (indices taken
//! cyclically) represents the tensor
//!
//! ```text
//! X[i_1, ..., i_d] = sum_{r} U_1[r_d, i_1, r_1] U_2[r_1, i_2, r_2] ... U_d[r_{d-1}, i_d, r_d]
//! ```

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::planner::MergePlan;
use crate::tensor::{contract, DenseTensor};

/// One 3-mode core `(left_rank, mode_size, right_rank)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrCore {
    data: DenseTensor,
}

impl TrCore {
    pub fn new(data: DenseTensor) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Ring(format!(
                "core must have 3 modes, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn left_rank(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn mode_size(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn right_rank(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut DenseTensor {
        &mut self.data
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.data
    }
}

/// An ordered ring of cores whose bond ranks close up.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRing {
    cores: Vec<TrCore>,
}

impl TensorRing {
    pub fn new(cores: Vec<TrCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Ring("a ring needs at least one core".into()));
        }
        let d = cores.len();
        for i in 0..d {
            let next = (i + 1) % d;
            if cores[i].right_rank() != cores[next].left_rank() {
                return Err(Error::Ring(format!(
                    "bond between core {i} (right rank {}) and core {next} (left rank {}) does not match",
                    cores[i].right_rank(),
                    cores[next].left_rank()
                )));
            }
        }
        Ok(Self { cores })
    }

    pub fn from_tensors(tensors: Vec<DenseTensor>) -> Result<Self> {
        Self::new(tensors.into_iter().map(TrCore::new).collect::<Result<_>>()?)
    }

    pub fn zeros(shape: &[usize], rank: usize) -> Result<Self> {
        Self::from_tensors(
            shape
                .iter()
                .map(|&n| DenseTensor::zeros(&[rank, n, rank]))
                .collect::<Result<_>>()?,
        )
    }

    pub fn cores(&self) -> &[TrCore] {
        &self.cores
    }

    pub fn core_tensors(&self) -> impl Iterator<Item = &DenseTensor> {
        self.cores.iter().map(TrCore::tensor)
    }

    pub fn core_mut(&mut self, i: usize) -> &mut TrCore {
        &mut self.cores[i]
    }

    /// Replaces core `i`; the replacement must keep the bond ranks.
    pub fn set_core(&mut self, i: usize, data: DenseTensor) -> Result<()> {
        if data.shape() != self.cores[i].tensor().shape() {
            return Err(Error::Ring(format!(
                "replacement core {:?} does not match {:?}",
                data.shape(),
                self.cores[i].tensor().shape()
            )));
        }
        self.cores[i] = TrCore::new(data)?;
        Ok(())
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cores.iter().map(TrCore::mode_size).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.cores.iter().map(TrCore::left_rank).collect()
    }

    /// Rank when every bond has the same size.
    pub fn uniform_rank(&self) -> Option<usize> {
        let r = self.cores[0].left_rank();
        self.cores
            .iter()
            .all(|c| c.left_rank() == r && c.right_rank() == r)
            .then_some(r)
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.tensor().len()).sum()
    }

    /// Embeds every bond into a larger rank. The original cores occupy the
    /// leading block and new entries are `N(0, noise_std^2)`; with zero noise
    /// the represented tensor is unchanged.
    pub fn padded(&self, new_rank: usize, noise_std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = self
            .cores
            .iter()
            .map(|c| {
                let (ra, n, rb) = (c.left_rank(), c.mode_size(), c.right_rank());
                if ra > new_rank || rb > new_rank {
                    return Err(Error::Ring(format!("cannot pad rank {ra}x{rb} down to {new_rank}")));
                }
                let noise = DenseTensor::random_normal(&[new_rank, n, new_rank], noise_std, &mut rng)?;
                DenseTensor::from_fn(&[new_rank, n, new_rank], |ix| {
                    if ix[0] < ra && ix[2] < rb {
                        c.tensor().get(ix).unwrap()
                    } else {
                        noise.get(ix).unwrap()
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(cores)
    }

    /// Ring with the cores shifted left by `k` places.
    pub fn rotated(&self, k: usize) -> Self {
        let d = self.cores.len();
        Self {
            cores: (0..d).map(|i| self.cores[(i + k) % d].clone()).collect(),
        }
    }

    /// Merges cores `first..=last` (0-based, inclusive) into a tensor of shape
    /// `(R_left, I_first, ..., I_last, R_right)`.
    ///
    /// Contractions follow `plan` when given, otherwise the balanced plan. A
    /// single-core range returns that core.
    pub fn merge(&self, first: usize, last: usize, plan: Option<&MergePlan>) -> Result<DenseTensor> {
        let d = self.cores.len();
        if first > last || last >= d {
            return Err(Error::Ring(format!(
                "merge range {first}..={last} invalid for {d} cores"
            )));
        }
        let default;
        let plan = match plan {
            Some(p) => {
                p.validate(first, last)?;
                p
            }
            None => {
                default = MergePlan::hierarchical(first, last)?;
                &default
            }
        };
        merge_tree(&|i| self.cores[i].tensor(), plan)
    }

    /// Dense tensor `(I_1, ..., I_d)` represented by the ring.
    ///
    /// The bond trace is fused into the root merge, which contracts both bonds
    /// between the two halves at once.
    pub fn construct(&self) -> Result<DenseTensor> {
        self.construct_with_plan(None)
    }

    pub fn construct_with_plan(&self, plan: Option<&MergePlan>) -> Result<DenseTensor> {
        let d = self.cores.len();
        let default;
        let plan = match plan {
            Some(p) => {
                p.validate(0, d - 1)?;
                p
            }
            None => {
                default = MergePlan::hierarchical(0, d - 1)?;
                &default
            }
        };
        match plan {
            MergePlan::Leaf(i) => self.cores[*i].tensor().trace_ends(),
            MergePlan::Node(l, r) => {
                let left = merge_tree(&|i| self.cores[i].tensor(), l)?;
                let right = merge_tree(&|i| self.cores[i].tensor(), r)?;
                let (nl, nr) = (left.ndim(), right.ndim());
                contract(&left, &[nl - 1, 0], &right, &[0, nr - 1])
            }
        }
    }
}

fn merge_tree<'a>(core: &dyn Fn(usize) -> &'a DenseTensor, plan: &MergePlan) -> Result<DenseTensor> {
    match plan {
        MergePlan::Leaf(i) => Ok(core(*i).clone()),
        MergePlan::Node(l, r) => {
            let left = merge_tree(core, l)?;
            let right = merge_tree(core, r)?;
            contract(&left, &[left.ndim() - 1], &right, &[0])
        }
    }
}

/// Merges a standalone chain of 3-mode tensors with the balanced plan.
/// An empty chain yields the `rank x rank` identity.
pub fn merge_chain(tensors: &[DenseTensor], rank: usize) -> Result<DenseTensor> {
    if tensors.is_empty() {
        return DenseTensor::eye(rank);
    }
    let plan = MergePlan::hierarchical(0, tensors.len() - 1)?;
    merge_tree(&|i| &tensors[i], &plan)
}

/// Parameters of the variance-calibrated initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    /// Parameter count of the uncompressed layer.
    pub uncompressed_params: usize,
    /// Desired standard deviation of the constructed entries; `sqrt(2/N)` when unset.
    pub target_std: Option<f64>,
}

impl InitSpec {
    pub fn for_params(n: usize) -> Self {
        Self {
            uncompressed_params: n,
            target_std: None,
        }
    }

    pub fn target_std(&self) -> Result<f64> {
        if self.uncompressed_params == 0 {
            return Err(Error::invalid("uncompressed parameter count must be positive"));
        }
        let v = self
            .target_std
            .unwrap_or_else(|| (2.0 / self.uncompressed_params as f64).sqrt());
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("target std must be positive, got {v}")));
        }
        Ok(v)
    }

    /// Per-core standard deviation that gives constructed entries the target std.
    pub fn core_std(&self, num_cores: usize, rank: usize) -> Result<f64> {
        if num_cores == 0 || rank == 0 {
            return Err(Error::invalid("need at least one core and rank >= 1"));
        }
        let v = self.target_std()?;
        Ok(core_std_for(v * v, num_cores, rank))
    }
}

/// Variance of an entry built from `num_cores` i.i.d. `N(0, std^2)` cores.
///
/// Each constructed entry sums `R^d` products of `d` independent entries, and
/// distinct products are uncorrelated, so the variance is `R^d std^(2d)`.
/// An open merge (no trace) sums `R^(d-1)` paths instead.
pub fn propagated_variance(core_std: f64, num_cores: usize, rank: usize, traced: bool) -> f64 {
    let paths = if traced { num_cores } else { num_cores - 1 };
    (rank as f64).powi(paths as i32) * core_std.powi(2 * num_cores as i32)
}

/// Inverse of [`propagated_variance`] for a traced ring.
pub fn core_std_for(target_variance: f64, num_cores: usize, rank: usize) -> f64 {
    (target_variance / (rank as f64).powi(num_cores as i32)).powf(1.0 / (2.0 * num_cores as f64))
}

/// Ring with i.i.d. Gaussian cores at uniform rank, calibrated by `init`.
///
/// Core `i` draws from its own ChaCha stream of `seed`, so each core is
/// reproducible independently of the others.
pub fn random_init(shape: &[usize], rank: usize, init: &InitSpec, seed: u64) -> Result<TensorRing> {
    if shape.is_empty() || rank == 0 {
        return Err(Error::invalid("random_init needs at least one mode and rank >= 1"));
    }
    let std = init.core_std(shape.len(), rank)?;
    gaussian_ring(shape, rank, std, seed)
}

pub fn gaussian_ring(shape: &[usize], rank: usize, std: f64, seed: u64) -> Result<TensorRing> {
    let cores = shape
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            DenseTensor::random_normal(&[rank, n, rank], std, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    TensorRing::from_tensors(cores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlsOptions {
    pub max_sweeps: usize,
    /// Stop once a sweep improves the relative fit error by less than this.
    pub tol: f64,
    pub seed: u64,
    /// Independent random starts; the best fit is kept.
    pub restarts: usize,
    /// Skip remaining starts once a fit at or below this error is found.
    pub target_fit: f64,
    /// Fit ranks `1..=rank` in turn, warm-starting each from the previous
    /// best, and stop at the first rank that reaches `target_fit`. The result
    /// is zero-padded up to the requested rank, which leaves it unchanged.
    pub rank_continuation: bool,
    /// After each sweep, also try stepping further along the sweep's update
    /// direction and keep that point if it fits better.
    pub line_search: bool,
    /// When ALS stalls above `target_fit`, continue with damped Gauss-Newton
    /// steps on all cores at once (small problems only).
    pub gauss_newton: bool,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 100,
            tol: 1e-10,
            seed: 0,
            restarts: 1,
            target_fit: 0.0,
            rank_continuation: false,
            line_search: true,
            gauss_newton: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub ring: TensorRing,
    /// `||x - construct(ring)|| / ||x||`, or the absolute norm when `x` is zero.
    pub fit_error: f64,
    /// Fit error before the first sweep followed by the error after each sweep.
    pub history: Vec<f64>,
    /// Number of core updates that needed a ridge term.
    pub ridge_retries: usize,
}

fn fit_error(x: &DenseTensor, ring: &TensorRing, x_norm: f64) -> Result<f64> {
    let diff = ring.construct()?.sub(x)?.norm();
    Ok(if x_norm > 0.0 { diff / x_norm } else { diff })
}

/// Fits a uniform-rank ring to `x` (one core per mode of `x`) by alternating
/// least squares.
///
/// Each step solves for one core exactly against the merged complement of the
/// other cores, so the fit error never increases beyond roundoff.
pub fn decompose(x: &DenseTensor, rank: usize, opts: &AlsOptions) -> Result<Decomposition> {
    if rank == 0 || x.ndim() == 0 {
        return Err(Error::invalid("decompose needs rank >= 1 and at least one mode"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("input tensor".into()));
    }
    let shape = x.shape().to_vec();
    let d = shape.len();
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Ok(Decomposition {
            ring: TensorRing::zeros(&shape, rank)?,
            fit_error: 0.0,
            history: vec![0.0],
            ridge_retries: 0,
        });
    }
    let mean_sq = x_norm * x_norm / x.len() as f64;
    let ranks: Vec<usize> = if opts.rank_continuation {
        (1..=rank).collect()
    } else {
        vec![rank]
    };
    let mut best: Option<Decomposition> = None;
    for &r in &ranks {
        let mut starts = Vec::new();
        if let Some(prev) = &best {
            let scale = prev.ring.core_tensors().map(DenseTensor::max_abs).fold(0.0, f64::max);
            starts.push(prev.ring.padded(r, 1e-3 * scale, opts.seed ^ r as u64)?);
        }
        for attempt in 0..opts.restarts.max(1) {
            let seed = opts
                .seed
                .wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .wrapping_add(r as u64);
            starts.push(gaussian_ring(&shape, r, core_std_for(mean_sq, d, r), seed)?);
        }
        for start in starts {
            let dec = decompose_from(x, start, opts)?;
            if best
                .as_ref()
                .is_none_or(|b| dec.fit_error < b.fit_error || b.ring.uniform_rank() != Some(r))
            {
                best = Some(dec);
            }
            if best.as_ref().unwrap().fit_error <= opts.target_fit {
                break;
            }
        }
        if best.as_ref().unwrap().fit_error <= opts.target_fit {
            break;
        }
    }
    let mut best = best.expect("at least one start");
    if best.ring.uniform_rank() != Some(rank) {
        best.ring = best.ring.padded(rank, 0.0, 0)?;
    }
    Ok(best)
}

/// Runs ALS sweeps on `x` starting from `ring`.
pub fn decompose_from(x: &DenseTensor, mut ring: TensorRing, opts: &AlsOptions) -> Result<Decomposition> {
    let shape = x.shape().to_vec();
    let d = shape.len();
    if ring.shape() != shape {
        return Err(Error::shape(format!(
            "starting ring has modes {:?}, tensor has {shape:?}",
            ring.shape()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("input tensor".into()));
    }
    let x_norm = x.norm();

    // Mode-k unfoldings of x are fixed for the whole run.
    let unfoldings = (0..d)
        .map(|k| {
            let perm: Vec<usize> = (0..d).map(|j| (k + j) % d).collect();
            let xp = x.permute(&perm)?;
            xp.into_shape(&[shape[k], x.len() / shape[k]])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut history = vec![fit_error(x, &ring, x_norm)?];
    let mut ridge_retries = 0;
    for sweep in 0..opts.max_sweeps {
        let before = ring.clone();
        for (k, unfolding) in unfoldings.iter().enumerate() {
            let (core, ridged) = solve_core(&ring, k, unfolding)?;
            ridge_retries += usize::from(ridged);
            ring.set_core(k, core)?;
        }
        let mut err = fit_error(x, &ring, x_norm)?;
        if opts.line_search && sweep > 0 {
            let alpha = ((sweep + 1) as f64).cbrt();
            let jumped = extrapolate(&before, &ring, alpha)?;
            let jumped_err = fit_error(x, &jumped, x_norm)?;
            if jumped_err < err {
                ring = jumped;
                err = jumped_err;
            }
        }
        let prev = *history.last().unwrap();
        history.push(err);
        if prev - err < opts.tol {
            break;
        }
    }
    let last = *history.last().unwrap();
    if opts.gauss_newton && last > opts.target_fit && x.len().saturating_mul(ring.param_count().pow(2)) <= GN_MAX_WORK {
        ring = gauss_newton(x, ring, &unfoldings, x_norm, opts, &mut history)?;
    }
    Ok(Decomposition {
        fit_error: *history.last().unwrap(),
        ring,
        history,
        ridge_retries,
    })
}

/// `next + alpha (next - prev)`, core by core.
fn extrapolate(prev: &TensorRing, next: &TensorRing, alpha: f64) -> Result<TensorRing> {
    let cores = prev
        .core_tensors()
        .zip(next.core_tensors())
        .map(|(p, n)| n.add(&n.sub(p)?.scale(alpha)))
        .collect::<Result<Vec<_>>>()?;
    TensorRing::from_tensors(cores)
}

/// Largest `entries * parameters^2` (the cost of one normal-equation build)
/// for which Gauss-Newton polishing runs.
const GN_MAX_WORK: usize = 1 << 28;

/// Flat index into `x` of each entry of its mode-`k` unfolding, row-major.
fn unfolding_index(shape: &[usize], k: usize) -> Result<Vec<usize>> {
    let d = shape.len();
    let flat = DenseTensor::from_fn(shape, |ix| {
        ix.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i) as f64
    })?;
    let perm: Vec<usize> = (0..d).map(|j| (k + j) % d).collect();
    Ok(flat.permute(&perm)?.data().iter().map(|&v| v as usize).collect())
}

/// Levenberg-Marquardt on all cores jointly. Only steps that lower the fit
/// error are taken, so `history` stays non-increasing.
fn gauss_newton(
    x: &DenseTensor,
    mut ring: TensorRing,
    unfoldings: &[DenseTensor],
    x_norm: f64,
    opts: &AlsOptions,
    history: &mut Vec<f64>,
) -> Result<TensorRing> {
    let shape = x.shape().to_vec();
    let d = shape.len();
    let n = x.len();
    let index = (0..d).map(|k| unfolding_index(&shape, k)).collect::<Result<Vec<_>>>()?;
    let mut err = *history.last().unwrap();
    let mut mu = 1e-3;
    for _ in 0..opts.max_sweeps {
        if err <= opts.target_fit {
            break;
        }
        let p = ring.param_count();
        let mut jac = DMatrix::<f64>::zeros(n, p);
        let mut offset = 0;
        for k in 0..d {
            let core = ring.cores()[k].tensor();
            let (ra, ik, rb) = (core.shape()[0], core.shape()[1], core.shape()[2]);
            let j = unfoldings[k].shape()[1];
            let g = complement(&ring, k, j)?;
            let gd = g.data();
            for i in 0..ik {
                for jj in 0..j {
                    let row = index[k][i * j + jj];
                    for a in 0..ra {
                        for b in 0..rb {
                            jac[(row, offset + (a * ik + i) * rb + b)] = gd[(a * rb + b) * j + jj];
                        }
                    }
                }
            }
            offset += core.len();
        }
        let resid = DMatrix::from_row_slice(n, 1, ring.construct()?.sub(x)?.data());
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * resid;
        let scale = (0..p).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut improved = false;
        while mu < 1e12 {
            let mut damped = jtj.clone();
            for i in 0..p {
                damped[(i, i)] += mu * (jtj[(i, i)] + 1e-9 * scale);
            }
            let Some(chol) = nalgebra::Cholesky::new(damped) else {
                mu *= 4.0;
                continue;
            };
            let step = chol.solve(&grad);
            let mut at = 0;
            let cores = ring
                .core_tensors()
                .map(|c| {
                    let mut c = c.clone();
                    for v in c.data_mut() {
                        *v -= step[(at, 0)];
                        at += 1;
                    }
                    c
                })
                .collect();
            let trial = TensorRing::from_tensors(cores)?;
            let trial_err = fit_error(x, &trial, x_norm)?;
            if trial_err < err {
                ring = trial;
                err = trial_err;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                break;
            }
            mu *= 4.0;
        }
        let prev = *history.last().unwrap();
        if improved {
            history.push(err);
        }
        if !improved || prev - err < opts.tol {
            break;
        }
    }
    Ok(ring)
}

const REFINE_STEPS: usize = 4;

/// Complement of core `k` as an `(R_{k-1} R_k, J)` matrix, so that the mode-`k`
/// unfolding of the ring equals `U_k(I_k, R_{k-1} R_k) * G`.
fn complement(ring: &TensorRing, k: usize, j: usize) -> Result<DenseTensor> {
    let d = ring.num_cores();
    let core = ring.cores()[k].tensor();
    let (ra, rb) = (core.shape()[0], core.shape()[2]);
    // cores k+1, ..., k-1 in ring order give C[b, j, a]
    let rest: Vec<DenseTensor> = (1..d).map(|s| ring.cores()[(k + s) % d].tensor().clone()).collect();
    if rest.is_empty() {
        // x[i] = sum_a U[a, i, a]
        return DenseTensor::eye(ra)?.into_shape(&[ra * rb, 1]);
    }
    let c = merge_chain(&rest, rb)?.into_shape(&[rb, j, ra])?;
    c.permute(&[2, 0, 1])?.into_shape(&[ra * rb, j])
}

/// Least-squares update of core `k`. Returns the new core and whether a ridge
/// term was needed.
fn solve_core(ring: &TensorRing, k: usize, xk: &DenseTensor) -> Result<(DenseTensor, bool)> {
    let core = ring.cores()[k].tensor();
    let (ra, ik, rb) = (core.shape()[0], core.shape()[1], core.shape()[2]);
    let j = xk.shape()[1];

    let g = complement(ring, k, j)?;
    let n = ra * rb;
    let a = contract(&g, &[1], &g, &[1])?; // (n, n)
    let bt = contract(&g, &[1], xk, &[1])?; // (n, ik)

    let am = DMatrix::from_row_slice(n, n, a.data());
    let bm = DMatrix::from_row_slice(n, ik, bt.data());
    let trace = am.trace();
    if trace == 0.0 {
        return Ok((DenseTensor::zeros(&[ra, ik, rb])?, false));
    }

    let well_conditioned = |m: &DMatrix<f64>| {
        nalgebra::Cholesky::new(m.clone()).filter(|ch| {
            let l = ch.l_dirty();
            let diag: Vec<f64> = (0..n).map(|i| l[(i, i)].abs()).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            min * min > 1e-14 * max * max
        })
    };
    let sol = match well_conditioned(&am) {
        Some(ch) => (ch.solve(&bm), false),
        None => {
            // Ridge solve followed by iterative refinement, which converges to
            // the minimum-norm least-squares solution and keeps sweeps monotone.
            let mut ridge = am.clone();
            for i in 0..n {
                ridge[(i, i)] += 1e-10 * trace;
            }
            let chol = nalgebra::Cholesky::new(ridge).ok_or(Error::Singular { core: k })?;
            let mut sol = chol.solve(&bm);
            for _ in 0..REFINE_STEPS {
                let resid = &bm - &am * &sol;
                sol += chol.solve(&resid);
            }
            (sol, true)
        }
    };
    let (sol, ridged) = sol; // (n, ik) = U^T with rows (a, b)
    let mut flat = Vec::with_capacity(n * ik);
    for row in 0..n {
        for col in 0..ik {
            flat.push(sol[(row, col)]);
        }
    }
    let ut = DenseTensor::new(vec![ra, rb, ik], flat)?;
    Ok((ut.permute(&[0, 2, 1])?, ridged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops;
    use crate::planner::{construct_macs, cost_plan, enumerate_plans};

    /// Direct evaluation of the ring sum over all bond tuples.
    fn brute_construct(ring: &TensorRing) -> DenseTensor {
        let shape = ring.shape();
        let ranks = ring.ranks();
        let d = shape.len();
        DenseTensor::from_fn(&shape, |ix| {
            let total: usize = ranks.iter().product();
            let mut sum = 0.0;
            for flat in 0..total {
                // r[i] is the left bond of core i
                let mut r = vec![0; d];
                let mut f = flat;
                for i in (0..d).rev() {
                    r[i] = f % ranks[i];
                    f /= ranks[i];
                }
                let mut prod = 1.0;
                for i in 0..d {
                    let right = r[(i + 1) % d];
                    prod *= ring.cores()[i].tensor().get(&[r[i], ix[i], right]).unwrap();
                }
                sum += prod;
            }
            sum
        })
        .unwrap()
    }

    #[test]
    fn construct_matches_brute_force() {
        for seed in 0..10 {
            let ring = gaussian_ring(&[2, 3, 2], 2, 1.0, seed).unwrap();
            let c = ring.construct().unwrap();
            assert!(c.max_abs_diff(&brute_construct(&ring)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn construct_nonuniform_ranks() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let ring = TensorRing::from_tensors(vec![
            DenseTensor::random_normal(&[2, 3, 3], 1.0, &mut g).unwrap(),
            DenseTensor::random_normal(&[3, 2, 1], 1.0, &mut g).unwrap(),
            DenseTensor::random_normal(&[1, 4, 2], 1.0, &mut g).unwrap(),
        ])
        .unwrap();
        let c = ring.construct().unwrap();
        assert!(c.max_abs_diff(&brute_construct(&ring)).unwrap() <= 1e-12);
        assert_eq!(ring.param_count(), 18 + 6 + 8);
    }

    #[test]
    fn ring_closure_enforced() {
        let bad = TensorRing::from_tensors(vec![
            DenseTensor::zeros(&[2, 3, 3]).unwrap(),
            DenseTensor::zeros(&[3, 2, 1]).unwrap(),
        ]);
        assert!(matches!(bad, Err(Error::Ring(_))));
    }

    #[test]
    fn single_core_construct_is_trace() {
        let ring = gaussian_ring(&[4], 3, 1.0, 1).unwrap();
        let c = ring.construct().unwrap();
        let core = ring.cores()[0].tensor();
        for i in 0..4 {
            let want: f64 = (0..3).map(|r| core.get(&[r, i, r]).unwrap()).sum();
            assert!((c.get(&[i]).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_is_outer_product() {
        let ring = gaussian_ring(&[2, 3, 4], 1, 1.0, 5).unwrap();
        let c = ring.construct().unwrap();
        let v: Vec<&DenseTensor> = ring.core_tensors().collect();
        for a in 0..2 {
            for b in 0..3 {
                for e in 0..4 {
                    let want = v[0].data()[a] * v[1].data()[b] * v[2].data()[e];
                    assert!((c.get(&[a, b, e]).unwrap() - want).abs() < 1e-14);
                }
            }
        }
        let ones = TensorRing::from_tensors(vec![DenseTensor::filled(&[1, 3, 1], 1.0).unwrap(); 3]).unwrap();
        assert!(ones.merge(0, 2, None).unwrap().data().iter().all(|&x| x == 1.0));
        assert_eq!(
            TensorRing::zeros(&[2, 2], 3).unwrap().construct().unwrap().max_abs(),
            0.0
        );
    }

    #[test]
    fn two_core_merge_matches_loops() {
        let ring = gaussian_ring(&[3, 4], 2, 1.0, 9).unwrap();
        let m = ring.merge(0, 1, None).unwrap();
        assert_eq!(m.shape(), &[2, 3, 4, 2]);
        let (u, v) = (ring.cores()[0].tensor(), ring.cores()[1].tensor());
        for a in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    for b in 0..2 {
                        let want: f64 = (0..2)
                            .map(|k| u.get(&[a, i, k]).unwrap() * v.get(&[k, j, b]).unwrap())
                            .sum();
                        assert!((m.get(&[a, i, j, b]).unwrap() - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn merge_is_plan_independent() {
        let ring = gaussian_ring(&[3, 3, 3, 3], 2, 1.0, 11).unwrap();
        let reference = ring.merge(0, 3, Some(&MergePlan::sequential(0, 3).unwrap())).unwrap();
        for plan in enumerate_plans(4).unwrap() {
            let m = ring.merge(0, 3, Some(&plan)).unwrap();
            assert!(m.rel_err(&reference).unwrap() <= 1e-12);
        }
        let c0 = ring.construct().unwrap();
        for plan in enumerate_plans(4).unwrap() {
            let c = ring.construct_with_plan(Some(&plan)).unwrap();
            assert!(c.rel_err(&c0).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn merge_errors() {
        let ring = gaussian_ring(&[2, 2, 2], 2, 1.0, 0).unwrap();
        assert!(ring.merge(2, 1, None).is_err());
        assert!(ring.merge(0, 3, None).is_err());
        let wrong = MergePlan::sequential(0, 1).unwrap();
        assert!(ring.merge(0, 2, Some(&wrong)).is_err());
    }

    #[test]
    fn measured_merge_macs_match_plan_cost() {
        let ring = gaussian_ring(&[2, 2, 2], 2, 1.0, 0).unwrap();
        let plan = MergePlan::sequential(0, 2).unwrap();
        let (_, macs) = flops::measure(|| ring.merge(0, 2, Some(&plan)).unwrap());
        assert_eq!(macs, cost_plan(&[2, 2, 2], 2, &plan).unwrap().macs);
        let (_, macs) = flops::measure(|| ring.construct_with_plan(Some(&plan)).unwrap());
        assert_eq!(macs, construct_macs(&[2, 2, 2], 2, &plan).unwrap());
    }

    #[test]
    fn rotation_permutes_modes() {
        let ring = gaussian_ring(&[2, 3, 4], 2, 1.0, 4).unwrap();
        let c = ring.construct().unwrap();
        let rc = ring.rotated(1).construct().unwrap();
        // rotated modes are (I_2, I_3, I_1)
        let want = c.permute(&[1, 2, 0]).unwrap();
        assert!(rc.rel_err(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_param_count() {
        let ring = gaussian_ring(&[4, 7, 4, 7], 3, 1.0, 0).unwrap();
        assert_eq!(ring.param_count(), 9 * 22);
        assert_eq!(ring.uniform_rank(), Some(3));
    }

    #[test]
    fn rank_one_two_core_std_is_sqrt_target() {
        let spec = InitSpec {
            uncompressed_params: 10,
            target_std: Some(0.25),
        };
        assert!((spec.core_std(2, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(InitSpec::for_params(0).core_std(2, 2).is_err());
        assert!(random_init(&[], 2, &InitSpec::for_params(4), 0).is_err());
    }

    #[test]
    fn random_init_is_reproducible() {
        let spec = InitSpec::for_params(100);
        let a = random_init(&[3, 4], 2, &spec, 42).unwrap();
        let b = random_init(&[3, 4], 2, &spec, 42).unwrap();
        let c = random_init(&[3, 4], 2, &spec, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_tensor_decomposes_exactly() {
        let x = DenseTensor::zeros(&[2, 3, 2]).unwrap();
        let dec = decompose(&x, 2, &AlsOptions::default()).unwrap();
        assert_eq!(dec.fit_error, 0.0);
    }

    #[test]
    fn decompose_rejects_non_finite() {
        let x = DenseTensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            decompose(&x, 1, &AlsOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    fn robust() -> AlsOptions {
        AlsOptions {
            max_sweeps: 500,
            restarts: 10,
            target_fit: 1e-9,
            ..Default::default()
        }
    }

    #[test]
    fn planted_ring_recovered() {
        let planted = gaussian_ring(&[4, 4, 4, 4], 3, 1.0, 100).unwrap();
        let x = planted.construct().unwrap();
        let dec = decompose(&x, 3, &AlsOptions { seed: 1, ..robust() }).unwrap();
        assert!(dec.fit_error <= 1e-6, "fit {}", dec.fit_error);
        for w in dec.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", dec.history);
        }
        let back = dec.ring.construct().unwrap();
        assert!(back.sub(&x).unwrap().norm() / x.norm() <= 1e-6);
    }

    #[test]
    fn overparameterized_fit_is_exact() {
        let planted = gaussian_ring(&[4, 4, 4, 4], 2, 1.0, 7).unwrap();
        let x = planted.construct().unwrap();
        let opts = AlsOptions {
            rank_continuation: true,
            ..robust()
        };
        let dec = decompose(&x, 4, &opts).unwrap();
        assert_eq!(dec.ring.uniform_rank(), Some(4));
        assert!(dec.fit_error <= 1e-6, "fit {}", dec.fit_error);
    }

    #[test]
    fn zero_padding_preserves_tensor() {
        let ring = gaussian_ring(&[2, 3, 2], 2, 1.0, 1).unwrap();
        let big = ring.padded(4, 0.0, 0).unwrap();
        assert_eq!(big.uniform_rank(), Some(4));
        let diff = big
            .construct()
            .unwrap()
            .max_abs_diff(&ring.construct().unwrap())
            .unwrap();
        assert!(diff < 1e-14);
        assert!(big.padded(3, 0.0, 0).is_err());
    }

    #[test]
    fn single_mode_decomposition() {
        let x = DenseTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let dec = decompose(&x, 2, &AlsOptions::default()).unwrap();
        assert!(dec.fit_error < 1e-9, "{}", dec.fit_error);
        assert!(dec.ridge_retries > 0);
    }
}
