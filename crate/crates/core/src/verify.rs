//! Fixed-seed oracle suites.
//!
//! Each suite compares a production code path against an independent
//! reference and reports the observed error next to its limit. Failing checks
//! carry a witness tensor that callers can dump for inspection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::ArchSpec;
use crate::autodiff::finite_diff_check;
use crate::error::{Error, Result};
use crate::layers::{SpatialMode, TrConv2d, TrFullyConnected};
use crate::model::{ModelKind, Network};
use crate::planner::verify_merge_bounds;
use crate::ring::{decompose, gaussian_ring, propagated_variance, random_init, AlsOptions, InitSpec, TensorRing};
use crate::tensor::{conv2d_reference, ConvSpec, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Construct,
    Theorem1,
    Roundtrip,
    FcEquiv,
    ConvEquiv,
    Grad,
    InitVariance,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Construct,
        Suite::Theorem1,
        Suite::Roundtrip,
        Suite::FcEquiv,
        Suite::ConvEquiv,
        Suite::Grad,
        Suite::InitVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Construct => "construct",
            Suite::Theorem1 => "theorem1",
            Suite::Roundtrip => "roundtrip",
            Suite::FcEquiv => "fc-equiv",
            Suite::ConvEquiv => "conv-equiv",
            Suite::Grad => "grad",
            Suite::InitVariance => "init-variance",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Limit {
    AtMost { value: f64 },
    AtLeast { value: f64 },
    Within { low: f64, high: f64 },
}

impl Limit {
    pub fn admits(self, v: f64) -> bool {
        match self {
            Limit::AtMost { value } => v <= value,
            Limit::AtLeast { value } => v >= value,
            Limit::Within { low, high } => (low..=high).contains(&v),
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Limit::AtMost { value } => write!(f, "<= {value:e}"),
            Limit::AtLeast { value } => write!(f, ">= {value}"),
            Limit::Within { low, high } => write!(f, "in [{low}, {high}]"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub limit: Limit,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub witness: Option<DenseTensor>,
}

impl Check {
    fn new(name: impl Into<String>, observed: f64, limit: Limit, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            observed,
            passed: limit.admits(observed),
            limit,
            detail: detail.into(),
            witness: None,
        }
    }

    fn witness(mut self, t: impl FnOnce() -> Option<DenseTensor>) -> Self {
        if !self.passed {
            self.witness = t();
        }
        self
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {}: observed {:e}, limit {}",
            self.name, self.observed, self.limit
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Construct => construct_suite(seed)?,
        Suite::Theorem1 => theorem1_suite()?,
        Suite::Roundtrip => roundtrip_suite(seed)?,
        Suite::FcEquiv => fc_equiv_suite(seed)?,
        Suite::ConvEquiv => conv_equiv_suite(seed)?,
        Suite::Grad => grad_suite(seed)?,
        Suite::InitVariance => init_variance_suite(seed)?,
    };
    Ok(SuiteReport { suite, checks })
}

/// The ring sum evaluated term by term over every bond tuple.
pub fn ring_sum_reference(ring: &TensorRing) -> Result<DenseTensor> {
    let shape = ring.shape();
    let ranks = ring.ranks();
    let d = shape.len();
    let paths: usize = ranks.iter().product();
    DenseTensor::from_fn(&shape, |ix| {
        let mut sum = 0.0;
        let mut bond = vec![0; d];
        for mut flat in 0..paths {
            for i in (0..d).rev() {
                bond[i] = flat % ranks[i];
                flat /= ranks[i];
            }
            let mut prod = 1.0;
            for i in 0..d {
                let core = ring.cores()[i].tensor();
                let (n, r) = (core.shape()[1], core.shape()[2]);
                prod *= core.data()[(bond[i] * n + ix[i]) * r + bond[(i + 1) % d]];
            }
            sum += prod;
        }
        sum
    })
}

fn construct_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut witness = None;
    for case in 0..200 {
        let d = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..d).map(|_| rng.random_range(1..=4)).collect();
        let rank = rng.random_range(1..=3);
        let ring = gaussian_ring(&shape, rank, 1.0, seed.wrapping_add(case))?;
        let err = ring.construct()?.max_abs_diff(&ring_sum_reference(&ring)?)?;
        if err > worst {
            worst = err;
            witness = Some(ring.construct()?);
        }
    }
    Ok(vec![Check::new(
        "construct vs ring sum, 200 rings",
        worst,
        Limit::AtMost { value: 1e-12 },
        "max absolute difference",
    )
    .witness(|| witness)])
}

fn theorem1_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let (mut plans, mut violations) = (0usize, 0usize);
    let mut not_min = Vec::new();
    for d in [2, 3, 4, 5, 6, 8] {
        for mode in [2, 3, 4] {
            for rank in [2, 3] {
                let rep = verify_merge_bounds(mode, d, rank)?;
                plans += rep.plans_checked;
                violations += rep.violations.len();
                if [2, 4, 8].contains(&d) && !rep.hierarchical_is_min {
                    not_min.push(format!("d={d} I={mode} R={rank}"));
                }
            }
        }
    }
    out.push(Check::new(
        "merge plans outside flop/memory bounds",
        violations as f64,
        Limit::AtMost { value: 0.0 },
        format!("{plans} plans checked"),
    ));
    out.push(Check::new(
        "balanced plan not minimal for d in {2,4,8}",
        not_min.len() as f64,
        Limit::AtMost { value: 0.0 },
        not_min.join("; "),
    ));
    Ok(out)
}

fn roundtrip_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut rises, mut witness) = (0.0f64, 0usize, None);
    for k in 0..20u64 {
        // alternate d = 4 at R = 2 with d = 5 at R = 3
        let (d, rank, modes) = if k % 2 == 0 { (4, 2, 2..=5) } else { (5, 3, 3..=4) };
        let shape: Vec<usize> = (0..d).map(|_| rng.random_range(modes.clone())).collect();
        let x = gaussian_ring(&shape, rank, 1.0, seed.wrapping_add(1000 + k))?.construct()?;
        let opts = AlsOptions {
            max_sweeps: 500,
            restarts: 10,
            target_fit: 1e-9,
            seed: seed.wrapping_add(k),
            ..Default::default()
        };
        let dec = decompose(&x, rank, &opts)?;
        rises += dec.history.windows(2).filter(|w| w[1] > w[0]).count();
        if dec.fit_error > worst {
            worst = dec.fit_error;
            witness = Some(x);
        }
    }
    Ok(vec![
        Check::new(
            "planted ring fit error, 20 instances",
            worst,
            Limit::AtMost { value: 1e-6 },
            "worst relative fit",
        )
        .witness(|| witness),
        Check::new(
            "fit-error increases across sweeps",
            rises as f64,
            Limit::AtMost { value: 0.0 },
            "",
        ),
    ])
}

/// `x (B, I) * W (I, O)` by explicit loops.
fn matmul_reference(x: &DenseTensor, w: &DenseTensor) -> Result<DenseTensor> {
    let (b, i, o) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    DenseTensor::from_fn(&[b, o], |ix| {
        (0..i).map(|k| x.data()[ix[0] * i + k] * w.data()[k * o + ix[1]]).sum()
    })
}

fn random_modes(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
    let d = rng.random_range(min..=max);
    (0..d).map(|_| rng.random_range(1..=4)).collect()
}

fn fc_equiv_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut witness) = (0.0f64, None);
    for case in 0..100 {
        let in_shape = random_modes(&mut rng, 1, 3);
        let out_shape = random_modes(&mut rng, 1, 3);
        let rank = rng.random_range(1..=3);
        let batch = rng.random_range(1..=3);
        let layer = TrFullyConnected::random(&in_shape, &out_shape, rank, false, seed.wrapping_add(case))?;
        let x = DenseTensor::random_normal(&[batch, layer.in_size()], 1.0, &mut rng)?;
        let y = layer.forward(&x)?.into_shape(&[batch, layer.out_size()])?;
        let w = layer
            .ring()
            .construct()?
            .into_shape(&[layer.in_size(), layer.out_size()])?;
        let want = matmul_reference(&x, &w)?;
        let err = y.rel_err(&want)?;
        if err > worst {
            worst = err;
            witness = Some(w);
        }
    }
    Ok(vec![Check::new(
        "separated FC vs construct-then-multiply, 100 layers",
        worst,
        Limit::AtMost { value: 1e-10 },
        "max |diff| / max |reference|",
    )
    .witness(|| witness)])
}

fn conv_equiv_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut witness) = (0.0f64, None);
    let mut covered = std::collections::HashSet::new();
    for case in 0..100u64 {
        let filter: usize = [1, 3, 5][case as usize % 3];
        let mode = if (case / 3) % 2 == 0 {
            SpatialMode::Merged
        } else {
            SpatialMode::Split
        };
        let stride = 1 + ((case / 6) % 2) as usize;
        let padding = ((case / 12) % 2) as usize;
        covered.insert((filter, mode, stride, padding));
        let in_shape = random_modes(&mut rng, 0, 2);
        let out_shape = random_modes(&mut rng, 1, 2);
        let min_hw = filter.saturating_sub(2 * padding).max(1);
        let spec = ConvSpec {
            height: rng.random_range(min_hw..=min_hw + 3),
            width: rng.random_range(min_hw..=min_hw + 3),
            in_channels: in_shape.iter().product(),
            out_channels: out_shape.iter().product(),
            filter,
            stride,
            padding,
        };
        let rank = rng.random_range(1..=3);
        let layer = TrConv2d::random(spec, mode, &in_shape, &out_shape, rank, false, seed.wrapping_add(case))?;
        let batch = rng.random_range(1..=2);
        let x = DenseTensor::random_normal(&[batch, spec.height, spec.width, spec.in_channels], 1.0, &mut rng)?;
        let y = layer.forward(&x)?;
        let kernel = layer
            .ring()
            .construct()?
            .into_shape(&[filter, filter, spec.in_channels, spec.out_channels])?;
        let per = spec.height * spec.width * spec.in_channels;
        let mut want = Vec::new();
        for b in 0..batch {
            let xb = DenseTensor::new(
                vec![spec.height, spec.width, spec.in_channels],
                x.data()[b * per..(b + 1) * per].to_vec(),
            )?;
            want.extend_from_slice(conv2d_reference(&xb, &kernel, &spec)?.data());
        }
        let want = DenseTensor::new(y.shape().to_vec(), want)?;
        let err = y.rel_err(&want)?;
        if err > worst {
            worst = err;
            witness = Some(kernel);
        }
    }
    Ok(vec![Check::new(
        "3-step conv vs direct conv, 100 layers",
        worst,
        Limit::AtMost { value: 1e-10 },
        format!("{} geometry classes covered", covered.len()),
    )
    .witness(|| witness)])
}

const FC_NET: &str = r#"{"name":"grad-fc","layers":[
    {"kind":"fc","in_shape":[2,3,2],"out_shape":[2,3],"bias":true},
    {"kind":"fc","in_shape":[6],"out_shape":[4],"bias":true}]}"#;

const CONV_NET: &str = r#"{"name":"grad-conv","layers":[
    {"kind":"conv","in_shape":[],"out_shape":[2,2],"conv":{"D":3,"p":1,"H":6,"W":6},"spatial_mode":"split","pool":true,"bias":true},
    {"kind":"conv","in_shape":[2,2],"out_shape":[3],"conv":{"D":3,"s":2,"p":1,"H":3,"W":3}},
    {"kind":"fc","in_shape":[2,2,3],"out_shape":[5],"bias":true}]}"#;

fn grad_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (label, json) in [("TR-FC", FC_NET), ("TR-conv", CONV_NET)] {
        let arch = ArchSpec::from_json(json)?;
        for rank in [2, 3] {
            let net = Network::from_arch(&arch, ModelKind::Tr, rank, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ rank as u64);
            let x = DenseTensor::random_normal(&[4, net.input_size()], 1.0, &mut rng)?;
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..net.output_size())).collect();
            let (_, grads) = net.loss_and_grad(&x, &labels)?;
            let params: Vec<DenseTensor> = net.params().into_iter().cloned().collect();
            let rep = finite_diff_check(&params, &grads, |p| net.loss_with(p, &x, &labels), 1e-5, 50, seed)?;
            let worst = rep.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
            let check = Check::new(
                format!("{label} r={rank} gradient vs central differences, 50 coords"),
                rep.max_rel_err,
                Limit::AtMost { value: 1e-5 },
                worst.map_or(String::new(), |s| {
                    format!(
                        "worst at param {} index {}: {:e} vs {:e}",
                        s.param, s.index, s.analytic, s.numeric
                    )
                }),
            );
            let witness = worst.map(|s| grads[s.param].clone());
            out.push(check.witness(|| witness));
        }
    }
    Ok(out)
}

fn init_variance_suite(seed: u64) -> Result<Vec<Check>> {
    const ENTRIES: usize = 102_400;
    let mut out = Vec::new();
    for d in [2usize, 4] {
        for rank in [2usize, 4] {
            let mode = if d == 2 { 16 } else { 4 };
            let shape = vec![mode; d];
            let n: usize = shape.iter().product();
            let init = InitSpec::for_params(n);
            let core_std = init.core_std(d, rank)?;
            let (mut sum_sq, mut count) = (0.0, 0usize);
            let mut k = 0u64;
            while count < ENTRIES {
                let ring = random_init(&shape, rank, &init, seed.wrapping_mul(7919).wrapping_add(k))?;
                let t = ring.construct()?;
                sum_sq += t.data().iter().map(|v| v * v).sum::<f64>();
                count += t.len();
                k += 1;
            }
            let empirical = sum_sq / count as f64;
            let law = propagated_variance(core_std, d, rank, true);
            let target = 2.0 / n as f64;
            let band = Limit::Within { low: 0.85, high: 1.15 };
            let detail = format!("{count} entries from {k} rings");
            out.push(Check::new(
                format!("d={d} R={rank} empirical / propagated variance"),
                empirical / law,
                band,
                detail.clone(),
            ));
            out.push(Check::new(
                format!("d={d} R={rank} empirical variance / (2/N)"),
                empirical / target,
                band,
                detail,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn limits() {
        assert!(Limit::AtMost { value: 1.0 }.admits(1.0));
        assert!(!Limit::AtMost { value: 1.0 }.admits(f64::NAN));
        assert!(Limit::Within { low: 0.85, high: 1.15 }.admits(0.9));
        assert!(!Limit::Within { low: 0.85, high: 1.15 }.admits(1.2));
    }

    #[test]
    fn ring_sum_reference_on_hand_example() {
        // two rank-1 cores: outer product
        let a = DenseTensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::new(vec![1, 3, 1], vec![3.0, 4.0, 5.0]).unwrap();
        let ring = TensorRing::from_tensors(vec![a, b]).unwrap();
        let t = ring_sum_reference(&ring).unwrap();
        assert_eq!(t.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn failing_check_keeps_witness() {
        let c = Check::new("x", 2.0, Limit::AtMost { value: 1.0 }, "").witness(|| Some(DenseTensor::scalar(1.0)));
        assert!(!c.passed && c.witness.is_some());
        let c = Check::new("x", 0.0, Limit::AtMost { value: 1.0 }, "").witness(|| Some(DenseTensor::scalar(1.0)));
        assert!(c.witness.is_none());
    }
}
