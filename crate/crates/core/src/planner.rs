//! Merge-order planning for contiguous segments of a tensor ring.
//!
//! A plan is a full binary tree whose leaves are consecutive core indices.
//! Merging two sub-chains with mode products `P1` and `P2` at uniform rank
//! `R` costs `R^3 * P1 * P2` multiply-accumulates and produces a tensor of
//! `R^2 * P1 * P2` floats. Flop figures are reported in two conventions:
//! `macs`, and `flops_2x = 2 * macs` (one multiply plus one add).

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest core count accepted by exhaustive enumeration.
pub const MAX_EXHAUSTIVE: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MergePlan {
    Leaf(usize),
    Node(Box<MergePlan>, Box<MergePlan>),
}

impl MergePlan {
    pub fn node(left: MergePlan, right: MergePlan) -> Self {
        MergePlan::Node(Box::new(left), Box::new(right))
    }

    /// Left-deep tree `(((k, k+1), k+2), ...)`.
    pub fn sequential(first: usize, last: usize) -> Result<Self> {
        check_range(first, last)?;
        let mut plan = MergePlan::Leaf(first);
        for i in first + 1..=last {
            plan = MergePlan::node(plan, MergePlan::Leaf(i));
        }
        Ok(plan)
    }

    /// Balanced tree; an odd-sized range puts the extra leaf on the left.
    pub fn hierarchical(first: usize, last: usize) -> Result<Self> {
        check_range(first, last)?;
        Ok(Self::balanced(first, last))
    }

    fn balanced(first: usize, last: usize) -> Self {
        if first == last {
            return MergePlan::Leaf(first);
        }
        let n = last - first + 1;
        let split = first + n.div_ceil(2) - 1;
        MergePlan::node(Self::balanced(first, split), Self::balanced(split + 1, last))
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            MergePlan::Leaf(i) => out.push(*i),
            MergePlan::Node(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            MergePlan::Leaf(_) => 1,
            MergePlan::Node(l, r) => l.leaf_count() + r.leaf_count(),
        }
    }

    /// Checks that leaves read left to right are exactly `first..=last`.
    pub fn validate(&self, first: usize, last: usize) -> Result<()> {
        let leaves = self.leaves();
        if leaves.iter().copied().eq(first..=last) {
            Ok(())
        } else {
            Err(Error::Plan(format!(
                "leaves {leaves:?} are not the consecutive range {first}..={last}"
            )))
        }
    }

    /// Same tree with every leaf index shifted by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        match self {
            MergePlan::Leaf(i) => MergePlan::Leaf(i + offset),
            MergePlan::Node(l, r) => MergePlan::node(l.shifted(offset), r.shifted(offset)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            MergePlan::Leaf(_) => 0,
            MergePlan::Node(l, r) => 1 + l.depth().max(r.depth()),
        }
    }
}

/// Nested-pair notation, e.g. `((0,1),(2,3))`.
impl fmt::Display for MergePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergePlan::Leaf(i) => write!(f, "{i}"),
            MergePlan::Node(l, r) => write!(f, "({l},{r})"),
        }
    }
}

fn check_range(first: usize, last: usize) -> Result<()> {
    if first > last {
        return Err(Error::Plan(format!("empty range {first}..={last}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PlanCost {
    pub flops_2x: u64,
    pub macs: u64,
    pub peak_memory_floats: u64,
}

/// Per-node breakdown produced alongside a [`PlanCost`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeCost {
    pub leaves: (usize, usize),
    pub mode_product: u64,
    pub macs: u64,
    pub floats: u64,
}

struct Walk<'a> {
    dims: &'a [usize],
    offset: usize,
    rank: u64,
    nodes: Vec<NodeCost>,
    macs: u64,
}

impl Walk<'_> {
    /// Returns (mode product, floats held by the result, peak floats while forming it).
    fn visit(&mut self, plan: &MergePlan) -> (u64, u64, u64) {
        match plan {
            MergePlan::Leaf(i) => (self.dims[i - self.offset] as u64, 0, 0),
            MergePlan::Node(l, r) => {
                let (pl, hl, peak_l) = self.visit(l);
                let (pr, hr, peak_r) = self.visit(r);
                let prod = pl * pr;
                let macs = self.rank.pow(3) * prod;
                let floats = self.rank.pow(2) * prod;
                self.macs += macs;
                let leaves = plan.leaves();
                self.nodes.push(NodeCost {
                    leaves: (leaves[0], *leaves.last().unwrap()),
                    mode_product: prod,
                    macs,
                    floats,
                });
                let peak = peak_l.max(hl + peak_r).max(hl + hr + floats);
                (prod, floats, peak)
            }
        }
    }
}

/// Cost of carrying out `plan` over the chain with mode sizes `dims` at uniform
/// rank `rank`. Leaf `k` of the plan corresponds to `dims[k - first_leaf]`.
///
/// Peak memory counts only merged intermediates: the input cores are free, and
/// the subtrees are evaluated left then right with children released once
/// their parent is formed.
pub fn cost_plan(dims: &[usize], rank: usize, plan: &MergePlan) -> Result<PlanCost> {
    Ok(cost_plan_detailed(dims, rank, plan)?.0)
}

pub fn cost_plan_detailed(dims: &[usize], rank: usize, plan: &MergePlan) -> Result<(PlanCost, Vec<NodeCost>)> {
    if dims.is_empty() {
        return Err(Error::Plan("no dims".into()));
    }
    let first = plan.leaves()[0];
    plan.validate(first, first + dims.len() - 1)?;
    let mut walk = Walk {
        dims,
        offset: first,
        rank: rank as u64,
        nodes: Vec::new(),
        macs: 0,
    };
    let (_, _, peak) = walk.visit(plan);
    Ok((
        PlanCost {
            flops_2x: 2 * walk.macs,
            macs: walk.macs,
            peak_memory_floats: peak,
        },
        walk.nodes,
    ))
}

/// MACs to construct the full tensor when the bond trace is fused into the
/// root merge: interior nodes cost `R^3 * P`, the root costs `R^2 * I`.
pub fn construct_macs(dims: &[usize], rank: usize, plan: &MergePlan) -> Result<u64> {
    let (cost, nodes) = cost_plan_detailed(dims, rank, plan)?;
    match plan {
        MergePlan::Leaf(_) => {
            // single core: trace only
            Ok(rank as u64 * dims[0] as u64)
        }
        MergePlan::Node(..) => {
            let root = nodes.last().expect("node plan has a root");
            Ok(cost.macs - root.macs + (rank as u64).pow(2) * root.mode_product)
        }
    }
}

/// All full binary trees over leaves `0..d`, each exactly once.
///
/// Trees with a larger left subtree come first, so the first tree is the
/// left-deep (sequential) one.
pub fn enumerate_plans(d: usize) -> Result<Vec<MergePlan>> {
    if !(2..=MAX_EXHAUSTIVE).contains(&d) {
        return Err(Error::Plan(format!(
            "exhaustive enumeration supports 2..={MAX_EXHAUSTIVE} cores, got {d}"
        )));
    }
    Ok(trees(0, d - 1))
}

fn trees(first: usize, last: usize) -> Vec<MergePlan> {
    if first == last {
        return vec![MergePlan::Leaf(first)];
    }
    let mut out = Vec::new();
    for split in (first..last).rev() {
        let lefts = trees(first, split);
        let rights = trees(split + 1, last);
        for l in &lefts {
            for r in &rights {
                out.push(MergePlan::node(l.clone(), r.clone()));
            }
        }
    }
    out
}

/// `Catalan(n) = (2n)! / ((n+1)! n!)`.
pub fn catalan(n: usize) -> u64 {
    let mut c: u64 = 1;
    for k in 0..n as u64 {
        c = c * 2 * (2 * k + 1) / (k + 2);
    }
    c
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BestPlan {
    pub plan: MergePlan,
    pub cost: PlanCost,
    /// False when the chain was too long for brute force and the balanced
    /// plan was returned without a search.
    pub exhaustive: bool,
}

/// Cheapest plan by `flops_2x`, ties broken by peak memory, then by
/// enumeration order (left-deepest first).
pub fn best_plan(dims: &[usize], rank: usize) -> Result<BestPlan> {
    let d = dims.len();
    if d < 2 {
        return Err(Error::Plan("best_plan needs at least two cores".into()));
    }
    if d > MAX_EXHAUSTIVE {
        let plan = MergePlan::hierarchical(0, d - 1)?;
        let cost = cost_plan(dims, rank, &plan)?;
        return Ok(BestPlan {
            plan,
            cost,
            exhaustive: false,
        });
    }
    let mut best: Option<(MergePlan, PlanCost)> = None;
    for plan in enumerate_plans(d)? {
        let cost = cost_plan(dims, rank, &plan)?;
        let better = match &best {
            None => true,
            Some((_, b)) => (cost.flops_2x, cost.peak_memory_floats) < (b.flops_2x, b.peak_memory_floats),
        };
        if better {
            best = Some((plan, cost));
        }
    }
    let (plan, cost) = best.expect("at least one plan");
    Ok(BestPlan {
        plan,
        cost,
        exhaustive: true,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub plans_checked: usize,
    /// `2 R^3 I` and `4 R^3 I` in the flops_2x convention.
    pub flops_lower: u64,
    pub flops_upper: u64,
    /// `R^2 I` and `2 R^2 I`.
    pub memory_lower: u64,
    pub memory_upper: u64,
    pub min_flops: u64,
    pub max_flops: u64,
    pub min_memory: u64,
    pub max_memory: u64,
    pub hierarchical_flops: u64,
    pub hierarchical_is_min: bool,
    /// Plans falling outside either bound, in nested-pair notation.
    pub violations: Vec<String>,
    pub pass: bool,
}

/// Checks every merge order of `d` cores of size `mode` against the flop and
/// memory bounds `[2R^3 I, 4R^3 I]` and `[R^2 I, 2R^2 I]`.
pub fn verify_merge_bounds(mode: usize, d: usize, rank: usize) -> Result<BoundReport> {
    if mode < 2 {
        return Err(Error::invalid("mode size must be >= 2"));
    }
    let dims = vec![mode; d];
    verify_bounds_for_dims(&dims, rank)
}

/// As [`verify_merge_bounds`] but takes the dims list; all entries must match.
pub fn verify_bounds_for_dims(dims: &[usize], rank: usize) -> Result<BoundReport> {
    let d = dims.len();
    let mode = *dims.first().ok_or_else(|| Error::invalid("empty dims"))?;
    if dims.iter().any(|&x| x != mode) {
        return Err(Error::invalid(format!("bound check needs uniform dims, got {dims:?}")));
    }
    let total = (mode as u64).pow(d as u32);
    let r = rank as u64;
    let flops_lower = 2 * r.pow(3) * total;
    let flops_upper = 4 * r.pow(3) * total;
    let memory_lower = r.pow(2) * total;
    let memory_upper = 2 * r.pow(2) * total;

    let plans = enumerate_plans(d)?;
    let mut min_flops = u64::MAX;
    let mut max_flops = 0;
    let mut min_memory = u64::MAX;
    let mut max_memory = 0;
    let mut violations = Vec::new();
    for plan in &plans {
        let c = cost_plan(dims, rank, plan)?;
        min_flops = min_flops.min(c.flops_2x);
        max_flops = max_flops.max(c.flops_2x);
        min_memory = min_memory.min(c.peak_memory_floats);
        max_memory = max_memory.max(c.peak_memory_floats);
        let ok = (flops_lower..=flops_upper).contains(&c.flops_2x)
            && (memory_lower..=memory_upper).contains(&c.peak_memory_floats);
        if !ok {
            violations.push(plan.to_string());
        }
    }
    let hierarchical_flops = cost_plan(dims, rank, &MergePlan::hierarchical(0, d - 1)?)?.flops_2x;
    Ok(BoundReport {
        dims: dims.to_vec(),
        rank,
        plans_checked: plans.len(),
        flops_lower,
        flops_upper,
        memory_lower,
        memory_upper,
        min_flops,
        max_flops,
        min_memory,
        max_memory,
        hierarchical_flops,
        hierarchical_is_min: hierarchical_flops == min_flops,
        pass: violations.is_empty(),
        violations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanEntry {
    /// Nested-pair notation over 0-based core indices.
    pub tree: String,
    pub flops_2x: u64,
    pub macs: u64,
    pub peak_memory: u64,
}

impl PlanEntry {
    fn new(plan: &MergePlan, cost: PlanCost) -> Self {
        Self {
            tree: plan.to_string(),
            flops_2x: cost.flops_2x,
            macs: cost.macs,
            peak_memory: cost.peak_memory_floats,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundSummary {
    pub lower: u64,
    pub upper: u64,
    pub memory_lower: u64,
    pub memory_upper: u64,
    pub plans_checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanReport {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub plans: Vec<PlanEntry>,
    pub best: PlanEntry,
    pub best_is_exhaustive: bool,
    /// Listed plans against `[2R^3 I, 4R^3 I]` flops and `[R^2 I, 2R^2 I]` memory.
    pub theorem1: BoundSummary,
}

/// Costs of the sequential and hierarchical plans, or of every plan when
/// `all` is set, with the cheapest one and the merge-cost bounds.
pub fn plan_report(dims: &[usize], rank: usize, all: bool) -> Result<PlanReport> {
    let d = dims.len();
    if d == 0 || rank == 0 || dims.contains(&0) {
        return Err(Error::Plan(
            "need at least one core, positive dims and rank >= 1".into(),
        ));
    }
    let plans: Vec<MergePlan> = if all && d >= 2 {
        enumerate_plans(d)?
    } else {
        let mut v = vec![MergePlan::sequential(0, d - 1)?];
        let h = MergePlan::hierarchical(0, d - 1)?;
        if h != v[0] {
            v.push(h);
        }
        v
    };
    let entries = plans
        .iter()
        .map(|p| Ok(PlanEntry::new(p, cost_plan(dims, rank, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let (best, exhaustive) = if d >= 2 {
        let b = best_plan(dims, rank)?;
        (PlanEntry::new(&b.plan, b.cost), b.exhaustive)
    } else {
        (entries[0].clone(), true)
    };
    let total: u64 = dims.iter().map(|&v| v as u64).product();
    let r = rank as u64;
    let (lower, upper) = (2 * r.pow(3) * total, 4 * r.pow(3) * total);
    let (memory_lower, memory_upper) = (r.pow(2) * total, 2 * r.pow(2) * total);
    let pass = entries
        .iter()
        .all(|e| (lower..=upper).contains(&e.flops_2x) && (memory_lower..=memory_upper).contains(&e.peak_memory));
    Ok(PlanReport {
        dims: dims.to_vec(),
        rank,
        theorem1: BoundSummary {
            lower,
            upper,
            memory_lower,
            memory_upper,
            plans_checked: entries.len(),
            pass,
        },
        plans: entries,
        best,
        best_is_exhaustive: exhaustive,
    })
}
