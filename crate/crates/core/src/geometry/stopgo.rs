//! Stop-Go pairs: `(ω, η)` at a common time is a pair when, for every
//! stopping rule `σ` that does not stop at once,
//! `c(ω) + E c(η⊙θ, σ) < c(η) + E c(ω⊙θ, σ)`.
//!
//! The quantifier over `σ` is resolved exactly by backward induction: the
//! smallest value of `E[c(ω⊙θ) - c(η⊙θ)]` over all rules of a given depth is
//! an optimal stopping problem on the depth-limited subtree.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;

use crate::costs::{CostFunctional, CostVector, LEX_TOL};
use crate::error::{Error, Result};
use crate::lp::RandomizedStoppingTime;
use crate::tree::{concatenate, PathPrefix, TreeNode, MAX_RULE_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgVerdict {
    Sg,
    NotSg,
    /// Every rule up to this depth is strict, but deeper rules exist.
    Undecided(usize),
}

impl fmt::Display for SgVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SgVerdict::Sg => f.write_str("SG"),
            SgVerdict::NotSg => f.write_str("not-SG"),
            SgVerdict::Undecided(d) => write!(f, "undecided({d})"),
        }
    }
}

/// Verdict with the tightest rule found.
#[derive(Debug, Clone)]
pub struct SgDetail {
    pub verdict: SgVerdict,
    /// Rule depth actually searched.
    pub depth: usize,
    /// Stopping nodes (relative to the pair's time) of the tightest rule and their probabilities.
    pub witness: Vec<(TreeNode, f64)>,
    /// `c(ω) + E c(η⊙θ, σ)` for the tightest rule.
    pub lhs: CostVector,
    /// `c(η) + E c(ω⊙θ, σ)` for the tightest rule.
    pub rhs: CostVector,
}

fn continuation(prefix: &PathPrefix, rel: TreeNode, step: f64) -> PathPrefix {
    let mut values = Vec::with_capacity(rel.level + 1);
    values.push(0.0);
    let mut pos = 0i64;
    for i in 0..rel.level {
        pos += if (rel.word >> (rel.level - 1 - i)) & 1 == 1 {
            1
        } else {
            -1
        };
        values.push(step * pos as f64);
    }
    PathPrefix {
        dt: prefix.dt,
        start: prefix.end_index(),
        values,
        horizon: None,
    }
}

pub fn is_stop_go_pair(c: &CostFunctional, omega: &PathPrefix, eta: &PathPrefix, depth: usize) -> Result<SgVerdict> {
    Ok(stop_go_detail(c, omega, eta, depth)?.verdict)
}

pub fn stop_go_detail(c: &CostFunctional, omega: &PathPrefix, eta: &PathPrefix, depth: usize) -> Result<SgDetail> {
    if omega.end_index() != eta.end_index() {
        return Err(Error::Pair(format!(
            "prefixes end at different times ({} vs {})",
            omega.end_time(),
            eta.end_time()
        )));
    }
    if (omega.dt - eta.dt).abs() > 1e-12 * omega.dt {
        return Err(Error::Pair("prefixes live on different grids".into()));
    }
    if depth > MAX_RULE_DEPTH {
        return Err(Error::Depth(format!(
            "rule depth {depth} exceeds the guard {MAX_RULE_DEPTH}"
        )));
    }
    let remaining = match (omega.remaining(), eta.remaining()) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let d = remaining.map_or(depth, |r| depth.min(r));
    let c_omega = c.evaluate(omega);
    let c_eta = c.evaluate(eta);
    if d == 0 {
        return Ok(SgDetail {
            verdict: SgVerdict::Undecided(0),
            depth: 0,
            witness: Vec::new(),
            lhs: c_omega,
            rhs: c_eta,
        });
    }
    let step = omega.dt.sqrt();
    // difference c(ω⊙θ) - c(η⊙θ) and both parts, per relative node, level by level
    let mut diff: Vec<Vec<(CostVector, CostVector)>> = Vec::with_capacity(d + 1);
    for j in 0..=d {
        let mut row = Vec::with_capacity(1 << j);
        for w in 0..(1u32 << j) {
            let rel = TreeNode {
                root: 0,
                level: j,
                word: w,
            };
            let cont = continuation(omega, rel, step);
            let mut cont_eta = cont.clone();
            cont_eta.start = eta.end_index();
            let a = c.evaluate(&concatenate(omega, &cont)?);
            let b = c.evaluate(&concatenate(eta, &cont_eta)?);
            row.push((a, b));
        }
        diff.push(row);
    }
    // backward induction for the smallest E[a - b] over rules that continue at the root
    let mut best: Vec<CostVector> = diff[d].iter().map(|(a, b)| a.sub(*b)).collect();
    let mut stop_here: Vec<Vec<bool>> = vec![vec![true; 1 << d]];
    for j in (0..d).rev() {
        let mut next = Vec::with_capacity(1 << j);
        let mut flags = Vec::with_capacity(1 << j);
        for w in 0..(1usize << j) {
            let cont = best[2 * w].add(best[2 * w + 1]).scale(0.5);
            let here = diff[j][w].0.sub(diff[j][w].1);
            if j > 0 && here.lex_cmp(&cont, 0.0) != Ordering::Greater {
                next.push(here);
                flags.push(true);
            } else {
                next.push(cont);
                flags.push(false);
            }
        }
        best = next;
        stop_here.push(flags);
    }
    stop_here.reverse();
    // read the minimizing rule back and evaluate both sides on it
    let mut witness = Vec::new();
    let mut e_a = CostVector::zero(c.arity());
    let mut e_b = CostVector::zero(c.arity());
    let mut stack = vec![(0usize, 0u32, 1.0f64)];
    while let Some((j, w, p)) = stack.pop() {
        if stop_here[j][w as usize] {
            witness.push((
                TreeNode {
                    root: 0,
                    level: j,
                    word: w,
                },
                p,
            ));
            e_a = e_a.add(diff[j][w as usize].0.scale(p));
            e_b = e_b.add(diff[j][w as usize].1.scale(p));
        } else {
            stack.push((j + 1, (w << 1) | 1, 0.5 * p));
            stack.push((j + 1, w << 1, 0.5 * p));
        }
    }
    witness.sort_by_key(|(n, _)| (n.level, n.word));
    let lhs = c_omega.add(e_b);
    let rhs = c_eta.add(e_a);
    let strict = rhs.sub(lhs).lex_cmp(&CostVector::zero(c.arity()), LEX_TOL) == Ordering::Greater;
    let verdict = if !strict {
        SgVerdict::NotSg
    } else if remaining.is_some_and(|r| d < r) {
        SgVerdict::Undecided(d)
    } else {
        SgVerdict::Sg
    };
    Ok(SgDetail {
        verdict,
        depth: d,
        witness,
        lhs,
        rhs,
    })
}

/// A continued node and a stopped node on one level forming a Stop-Go pair.
#[derive(Debug, Clone)]
pub struct Violation {
    pub continued: usize,
    pub stopped: usize,
    pub level: usize,
    /// Tightest rule; every rule is strict for a violation.
    pub witness: Vec<(TreeNode, f64)>,
    pub lhs: CostVector,
    pub rhs: CostVector,
}

#[derive(Debug, Clone)]
pub struct StopGoReport {
    pub candidate_pairs: usize,
    pub checked: usize,
    pub undecided: usize,
    pub violations: Vec<Violation>,
}

impl StopGoReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for StopGoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict={}", if self.passed() { "pass" } else { "fail" })?;
        writeln!(f, "candidate_pairs={}", self.candidate_pairs)?;
        writeln!(f, "checked_pairs={}", self.checked)?;
        writeln!(f, "undecided_pairs={}", self.undecided)?;
        writeln!(f, "violations={}", self.violations.len())?;
        for v in &self.violations {
            writeln!(
                f,
                "violation level={} continued={} stopped={} lhs={} rhs={}",
                v.level, v.continued, v.stopped, v.lhs, v.rhs
            )?;
        }
        Ok(())
    }
}

/// Look for Stop-Go pairs in `Γ^< × Γ`: continued node first, stopped node second.
pub fn check_monotonicity_principle(
    rst: &RandomizedStoppingTime,
    c: &CostFunctional,
    depth: usize,
    sample_budget: usize,
) -> Result<StopGoReport> {
    if depth > MAX_RULE_DEPTH {
        return Err(Error::Depth(format!(
            "rule depth {depth} exceeds the guard {MAX_RULE_DEPTH}"
        )));
    }
    let model = rst.model();
    let g = model.graph();
    let mut pairs = Vec::new();
    for k in 1..g.n_levels() {
        let cont = rst.continued_at(k);
        if cont.is_empty() {
            continue;
        }
        let stopped = rst.stopped_at(k);
        for &u in &cont {
            for &v in &stopped {
                if u != v {
                    pairs.push((u, v));
                }
            }
        }
    }
    let total = pairs.len();
    let chosen: Vec<(usize, usize)> = if total <= sample_budget {
        pairs
    } else {
        (0..sample_budget).map(|i| pairs[i * total / sample_budget]).collect()
    };
    let results: Vec<Result<(usize, usize, SgDetail)>> = chosen
        .par_iter()
        .map(|&(u, v)| {
            let detail = stop_go_detail(c, &model.path_to(u), &model.path_to(v), depth)?;
            Ok((u, v, detail))
        })
        .collect();
    let mut violations = Vec::new();
    let mut undecided = 0;
    for r in results {
        let (u, v, d) = r?;
        match d.verdict {
            SgVerdict::Sg => violations.push(Violation {
                continued: u,
                stopped: v,
                level: g.level(u),
                witness: d.witness,
                lhs: d.lhs,
                rhs: d.rhs,
            }),
            SgVerdict::Undecided(_) => undecided += 1,
            SgVerdict::NotSg => {}
        }
    }
    Ok(StopGoReport {
        candidate_pairs: total,
        checked: chosen.len(),
        undecided,
        violations,
    })
}

/// Both sides of the Stop-Go inequality for the pair `(u, v)` when `σ` is the
/// continuation rule the stopping time uses below `u`: `(c(u) + E c(v⊙θ),
/// c(v) + E c(u⊙θ))`.
pub fn transplant_comparison(
    rst: &RandomizedStoppingTime,
    costs: &[CostVector],
    u: usize,
    v: usize,
) -> Result<(CostVector, CostVector)> {
    let model = rst.model();
    let tree = model
        .as_tree()
        .ok_or_else(|| Error::Swap("transplanting continuations needs a path tree".into()))?;
    let (tu, tv) = (tree.tree_node(u), tree.tree_node(v));
    if tu.level != tv.level {
        return Err(Error::Swap(format!("nodes {tu} and {tv} sit on different levels")));
    }
    let x_u = rst.continuing(u);
    if x_u <= 0.0 {
        return Err(Error::Swap(format!("node {tu} has no continuing mass")));
    }
    let arity = costs[u].arity();
    let mut e_u = CostVector::zero(arity);
    let mut e_v = CostVector::zero(arity);
    for_each_descendant(tree.depth() - tu.level, |rel| {
        let wu = tree.node_id(tree.descend(tu, rel)).expect("descendant");
        let wv = tree.node_id(tree.descend(tv, rel)).expect("descendant");
        let p = rst.stop(wu) / x_u;
        if p != 0.0 {
            e_u = e_u.add(costs[wu].scale(p));
            e_v = e_v.add(costs[wv].scale(p));
        }
    });
    Ok((costs[u].add(e_v), costs[v].add(e_u)))
}

fn for_each_descendant(depth: usize, mut f: impl FnMut(TreeNode)) {
    for j in 1..=depth {
        for w in 0..(1u32 << j) {
            f(TreeNode {
                root: 0,
                level: j,
                word: w,
            });
        }
    }
}

/// Stop `amount` more at `u`, release `amount` at `v` and route the released
/// mass below `v` with the rule `u` used for its continuing mass.
pub fn stop_go_swap(rst: &RandomizedStoppingTime, pair: (usize, usize), amount: f64) -> Result<RandomizedStoppingTime> {
    let model = rst.model();
    let tree = model
        .as_tree()
        .ok_or_else(|| Error::Swap("swaps need a path tree to transplant continuations".into()))?;
    let (u, v) = pair;
    let g = tree.graph();
    if u >= g.len() || v >= g.len() {
        return Err(Error::Swap("node outside the tree".into()));
    }
    let (tu, tv) = (tree.tree_node(u), tree.tree_node(v));
    if tu.level != tv.level {
        return Err(Error::Swap(format!("nodes {tu} and {tv} sit on different levels")));
    }
    if !(amount >= 0.0) {
        return Err(Error::Swap(format!("amount {amount} must be nonnegative")));
    }
    let x_u = rst.continuing(u);
    let cap = x_u.min(rst.stop(v));
    if amount > cap + 1e-15 {
        return Err(Error::Swap(format!(
            "amount {amount} exceeds available mass {cap} (continuing at {tu}, stopped at {tv})"
        )));
    }
    if amount == 0.0 {
        return Ok(rst.clone());
    }
    let amount = amount.min(cap);
    let mut stop = rst.stops().to_vec();
    stop[u] += amount;
    stop[v] -= amount;
    let keep = 1.0 - amount / x_u;
    for_each_descendant(tree.depth() - tu.level, |rel| {
        let wu = tree.node_id(tree.descend(tu, rel)).expect("descendant");
        let wv = tree.node_id(tree.descend(tv, rel)).expect("descendant");
        let s = rst.stop(wu);
        if s != 0.0 {
            stop[wu] = s * keep;
            stop[wv] += amount * s / x_u;
        }
    });
    stop[v] = stop[v].max(0.0);
    Ok(RandomizedStoppingTime::from_stop_mass(model.clone(), stop))
}
