//! Phase processes, barriers read off stopping rules, and Stop-Go checks.

mod stopgo;

use std::fmt::{self, Write as _};
use std::sync::Arc;

pub use stopgo::{
    check_monotonicity_principle, is_stop_go_pair, stop_go_detail, stop_go_swap, transplant_comparison, SgDetail,
    SgVerdict, StopGoReport, Violation,
};

use crate::error::Result;
use crate::grid::{TargetDistribution, TimeGrid};
use crate::lp::RandomizedStoppingTime;
use crate::tree::{Model, NodeState, PathPrefix};

/// Tolerance for treating two phase values as equal.
pub const PHASE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    /// `B_t`
    Position,
    /// `B_t - max_{s<=t} B_s`, never positive.
    Drawdown,
    /// `max_{s<=t} B_s - B_t`
    NegDrawdown,
}

/// The process `Y` whose hypograph is the stopping region, optionally tilted
/// by `eps * t / (1 + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseProcess {
    pub kind: PhaseKind,
    pub tilt: f64,
}

impl PhaseProcess {
    pub fn position() -> Self {
        Self {
            kind: PhaseKind::Position,
            tilt: 0.0,
        }
    }

    pub fn drawdown() -> Self {
        Self {
            kind: PhaseKind::Drawdown,
            tilt: 0.0,
        }
    }

    pub fn neg_drawdown() -> Self {
        Self {
            kind: PhaseKind::NegDrawdown,
            tilt: 0.0,
        }
    }

    pub fn with_tilt(mut self, eps: f64) -> Self {
        self.tilt = eps;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PhaseKind::Position => "position",
            PhaseKind::Drawdown => "drawdown",
            PhaseKind::NegDrawdown => "neg_drawdown",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "position" => Some(Self::position()),
            "drawdown" => Some(Self::drawdown()),
            "neg_drawdown" => Some(Self::neg_drawdown()),
            _ => None,
        }
    }

    #[inline]
    pub fn eval_parts(&self, t: f64, x: f64, max: f64) -> f64 {
        let base = match self.kind {
            PhaseKind::Position => x,
            PhaseKind::Drawdown => x - max,
            PhaseKind::NegDrawdown => max - x,
        };
        if self.tilt == 0.0 {
            base
        } else {
            base + self.tilt * t / (1.0 + t)
        }
    }

    pub fn eval_state(&self, s: &NodeState) -> f64 {
        self.eval_parts(s.t, s.x, s.max)
    }

    pub fn eval(&self, prefix: &PathPrefix) -> f64 {
        self.eval_state(&prefix.state())
    }

    /// Phase value of every node of a model.
    pub fn node_values(&self, model: &Model) -> Vec<f64> {
        let g = model.graph();
        (0..g.len()).map(|v| self.eval_state(&g.state(v))).collect()
    }
}

/// Downward barrier on a grid: stop when `Y_t <= beta(t)` (closed) or
/// `Y_t < beta(t)` (open).
#[derive(Debug, Clone, PartialEq)]
pub struct Barrier {
    grid: TimeGrid,
    beta: Vec<f64>,
    closed: bool,
}

impl Barrier {
    pub fn new(grid: TimeGrid, beta: Vec<f64>, closed: bool) -> Self {
        assert_eq!(beta.len(), grid.n_steps() + 1, "one barrier value per grid time");
        Self { grid, beta, closed }
    }

    /// `beta ≡ value` for `t > 0`; never stops at time 0.
    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        let mut beta = vec![value; grid.n_steps() + 1];
        beta[0] = f64::NEG_INFINITY;
        Self::new(grid, beta, true)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Piecewise-constant, right-continuous value at time `s`.
    pub fn at_time(&self, s: f64) -> f64 {
        let k = (s / self.grid.dt() + 1e-9).floor().max(0.0) as usize;
        self.beta[k.min(self.grid.n_steps())]
    }

    pub fn stops(&self, y: f64, k: usize) -> bool {
        let b = self.beta[k];
        if self.closed {
            y <= b + PHASE_TOL
        } else {
            y < b - PHASE_TOL
        }
    }

    /// CSV rows `t,beta_lower,beta_upper,boundary_rate` for a lower/upper pair.
    pub fn pair_to_csv(lower: &Barrier, upper: &Barrier, boundary_rate: &[Option<f64>]) -> String {
        let mut out = String::from("t,beta_lower,beta_upper,boundary_rate\n");
        for k in 0..lower.beta.len() {
            let rate = boundary_rate.get(k).copied().flatten().map(fmt_num).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_num(lower.grid.time(k)),
                fmt_num(lower.beta[k]),
                fmt_num(upper.beta[k]),
                rate
            );
        }
        out
    }
}

/// 17 significant digits, `inf`/`-inf` for infinities.
pub fn fmt_num(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.16e}")
    }
}

/// Barriers read off a stopping rule.
#[derive(Debug, Clone)]
pub struct BarrierExtraction {
    /// Closed rays: stop when `Y <= beta`.
    pub lower: Barrier,
    /// Open rays at the same values.
    pub upper: Barrier,
    /// Nodes stopped with a rate strictly between 0 and 1.
    pub boundary_nodes: Vec<usize>,
    /// Per level, the rate of the fractional node with the largest `Y`.
    pub boundary_rate: Vec<Option<f64>>,
    /// Fractional nodes strictly below their level's barrier value.
    pub interior_fractional: Vec<usize>,
}

impl BarrierExtraction {
    /// At most boundary randomization.
    pub fn randomization_on_boundary(&self) -> bool {
        self.interior_fractional.is_empty()
    }

    pub fn to_csv(&self) -> String {
        Barrier::pair_to_csv(&self.lower, &self.upper, &self.boundary_rate)
    }
}

pub fn extract_barrier(rst: &RandomizedStoppingTime, phase: &PhaseProcess) -> BarrierExtraction {
    let model = rst.model();
    let g = model.graph();
    let y = phase.node_values(model);
    let n_levels = g.n_levels();
    let mut beta = vec![f64::NEG_INFINITY; n_levels];
    let mut boundary_nodes = Vec::new();
    let mut boundary_rate = vec![None; n_levels];
    let mut interior = Vec::new();
    for k in 0..n_levels {
        for v in g.level_range(k) {
            if rst.is_stopped(v) {
                beta[k] = beta[k].max(y[v]);
            }
        }
        let mut top: Option<(f64, f64)> = None;
        for v in g.level_range(k) {
            if rst.is_stopped(v) && rst.is_continued(v) {
                boundary_nodes.push(v);
                let rate = rst.rate(v).unwrap_or(0.0);
                if top.is_none_or(|(yy, _)| y[v] > yy) {
                    top = Some((y[v], rate));
                }
                if y[v] < beta[k] - PHASE_TOL {
                    interior.push(v);
                }
            }
        }
        boundary_rate[k] = top.map(|t| t.1);
    }
    let grid = *model.grid();
    BarrierExtraction {
        lower: Barrier::new(grid, beta.clone(), true),
        upper: Barrier::new(grid, beta, false),
        boundary_nodes,
        boundary_rate,
        interior_fractional: interior,
    }
}

/// A pair of nodes on one level breaking the down-closed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOffender {
    pub level: usize,
    pub continued: usize,
    pub stopped: usize,
    pub y_continued: f64,
    pub y_stopped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub phase: PhaseKind,
    pub barrier_type: bool,
    pub offenders: Vec<RegionOffender>,
    /// Levels where more than one phase value is randomized.
    pub multi_fraction_levels: Vec<usize>,
}

impl fmt::Display for RegionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "verdict={}",
            if self.barrier_type {
                "barrier-type"
            } else {
                "not-barrier-type"
            }
        )?;
        writeln!(f, "offenders={}", self.offenders.len())?;
        writeln!(f, "multi_fraction_levels={}", self.multi_fraction_levels.len())?;
        for o in self.offenders.iter().take(20) {
            writeln!(
                f,
                "offender level={} continued={} y_continued={} stopped={} y_stopped={}",
                o.level, o.continued, o.y_continued, o.stopped, o.y_stopped
            )?;
        }
        Ok(())
    }
}

/// Barrier-type iff on every level each continued node lies strictly above
/// each fully stopped phase value, at most one phase value is randomized, and
/// no purely continued node lies below it.
///
/// Nodes are grouped by phase value: a value is fully stopped when every node
/// carrying it is, and randomized when its nodes mix stopping and continuing,
/// whether inside one node or across several (on the running-max lattice many
/// nodes share one drawdown value).
pub fn check_monotone_region(rst: &RandomizedStoppingTime, phase: &PhaseProcess) -> RegionReport {
    #[derive(PartialEq)]
    enum Kind {
        Stopped,
        Continued,
        Mixed,
    }
    let model = rst.model();
    let g = model.graph();
    let y = phase.node_values(model);
    let mut offenders = Vec::new();
    let mut multi = Vec::new();
    for k in 0..g.n_levels() {
        let mut nodes: Vec<usize> = g
            .level_range(k)
            .filter(|&v| rst.is_stopped(v) || rst.is_continued(v))
            .collect();
        nodes.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
        // (nodes, kind) per phase value, ascending
        let mut groups: Vec<(Vec<usize>, Kind)> = Vec::new();
        for v in nodes {
            match groups.last_mut() {
                Some((members, _)) if (y[v] - y[members[0]]).abs() <= PHASE_TOL => members.push(v),
                _ => groups.push((vec![v], Kind::Continued)),
            }
        }
        for (members, kind) in &mut groups {
            let stops = members.iter().any(|&v| rst.is_stopped(v));
            let conts = members.iter().any(|&v| rst.is_continued(v));
            *kind = match (stops, conts) {
                (true, false) => Kind::Stopped,
                (false, _) => Kind::Continued,
                (true, true) => Kind::Mixed,
            };
        }
        if let Some((members, _)) = groups.iter().rev().find(|(_, kind)| *kind == Kind::Stopped) {
            let s = members[0];
            for (others, _) in groups.iter().filter(|(_, kind)| *kind != Kind::Stopped) {
                for &c in others
                    .iter()
                    .filter(|&&c| rst.is_continued(c) && y[c] <= y[s] + PHASE_TOL)
                {
                    offenders.push(RegionOffender {
                        level: k,
                        continued: c,
                        stopped: s,
                        y_continued: y[c],
                        y_stopped: y[s],
                    });
                }
            }
        }
        let mixed: Vec<&Vec<usize>> = groups
            .iter()
            .filter(|(_, kind)| *kind == Kind::Mixed)
            .map(|(m, _)| m)
            .collect();
        if mixed.len() > 1 {
            multi.push(k);
        }
        // a randomized value above a purely continued node
        if let Some(top) = mixed.last() {
            let f = *top
                .iter()
                .find(|&&v| rst.is_stopped(v))
                .expect("mixed value has a stopped node");
            for (members, _) in groups.iter().filter(|(_, kind)| *kind == Kind::Continued) {
                for &c in members.iter().filter(|&&c| y[c] < y[f] - PHASE_TOL) {
                    offenders.push(RegionOffender {
                        level: k,
                        continued: c,
                        stopped: f,
                        y_continued: y[c],
                        y_stopped: y[f],
                    });
                }
            }
        }
    }
    RegionReport {
        phase: phase.kind,
        barrier_type: offenders.is_empty() && multi.is_empty(),
        offenders,
        multi_fraction_levels: multi,
    }
}

/// Hitting rule of a barrier on a model, by forward induction; never stops at
/// level 0 and always stops at the last level.
pub fn hitting_rst(model: Arc<Model>, barrier: &Barrier, phase: &PhaseProcess) -> RandomizedStoppingTime {
    let g = model.graph();
    let y = phase.node_values(&model);
    let rates: Vec<f64> = (0..g.len())
        .map(|v| {
            let k = g.level(v);
            if k > 0 && barrier.stops(y[v], k) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    RandomizedStoppingTime::from_rates(model, &rates)
}

/// Time marginal of a stopping rule as a target law.
pub fn time_marginal(rst: &RandomizedStoppingTime) -> Result<TargetDistribution> {
    let mut mass = rst.level_stops();
    mass[0] = 0.0;
    let total: f64 = mass.iter().sum();
    let last = mass.len() - 1;
    mass[last] += 1.0 - total;
    TargetDistribution::new(*rst.model().grid(), mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{CostFunctional, TimeWeight};
    use crate::lp::{assemble, feasibility_witness, solve};
    use crate::tree::{PathTree, StateKind, StateLattice};

    fn depth2() -> (Arc<Model>, TargetDistribution) {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let model = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
        let mu = TargetDistribution::new(g, vec![0.0, 0.5, 0.5]).unwrap();
        (model, mu)
    }

    fn optimal_depth2() -> RandomizedStoppingTime {
        let (model, mu) = depth2();
        let lp = assemble(model, &mu, &CostFunctional::LinearTime(TimeWeight::Identity)).unwrap();
        solve(&lp).unwrap().rst
    }

    #[test]
    fn depth_two_barrier() {
        let rst = optimal_depth2();
        let ex = extract_barrier(&rst, &PhaseProcess::position());
        assert_eq!(ex.lower.beta()[0], f64::NEG_INFINITY);
        assert_eq!(ex.lower.beta()[1], -1.0);
        assert_eq!(ex.lower.beta()[2], 2.0);
        assert!(ex.boundary_nodes.is_empty());
        assert!(check_monotone_region(&rst, &PhaseProcess::position()).barrier_type);
    }

    #[test]
    fn suboptimal_rule_breaks_the_region() {
        let (model, _) = depth2();
        let t = model.as_tree().unwrap();
        let u = t.node_id(t.node("u").unwrap()).unwrap();
        let d = t.node_id(t.node("d").unwrap()).unwrap();
        let mut rates = vec![0.0; 7];
        rates[u] = 1.0;
        let rst = RandomizedStoppingTime::from_rates(model.clone(), &rates);
        let rep = check_monotone_region(&rst, &PhaseProcess::position());
        assert!(!rep.barrier_type);
        assert_eq!(rep.offenders.len(), 1);
        assert_eq!((rep.offenders[0].continued, rep.offenders[0].stopped), (d, u));
        assert_eq!((rep.offenders[0].y_continued, rep.offenders[0].y_stopped), (-1.0, 1.0));
    }

    #[test]
    fn shared_phase_value_counts_as_one_randomized_atom() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let model = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
        let t = model.as_tree().unwrap();
        let id = |w: &str| t.node_id(t.node(w).unwrap()).unwrap();
        let mut rates = vec![0.0; 15];
        // "du" and "ud" both sit at 0: stopping one and continuing the other
        // randomizes that value
        rates[id("dd")] = 1.0;
        rates[id("ud")] = 1.0;
        let rst = RandomizedStoppingTime::from_rates(model.clone(), &rates);
        let rep = check_monotone_region(&rst, &PhaseProcess::position());
        assert!(rep.barrier_type, "{rep}");

        // the randomized value now sits above a continued node
        rates[id("dd")] = 0.0;
        let rst = RandomizedStoppingTime::from_rates(model.clone(), &rates);
        let rep = check_monotone_region(&rst, &PhaseProcess::position());
        assert!(!rep.barrier_type);
        assert_eq!(rep.offenders.len(), 1);
        assert_eq!(
            (rep.offenders[0].continued, rep.offenders[0].stopped),
            (id("dd"), id("ud"))
        );
    }

    #[test]
    fn dirac_at_horizon() {
        let g = TimeGrid::new(0.25, 4).unwrap();
        let model = Arc::new(Model::Lattice(StateLattice::new(g, StateKind::Position)));
        let mu = TargetDistribution::dirac(g, 4).unwrap();
        let lp = assemble(model.clone(), &mu, &CostFunctional::from_name("bt_at").unwrap()).unwrap();
        let rst = solve(&lp).unwrap().rst;
        let ex = extract_barrier(&rst, &PhaseProcess::position());
        for k in 0..4 {
            assert_eq!(ex.lower.beta()[k], f64::NEG_INFINITY);
        }
        assert!((ex.lower.beta()[4] - 4.0 * g.step()).abs() < 1e-12);
    }

    #[test]
    fn witness_is_not_barrier_type() {
        let (model, mu) = depth2();
        let w = feasibility_witness(model, &mu).unwrap();
        let ex = extract_barrier(&w, &PhaseProcess::position());
        assert!(!ex.boundary_nodes.is_empty());
        assert!(!ex.randomization_on_boundary());
        assert!(!check_monotone_region(&w, &PhaseProcess::position()).barrier_type);
    }

    #[test]
    fn barrier_interpolation_is_right_continuous() {
        let g = TimeGrid::new(0.5, 4).unwrap();
        let b = Barrier::new(g, vec![f64::NEG_INFINITY, -1.0, -2.0, -3.0, -4.0], true);
        assert_eq!(b.at_time(0.49), f64::NEG_INFINITY);
        assert_eq!(b.at_time(0.5), -1.0);
        assert_eq!(b.at_time(0.99), -1.0);
        assert_eq!(b.at_time(1.0), -2.0);
        assert_eq!(b.at_time(9.0), -4.0);
    }

    #[test]
    fn csv_format() {
        let rst = optimal_depth2();
        let ex = extract_barrier(&rst, &PhaseProcess::position());
        let csv = ex.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta_lower,beta_upper,boundary_rate");
        assert_eq!(lines[1], "0.0000000000000000e0,-inf,-inf,");
        assert!(lines[2].starts_with("1.0000000000000000e0,-1.0000000000000000e0,"));
    }

    #[test]
    fn hitting_rule_of_constant_barrier() {
        let g = TimeGrid::new(0.25, 8).unwrap();
        let model = Arc::new(Model::Lattice(StateLattice::new(g, StateKind::Position)));
        let rst = hitting_rst(model.clone(), &Barrier::constant(g, -0.5), &PhaseProcess::position());
        assert!(rst.check(None).holds(1e-14));
        let gr = model.graph();
        for v in 0..gr.len() {
            let k = gr.level(v);
            if k > 0 && k < 8 && rst.arrival(v) > 0.0 {
                assert_eq!(rst.rate(v) == Some(1.0), gr.value(v) <= -0.5 + 1e-12);
            }
        }
        let mu = time_marginal(&rst).unwrap();
        assert!((mu.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
