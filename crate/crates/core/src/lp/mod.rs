//! The discrete optimal stopping problem with a prescribed stopping-time law,
//! written as a linear program over randomized stopping times.
//!
//! Trees use stop masses as variables with one capacity row per node.
//! Lattices use the mass continuing past each non-terminal node (scaled by the
//! free-walk probability), which keeps the rows short and the program well
//! conditioned at a few hundred thousand nodes.

mod dual;
mod program;
mod rst;

use std::sync::Arc;

pub use dual::{extract_dual, DualCertificate};
pub use program::{
    dense_simplex, highs_solve, solve_program, Backend, LinearProgram, LpSolution, Row, RowSense, DENSE_LIMIT,
};
pub use rst::{feasibility_witness, polish, InvariantReport, RandomizedStoppingTime, MASS_EPS};

use crate::costs::{CostFunctional, CostVector, Sufficiency};
use crate::error::{Error, Result};
use crate::grid::TargetDistribution;
use crate::tree::{node_path, Model, StateKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub backend: Backend,
    /// Primal and dual feasibility tolerance handed to HiGHS.
    pub tolerance: f64,
    /// Lattice nodes the free walk visits with probability below this never continue.
    pub prune_below: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Auto,
            tolerance: 1e-10,
            prune_below: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// One column per node holding its stop mass.
    StopMass,
    /// One column per non-terminal node holding its continuing mass.
    Continuation,
}

/// Assembled program together with the data needed to read solutions back.
#[derive(Debug, Clone)]
pub struct StoppingLp {
    model: Arc<Model>,
    mu: TargetDistribution,
    cost: CostFunctional,
    costs: Vec<CostVector>,
    formulation: Formulation,
    program: LinearProgram,
    /// Column scale: column value times scale is the node mass.
    scale: Vec<f64>,
    /// Rows whose duals carry the time potential.
    level_rows: Vec<usize>,
    options: SolverOptions,
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub rst: RandomizedStoppingTime,
    /// Primary-component cost of the polished solution.
    pub value: f64,
    /// Raw time potential read from the level-row duals; `psi[0] = 0`.
    pub psi: Vec<f64>,
    pub backend: Backend,
    pub iterations: usize,
}

/// Costs of every node, from states or (on trees) full path prefixes.
pub fn model_costs(model: &Model, cost: &CostFunctional) -> Result<Vec<CostVector>> {
    let g = model.graph();
    match model {
        Model::Tree(t) if !cost.is_markov() => Ok((0..g.len())
            .map(|v| cost.evaluate(&node_path(t, t.tree_node(v)).expect("tree node")))
            .collect()),
        Model::Tree(_) => cost.node_costs(g),
        Model::Lattice(l) => {
            match (cost.state_sufficient(), l.kind()) {
                (Sufficiency::FullTree, _) => {
                    return Err(Error::Model(format!("cost `{}` needs the full path tree", cost.name())))
                }
                (Sufficiency::PositionAndMax, StateKind::Position) => {
                    return Err(Error::Model(format!(
                        "cost `{}` needs the running maximum; use a position_and_max lattice",
                        cost.name()
                    )))
                }
                _ => {}
            }
            cost.node_costs(g)
        }
    }
}

pub fn assemble(model: Arc<Model>, mu: &TargetDistribution, cost: &CostFunctional) -> Result<StoppingLp> {
    assemble_with(model, mu, cost, SolverOptions::default())
}

pub fn assemble_with(
    model: Arc<Model>,
    mu: &TargetDistribution,
    cost: &CostFunctional,
    options: SolverOptions,
) -> Result<StoppingLp> {
    if !model.grid().matches(mu.grid()) {
        return Err(Error::Model(format!(
            "target grid (dt={}, N={}) differs from model grid (dt={}, N={})",
            mu.grid().dt(),
            mu.grid().n_steps(),
            model.grid().dt(),
            model.grid().n_steps()
        )));
    }
    let costs = model_costs(&model, cost)?;
    let g = model.graph();
    let n_levels = g.n_levels();
    let formulation = match &*model {
        Model::Tree(_) => Formulation::StopMass,
        Model::Lattice(_) => Formulation::Continuation,
    };
    let (program, scale, level_rows) = match formulation {
        Formulation::StopMass => {
            let n = g.len();
            let mut lp = LinearProgram::new(n);
            for (v, c) in costs.iter().enumerate() {
                lp.objective[v] = c.primary();
            }
            for &(r, _) in g.roots() {
                lp.fixed_zero[r] = true;
            }
            // s(v) + Σ_{w < v} 2^{-(|v|-|w|)} s(w) <= π(v)
            let mut anc: Vec<Vec<usize>> = vec![Vec::new(); n];
            for v in 0..n {
                if let Some([u, d]) = g.children(v) {
                    let mut chain = anc[v].clone();
                    chain.push(v);
                    anc[u] = chain.clone();
                    anc[d] = chain;
                }
            }
            for v in 0..n {
                let lv = g.level(v) as i32;
                let mut entries = vec![(v, 1.0)];
                entries.extend(anc[v].iter().map(|&w| (w, 0.5f64.powi(lv - g.level(w) as i32))));
                lp.add_row(entries, RowSense::Le, g.prob(v));
            }
            let mut level_rows = vec![usize::MAX];
            for k in 1..n_levels {
                let entries = g.level_range(k).map(|v| (v, 1.0)).collect();
                level_rows.push(lp.add_row(entries, RowSense::Eq, mu.mass_at(k)));
            }
            (lp, vec![1.0; n], level_rows)
        }
        Formulation::Continuation => {
            // Columns are continued masses, not fractions of arrival mass: the
            // fractional form puts arrival probabilities down to the pruning
            // threshold into the level rows and HiGHS stalls on it.
            let n_cols = g.level_range(g.last_level()).start;
            let mut lp = LinearProgram::new(n_cols);
            for v in 0..n_cols {
                let [u, d] = g.children(v).expect("non-terminal");
                lp.objective[v] = 0.5 * (costs[u].primary() + costs[d].primary()) - costs[v].primary();
                lp.fixed_zero[v] = g.prob(v) < options.prune_below;
            }
            // x(v) <= Σ_parents ½ x(p)
            for v in g.level_range(1).start..n_cols {
                let mut entries = vec![(v, 1.0)];
                entries.extend(g.parents(v).iter().map(|&p| (p as usize, -0.5)));
                lp.add_row(entries, RowSense::Le, 0.0);
            }
            // Σ_{level k} x = mass still running after level k
            let mut level_rows = Vec::with_capacity(n_levels - 1);
            for k in 0..n_levels - 1 {
                let entries = g.level_range(k).map(|v| (v, 1.0)).collect();
                level_rows.push(lp.add_row(entries, RowSense::Eq, mu.tail(k + 1)));
            }
            let scale = vec![1.0; n_cols];
            (lp, scale, level_rows)
        }
    };
    Ok(StoppingLp {
        model,
        mu: mu.clone(),
        cost: cost.clone(),
        costs,
        formulation,
        program,
        scale,
        level_rows,
        options,
    })
}

impl StoppingLp {
    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn mu(&self) -> &TargetDistribution {
        &self.mu
    }

    pub fn cost(&self) -> &CostFunctional {
        &self.cost
    }

    pub fn costs(&self) -> &[CostVector] {
        &self.costs
    }

    pub fn formulation(&self) -> Formulation {
        self.formulation
    }

    pub fn program(&self) -> &LinearProgram {
        &self.program
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    pub fn n_columns(&self) -> usize {
        self.program.n_cols()
    }

    pub fn n_rows(&self) -> usize {
        self.program.n_rows()
    }

    /// Rows tying each level to the target law.
    pub fn n_level_rows(&self) -> usize {
        self.level_rows.iter().filter(|&&r| r != usize::MAX).count()
    }

    /// Objective coefficients for cost component `i`, and the constant term.
    fn objective_for(&self, i: usize) -> (Vec<f64>, f64) {
        let g = self.model.graph();
        match self.formulation {
            Formulation::StopMass => (self.costs.iter().map(|c| c.get(i)).collect(), 0.0),
            Formulation::Continuation => {
                let obj = (0..self.program.n_cols())
                    .map(|v| {
                        let [u, d] = g.children(v).expect("non-terminal");
                        (0.5 * (self.costs[u].get(i) + self.costs[d].get(i)) - self.costs[v].get(i)) * self.scale[v]
                    })
                    .collect();
                let constant = g.roots().iter().map(|&(r, w)| w * self.costs[r].get(i)).sum();
                (obj, constant)
            }
        }
    }

    fn to_rst(&self, sol: &LpSolution) -> RandomizedStoppingTime {
        let g = self.model.graph();
        let n = g.len();
        let mut rates = vec![0.0; n];
        match self.formulation {
            Formulation::StopMass => {
                let raw = RandomizedStoppingTime::from_stop_mass(self.model.clone(), sol.x.clone());
                for (v, r) in rates.iter_mut().enumerate() {
                    *r = raw.rate(v).unwrap_or(0.0);
                }
            }
            Formulation::Continuation => {
                let mut arrival = vec![0.0; n];
                for &(r, w) in g.roots() {
                    arrival[r] += w;
                }
                for v in 0..self.program.n_cols() {
                    let x = sol.x[v] * self.scale[v];
                    rates[v] = if arrival[v] > 0.0 { 1.0 - x / arrival[v] } else { 0.0 };
                    let [u, d] = g.children(v).expect("non-terminal");
                    arrival[u] += 0.5 * x;
                    arrival[d] += 0.5 * x;
                }
                for r in rates.iter_mut().skip(self.program.n_cols()) {
                    *r = 1.0;
                }
            }
        }
        polish(self.model.clone(), &rates, &self.mu)
    }

    fn psi_from(&self, sol: &LpSolution) -> Vec<f64> {
        let n_levels = self.model.graph().n_levels();
        let mut psi = vec![0.0; n_levels];
        match self.formulation {
            Formulation::StopMass => {
                for k in 1..n_levels {
                    psi[k] = sol.row_duals[self.level_rows[k]];
                }
            }
            Formulation::Continuation => {
                // the level-k row prices moving mass from level k to k+1
                for k in 0..n_levels - 1 {
                    psi[k + 1] = psi[k] + sol.row_duals[self.level_rows[k]];
                }
            }
        }
        psi
    }

    fn run(&self, program: &LinearProgram) -> Result<(LpSolution, Backend)> {
        // lattice rows mix coefficients from 1 down to the pruning threshold
        let backend = match (self.options.backend, self.formulation) {
            (Backend::Auto, Formulation::Continuation) => Backend::Highs,
            (b, _) => b,
        };
        solve_program(program, backend, self.options.tolerance)
    }
}

/// Minimize the primary cost component.
pub fn solve(lp: &StoppingLp) -> Result<Solution> {
    let (sol, backend) = lp.run(&lp.program)?;
    let rst = lp.to_rst(&sol);
    check_rst(&rst, &lp.mu)?;
    let value = rst.cost(&lp.costs).primary();
    Ok(Solution {
        psi: lp.psi_from(&sol),
        rst,
        value,
        backend,
        iterations: sol.iterations,
    })
}

fn check_rst(rst: &RandomizedStoppingTime, mu: &TargetDistribution) -> Result<()> {
    let rep = rst.check(Some(mu));
    if !rep.holds(1e-9) {
        return Err(Error::solver(format!(
            "solution violates invariants after polishing: {rep:?}"
        )));
    }
    Ok(())
}

/// Output of [`solve_lexicographic`].
#[derive(Debug, Clone)]
pub struct LexSolution {
    pub rst: RandomizedStoppingTime,
    pub values: CostVector,
    /// Optimal primary value from the first stage alone.
    pub stage1_value: f64,
    /// Time potential of the first stage.
    pub psi: Vec<f64>,
    pub backend: Backend,
}

/// Minimize the primary component, then the secondary one over the optimal face.
pub fn solve_lexicographic(lp: &StoppingLp) -> Result<LexSolution> {
    solve_lexicographic_from(lp, solve(lp)?)
}

/// Second stage of [`solve_lexicographic`] on top of a first-stage optimum
/// already in hand.
pub fn solve_lexicographic_from(lp: &StoppingLp, stage1: Solution) -> Result<LexSolution> {
    if lp.cost.arity() < 2 {
        let values = stage1.rst.cost(&lp.costs);
        return Ok(LexSolution {
            values,
            stage1_value: stage1.value,
            psi: stage1.psi,
            backend: stage1.backend,
            rst: stage1.rst,
        });
    }
    let (obj1, const1) = lp.objective_for(0);
    let (obj2, _) = lp.objective_for(1);
    let pinned = stage1.value - const1;
    let mut program = lp.program.clone();
    let entries = obj1
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(j, c)| (j, *c))
        .collect();
    program.add_row(entries, RowSense::Le, pinned + 1e-9 * (1.0 + stage1.value.abs()));
    program.objective = obj2;
    let (sol, backend) = lp.run(&program)?;
    let rst = lp.to_rst(&sol);
    check_rst(&rst, &lp.mu)?;
    let values = rst.cost(&lp.costs);
    Ok(LexSolution {
        rst,
        values,
        stage1_value: stage1.value,
        psi: stage1.psi,
        backend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::TimeWeight;
    use crate::grid::TimeGrid;
    use crate::tree::{PathTree, StateLattice};
    use approx::assert_abs_diff_eq;

    fn depth2() -> (Arc<Model>, TargetDistribution) {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let model = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
        let mu = TargetDistribution::new(g, vec![0.0, 0.5, 0.5]).unwrap();
        (model, mu)
    }

    #[test]
    fn depth_two_shape() {
        let (model, mu) = depth2();
        let lp = assemble(model, &mu, &CostFunctional::LinearTime(TimeWeight::Identity)).unwrap();
        assert_eq!(lp.n_columns(), 7);
        assert_eq!(lp.n_level_rows(), 2);
        assert_eq!(lp.n_rows(), 7 + 2);
    }

    #[test]
    fn depth_two_maximize_and_minimize() {
        let (model, mu) = depth2();
        let lp = assemble(model.clone(), &mu, &CostFunctional::LinearTime(TimeWeight::Identity)).unwrap();
        let sol = solve(&lp).unwrap();
        // maximized E[B_τ τ] is the negated minimum
        assert_abs_diff_eq!(-sol.value, 0.5, epsilon = 1e-12);
        let t = model.as_tree().unwrap();
        let d = t.node_id(t.node("d").unwrap()).unwrap();
        let u = t.node_id(t.node("u").unwrap()).unwrap();
        assert_abs_diff_eq!(sol.rst.stop(d), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.rst.stop(u), 0.0, epsilon = 1e-12);

        let flipped = CostFunctional::LinearTime(TimeWeight::Custom(Arc::new(|t| -t)));
        let lp = assemble(model, &mu, &flipped).unwrap();
        let sol = solve(&lp).unwrap();
        assert_abs_diff_eq!(sol.value, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.rst.stop(u), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn dirac_at_horizon_is_forced() {
        let g = TimeGrid::new(0.5, 3).unwrap();
        let model = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
        let mu = TargetDistribution::dirac(g, 3).unwrap();
        let cost = CostFunctional::from_name("phi_cubed").unwrap();
        let lp = assemble(model.clone(), &mu, &cost).unwrap();
        let sol = solve(&lp).unwrap();
        let gr = model.graph();
        let expected: f64 = gr.level_range(3).map(|v| gr.prob(v) * -gr.value(v).powi(3)).sum();
        assert_abs_diff_eq!(sol.value, expected, epsilon = 1e-12);
        for v in gr.level_range(3) {
            assert_abs_diff_eq!(sol.rst.stop(v), gr.prob(v), epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_model_error() {
        let (model, _) = depth2();
        let other = TargetDistribution::dirac(TimeGrid::new(0.5, 2).unwrap(), 2).unwrap();
        let err = assemble(model, &other, &CostFunctional::from_name("bt_at").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
    }

    #[test]
    fn lattice_cost_routing() {
        let g = TimeGrid::new(0.25, 4).unwrap();
        let mu = TargetDistribution::dirac(g, 4).unwrap();
        let pos = Arc::new(Model::Lattice(StateLattice::new(g, StateKind::Position)));
        assert!(matches!(
            assemble(pos, &mu, &CostFunctional::NegRunningMax),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn lattice_node_count_at_scale() {
        let g = TimeGrid::new(0.01, 500).unwrap();
        let lattice = StateLattice::new(g, StateKind::Position);
        let n: usize = (0..=500).map(|k| k + 1).sum();
        assert_eq!(lattice.graph().len(), n);
    }

    #[test]
    fn lattice_backends_agree() {
        let g = TimeGrid::new(0.1, 12).unwrap();
        let mut mass = vec![0.0; 13];
        mass[2] = 0.2;
        mass[5] = 0.3;
        mass[9] = 0.1;
        mass[12] = 0.4;
        let mu = TargetDistribution::new(g, mass).unwrap();
        for kind in [StateKind::Position, StateKind::PositionAndMax] {
            let model = Arc::new(Model::Lattice(StateLattice::new(g, kind)));
            for name in ["bt_at", "phi_cubed", "neg_max"] {
                let cost = CostFunctional::from_name(name).unwrap();
                if kind == StateKind::Position && name == "neg_max" {
                    continue;
                }
                let dense = SolverOptions {
                    backend: Backend::DenseSimplex,
                    ..Default::default()
                };
                let highs = SolverOptions {
                    backend: Backend::Highs,
                    ..Default::default()
                };
                let a = solve(&assemble_with(model.clone(), &mu, &cost, dense).unwrap()).unwrap();
                let b = solve(&assemble_with(model.clone(), &mu, &cost, highs).unwrap()).unwrap();
                assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn lattice_matches_tree_value() {
        // the Markov lattice loses nothing against the full tree for Markov costs
        let g = TimeGrid::new(0.2, 8).unwrap();
        let mut mass = vec![0.0; 9];
        mass[3] = 0.25;
        mass[6] = 0.35;
        mass[8] = 0.4;
        let mu = TargetDistribution::new(g, mass).unwrap();
        for (name, kind) in [
            ("bt_at", StateKind::Position),
            ("drawdown_lex", StateKind::PositionAndMax),
        ] {
            let cost = CostFunctional::from_name(name).unwrap();
            let tree = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
            let lat = Arc::new(Model::Lattice(StateLattice::new(g, kind)));
            let a = solve_lexicographic(&assemble(tree, &mu, &cost).unwrap()).unwrap();
            let b = solve_lexicographic(&assemble(lat, &mu, &cost).unwrap()).unwrap();
            assert_abs_diff_eq!(a.values.get(0), b.values.get(0), epsilon = 1e-9);
            assert_abs_diff_eq!(a.values.get(1), b.values.get(1), epsilon = 1e-7);
        }
    }
}
