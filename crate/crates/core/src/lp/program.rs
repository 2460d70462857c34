//! Generic sparse linear programs `min c·x, A x (<= | =) b, 0 <= x` and their backends.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub entries: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    /// Columns pinned to zero.
    pub fixed_zero: Vec<bool>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new(n_cols: usize) -> Self {
        Self {
            objective: vec![0.0; n_cols],
            fixed_zero: vec![false; n_cols],
            rows: Vec::new(),
        }
    }

    pub fn n_cols(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_row(&mut self, entries: Vec<(usize, f64)>, sense: RowSense, rhs: f64) -> usize {
        self.rows.push(Row { entries, sense, rhs });
        self.rows.len() - 1
    }
}

/// Primal point and row duals `y` with reduced costs `c - Aᵀy >= 0` at optimality.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub row_duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Dense simplex for small programs, HiGHS otherwise.
    #[default]
    Auto,
    DenseSimplex,
    Highs,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Auto => "auto",
            Backend::DenseSimplex => "dense-simplex",
            Backend::Highs => "highs",
        })
    }
}

/// Largest `rows * cols` handed to the dense simplex under [`Backend::Auto`].
pub const DENSE_LIMIT: usize = 400_000;

pub fn solve_program(lp: &LinearProgram, backend: Backend, tolerance: f64) -> Result<(LpSolution, Backend)> {
    let dense_ok = lp.n_rows().saturating_mul(lp.n_cols()) <= DENSE_LIMIT;
    match backend {
        Backend::DenseSimplex => Ok((dense_simplex(lp)?, Backend::DenseSimplex)),
        Backend::Auto if dense_ok => Ok((dense_simplex(lp)?, Backend::DenseSimplex)),
        _ => Ok((highs_solve(lp, tolerance)?, Backend::Highs)),
    }
}

const PIVOT_EPS: f64 = 1e-11;
const COST_EPS: f64 = 1e-11;
/// Consecutive degenerate pivots before pricing falls back to Bland's rule.
const DEGENERATE_SWITCH: usize = 50;

/// Two-phase tableau simplex, Dantzig pricing with Bland's rule during long
/// degenerate stretches; deterministic and exact enough for desk-scale programs.
pub fn dense_simplex(lp: &LinearProgram) -> Result<LpSolution> {
    let m = lp.n_rows();
    let n = lp.n_cols();
    // tableau columns: originals, one slack per Le row, one artificial per row needing it
    let mut sign = vec![1.0; m];
    let mut slack_col = vec![usize::MAX; m];
    let mut art_col = vec![usize::MAX; m];
    let mut width = n;
    for (i, row) in lp.rows.iter().enumerate() {
        if row.rhs < 0.0 {
            sign[i] = -1.0;
        }
        if row.sense == RowSense::Le {
            slack_col[i] = width;
            width += 1;
        }
    }
    let n_struct = width;
    for (i, row) in lp.rows.iter().enumerate() {
        // a Le row with b >= 0 starts with its slack basic
        if !(row.sense == RowSense::Le && sign[i] > 0.0) {
            art_col[i] = width;
            width += 1;
        }
    }
    let stride = width + 1;
    let mut t = vec![0.0; m * stride];
    let mut basis = vec![0usize; m];
    let mut init_col = vec![0usize; m];
    for (i, row) in lp.rows.iter().enumerate() {
        let r = &mut t[i * stride..(i + 1) * stride];
        for &(j, a) in &row.entries {
            r[j] += sign[i] * a;
        }
        if slack_col[i] != usize::MAX {
            r[slack_col[i]] = sign[i];
        }
        if art_col[i] != usize::MAX {
            r[art_col[i]] = 1.0;
            basis[i] = art_col[i];
        } else {
            basis[i] = slack_col[i];
        }
        init_col[i] = basis[i];
        r[width] = sign[i] * row.rhs;
    }
    let allowed = |j: usize| -> bool { j >= n || !lp.fixed_zero[j] };

    let mut iterations = 0usize;
    let max_iter = 200 * (m + width) + 10_000;
    let mut log: Vec<String> = Vec::new();

    // phase 1
    let has_art = art_col.iter().any(|&c| c != usize::MAX);
    if has_art {
        let mut cost = vec![0.0; width];
        for &c in &art_col {
            if c != usize::MAX {
                cost[c] = 1.0;
            }
        }
        let enter_ok = |j: usize| j < width && allowed(j);
        run_simplex(
            &mut t,
            &mut basis,
            m,
            width,
            &cost,
            &enter_ok,
            &mut iterations,
            max_iter,
            &mut log,
        )?;
        let infeas: f64 = (0..m)
            .filter(|&i| basis[i] >= n_struct)
            .map(|i| t[i * stride + width])
            .sum();
        if infeas > 1e-9 {
            return Err(Error::Infeasible(format!("phase-one residual {infeas:.3e}")));
        }
        // drive zero-level artificials out of the basis
        for i in 0..m {
            if basis[i] >= n_struct {
                let row = &t[i * stride..(i + 1) * stride];
                if let Some(j) = (0..n_struct).find(|&j| allowed(j) && row[j].abs() > 1e-9) {
                    pivot(&mut t, &mut basis, m, stride, i, j);
                    iterations += 1;
                }
            }
        }
    }

    // phase 2
    let mut cost = vec![0.0; width];
    cost[..n].copy_from_slice(&lp.objective);
    let enter_ok = |j: usize| j < n_struct && allowed(j);
    run_simplex(
        &mut t,
        &mut basis,
        m,
        width,
        &cost,
        &enter_ok,
        &mut iterations,
        max_iter,
        &mut log,
    )?;

    let mut x = vec![0.0; n];
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] = t[i * stride + width].max(0.0);
        }
    }
    // y' = c_B B^{-1}; column init_col[i] of the tableau holds B^{-1} e_i
    let row_duals = (0..m)
        .map(|i| {
            let col = init_col[i];
            let y: f64 = (0..m).map(|r| cost[basis[r]] * t[r * stride + col]).sum();
            sign[i] * y
        })
        .collect();
    let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        row_duals,
        objective,
        iterations,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_simplex(
    t: &mut [f64],
    basis: &mut [usize],
    m: usize,
    width: usize,
    cost: &[f64],
    enter_ok: &dyn Fn(usize) -> bool,
    iterations: &mut usize,
    max_iter: usize,
    log: &mut Vec<String>,
) -> Result<()> {
    let stride = width + 1;
    let mut in_basis = vec![false; width];
    for &b in basis.iter() {
        in_basis[b] = true;
    }
    let mut degenerate_run = 0usize;
    loop {
        // reduced costs d_j = c_j - c_B B^{-1} a_j
        let bland = degenerate_run >= DEGENERATE_SWITCH;
        let mut enter: Option<(usize, f64)> = None;
        for j in 0..width {
            if !enter_ok(j) || in_basis[j] {
                continue;
            }
            let mut d = cost[j];
            for r in 0..m {
                let a = t[r * stride + j];
                if a != 0.0 {
                    d -= cost[basis[r]] * a;
                }
            }
            if d < -COST_EPS && enter.is_none_or(|(_, best)| d < best) {
                enter = Some((j, d));
                if bland {
                    break;
                }
            }
        }
        let Some((j, _)) = enter else { return Ok(()) };
        // ratio test, ties to the smallest basic index
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let a = t[r * stride + j];
            if a > PIVOT_EPS {
                let ratio = t[r * stride + width] / a;
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, best)) => {
                        if ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[r] < basis[lr]) {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((r, step)) = leave else {
            return Err(Error::Solver {
                message: format!("unbounded direction at column {j}"),
                log: log.clone(),
            });
        };
        if step > 1e-14 {
            degenerate_run = 0;
        } else {
            degenerate_run += 1;
        }
        in_basis[basis[r]] = false;
        in_basis[j] = true;
        pivot(t, basis, m, stride, r, j);
        *iterations += 1;
        if (*iterations).is_multiple_of(1000) {
            log.push(format!("iteration {}: entering {j}, leaving row {r}", *iterations));
        }
        if *iterations > max_iter {
            return Err(Error::Solver {
                message: format!("iteration limit {max_iter} reached"),
                log: log.clone(),
            });
        }
    }
}

fn pivot(t: &mut [f64], basis: &mut [usize], m: usize, stride: usize, r: usize, j: usize) {
    let p = t[r * stride + j];
    for v in &mut t[r * stride..(r + 1) * stride] {
        *v /= p;
    }
    let pivot_row: Vec<f64> = t[r * stride..(r + 1) * stride].to_vec();
    for i in 0..m {
        if i == r {
            continue;
        }
        let f = t[i * stride + j];
        if f != 0.0 {
            let row = &mut t[i * stride..(i + 1) * stride];
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            row[j] = 0.0;
        }
    }
    basis[r] = j;
}

/// Dual simplex in HiGHS, single-threaded and quiet.
pub fn highs_solve(lp: &LinearProgram, tolerance: f64) -> Result<LpSolution> {
    use highs::{HighsModelStatus, RowProblem, Sense};
    let mut pb = RowProblem::default();
    let cols: Vec<_> = (0..lp.n_cols())
        .map(|j| {
            if lp.fixed_zero[j] {
                pb.add_column(lp.objective[j], 0.0..=0.0)
            } else {
                pb.add_column(lp.objective[j], 0.0..)
            }
        })
        .collect();
    for row in &lp.rows {
        let entries: Vec<_> = row.entries.iter().map(|&(j, a)| (cols[j], a)).collect();
        match row.sense {
            RowSense::Le => pb.add_row(..=row.rhs, entries),
            RowSense::Eq => pb.add_row(row.rhs..=row.rhs, entries),
        }
    }
    let mut model = pb.optimise(Sense::Minimise);
    model.make_quiet();
    model.set_option("threads", 1);
    model.set_option("solver", "simplex");
    model.set_option("simplex_strategy", 1);
    model.set_option("random_seed", 0);
    model.set_option("primal_feasibility_tolerance", tolerance);
    model.set_option("dual_feasibility_tolerance", tolerance);
    let solved = model
        .try_solve()
        .map_err(|s| Error::solver(format!("HiGHS returned status {s:?}")))?;
    let iterations = solved.simplex_iteration_count().max(0) as usize;
    match solved.status() {
        HighsModelStatus::Optimal => {}
        HighsModelStatus::Infeasible => return Err(Error::Infeasible("HiGHS reports the program infeasible".into())),
        other => {
            return Err(Error::Solver {
                message: format!("HiGHS stopped with model status {other:?}"),
                log: vec![format!("simplex iterations: {iterations}")],
            })
        }
    }
    let sol = solved.get_solution();
    let x: Vec<f64> = sol.columns().iter().map(|v| v.max(0.0)).collect();
    let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        row_duals: sol.dual_rows().to_vec(),
        objective,
        iterations,
    })
}
