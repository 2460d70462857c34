//! Dual certificates: a time potential `psi` and a martingale `M` with
//! `M + psi <= c`, whose value matches the primal optimum.
//!
//! The potential starts from the level-row duals and is then pinned, level by
//! level from the horizon backwards, into the interval that makes every
//! stopped node prefer stopping and every continued node prefer continuing.
//! `V` is the Snell envelope of `c - psi`; it is a submartingale with
//! compensator `λ = E[V(children)] - V >= 0`, and `M_t = V(X_t) - Σ_{s<t} λ(X_s)`.
//! On a tree `M` is a function of the node; on a recombining lattice it
//! depends on the path, so the certificate keeps `V` and `λ` per node.

use super::{Solution, StoppingLp};
use crate::error::{Error, Result};
use crate::tree::Model;

#[derive(Debug, Clone)]
pub struct DualCertificate {
    /// Time potential per level; level 0 carries no mass and is 0.
    pub psi: Vec<f64>,
    /// Snell envelope of `c - psi`.
    pub value_fn: Vec<f64>,
    /// `E[V(children)] - V(v)`, zero at terminal nodes.
    pub compensator: Vec<f64>,
    /// Node martingale, available on trees.
    pub martingale: Option<Vec<f64>>,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub martingale_residual: f64,
    /// `max (M + psi - c)` over all nodes.
    pub feasibility_violation: f64,
    /// `max |M + psi - c|` over nodes with stop mass above the support threshold.
    pub slackness_violation: f64,
    /// Levels whose potential interval was empty (by how much).
    pub interval_conflicts: Vec<(usize, f64)>,
}

impl DualCertificate {
    pub fn gap_ok(&self) -> bool {
        self.gap <= 1e-8 * (1.0 + self.primal.abs())
    }

    pub fn holds(&self) -> bool {
        self.gap_ok()
            && self.martingale_residual <= 1e-8
            && self.feasibility_violation <= 1e-8
            && self.slackness_violation <= 1e-6
    }

    /// First failing invariant, for diagnostics.
    pub fn failure(&self) -> Option<String> {
        if !self.gap_ok() {
            return Some(format!(
                "duality gap {:.3e} (primal {}, dual {})",
                self.gap, self.primal, self.dual
            ));
        }
        if self.martingale_residual > 1e-8 {
            return Some(format!("martingale residual {:.3e}", self.martingale_residual));
        }
        if self.feasibility_violation > 1e-8 {
            return Some(format!("M + psi exceeds c by {:.3e}", self.feasibility_violation));
        }
        if self.slackness_violation > 1e-6 {
            return Some(format!(
                "complementary slackness off by {:.3e}",
                self.slackness_violation
            ));
        }
        None
    }
}

/// Build and verify the certificate for the primary cost component.
pub fn extract_dual(lp: &StoppingLp, solution: &Solution) -> Result<DualCertificate> {
    let cert = build(lp, solution);
    match cert.failure() {
        None => Ok(cert),
        Some(msg) => Err(Error::Dual(msg)),
    }
}

fn build(lp: &StoppingLp, solution: &Solution) -> DualCertificate {
    let model = lp.model();
    let g = model.graph();
    let rst = &solution.rst;
    let c: Vec<f64> = lp.costs().iter().map(|c| c.primary()).collect();
    let n = g.len();
    let last = g.last_level();
    let mut psi = solution.psi.clone();
    psi.resize(g.n_levels(), 0.0);
    psi[0] = 0.0;
    let mut conflicts = Vec::new();

    let mut value = vec![0.0; n];
    let mut comp = vec![0.0; n];
    for v in g.level_range(last) {
        value[v] = c[v] - psi[last];
    }
    for k in (0..last).rev() {
        let range = g.level_range(k);
        let cont: Vec<f64> = range
            .clone()
            .map(|v| {
                let [u, d] = g.children(v).expect("non-terminal");
                0.5 * (value[u] + value[d])
            })
            .collect();
        if k > 0 {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for (i, v) in range.clone().enumerate() {
                let diff = c[v] - cont[i];
                if rst.is_stopped(v) {
                    lo = lo.max(diff);
                }
                if rst.is_continued(v) {
                    hi = hi.min(diff);
                }
            }
            if lo <= hi {
                psi[k] = psi[k].clamp(lo, hi);
            } else {
                conflicts.push((k, lo - hi));
                psi[k] = 0.5 * (lo + hi);
            }
        }
        for (i, v) in range.enumerate() {
            let gv = c[v] - psi[k];
            value[v] = gv.min(cont[i]);
            comp[v] = cont[i] - value[v];
        }
    }

    let mu = lp.mu();
    let root_value: f64 = g.roots().iter().map(|&(r, w)| w * value[r]).sum();
    let dual = root_value + psi.iter().zip(mu.mass()).map(|(p, m)| p * m).sum::<f64>();
    let primal = solution.value;

    let martingale = match &**model {
        Model::Tree(_) => {
            let mut m = vec![0.0; n];
            for &(r, _) in g.roots() {
                m[r] = value[r];
            }
            for v in 0..n {
                if let Some([u, d]) = g.children(v) {
                    let drift = comp[v];
                    m[u] = m[v] + value[u] - value[v] - drift;
                    m[d] = m[v] + value[d] - value[v] - drift;
                }
            }
            Some(m)
        }
        Model::Lattice(_) => None,
    };

    // along the support, the compensator accumulated by paths carrying mass
    let mut acc = vec![f64::NEG_INFINITY; n];
    for &(r, _) in g.roots() {
        acc[r] = 0.0;
    }
    for v in 0..n {
        if let Some([u, d]) = g.children(v) {
            if rst.is_continued(v) && acc[v].is_finite() {
                let a = acc[v] + comp[v];
                acc[u] = acc[u].max(a);
                acc[d] = acc[d].max(a);
            }
        }
    }

    let mut mart_res: f64 = 0.0;
    let mut feas: f64 = f64::NEG_INFINITY;
    let mut slack: f64 = 0.0;
    for v in 0..n {
        let k = g.level(v);
        let m_here = match &martingale {
            Some(m) => m[v],
            None => value[v],
        };
        if let Some([u, d]) = g.children(v) {
            let res = match &martingale {
                Some(m) => (m[v] - 0.5 * (m[u] + m[d])).abs(),
                None => (value[v] + comp[v] - 0.5 * (value[u] + value[d])).abs(),
            };
            mart_res = mart_res.max(res).max(-comp[v]);
        }
        feas = feas.max(m_here + psi[k] - c[v]);
        if rst.is_stopped(v) {
            let on_path = match &martingale {
                Some(m) => m[v],
                None => value[v] - acc[v].max(0.0),
            };
            slack = slack.max((on_path + psi[k] - c[v]).abs());
        }
    }

    DualCertificate {
        psi,
        value_fn: value,
        compensator: comp,
        martingale,
        primal,
        dual,
        gap: (primal - dual).abs(),
        martingale_residual: mart_res,
        feasibility_violation: feas.max(0.0),
        slackness_violation: slack,
        interval_conflicts: conflicts,
    }
}
