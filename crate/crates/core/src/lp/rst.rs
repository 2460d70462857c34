use std::fmt::Write as _;
use std::sync::Arc;

use crate::costs::CostVector;
use crate::error::{Error, Result};
use crate::grid::TargetDistribution;
use crate::tree::Model;

/// Masses at or below this are treated as absent when reading off supports.
pub const MASS_EPS: f64 = 1e-9;

/// Per-node stopping mass with arrival bookkeeping on a discrete model.
#[derive(Debug, Clone)]
pub struct RandomizedStoppingTime {
    model: Arc<Model>,
    arrival: Vec<f64>,
    stop: Vec<f64>,
}

/// Worst residuals of the structural invariants.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InvariantReport {
    pub flow: f64,
    pub bounds: f64,
    pub marginal: f64,
    pub total: f64,
}

impl InvariantReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.flow <= tol && self.bounds <= tol && self.marginal <= tol && self.total <= tol
    }
}

impl RandomizedStoppingTime {
    /// Arrivals follow from stop masses by forward induction.
    pub fn from_stop_mass(model: Arc<Model>, stop: Vec<f64>) -> Self {
        let g = model.graph();
        let mut arrival = vec![0.0; g.len()];
        for &(r, w) in g.roots() {
            arrival[r] += w;
        }
        for v in 0..g.len() {
            if let Some([u, d]) = g.children(v) {
                let x = 0.5 * (arrival[v] - stop[v]);
                arrival[u] += x;
                arrival[d] += x;
            }
        }
        Self { model, arrival, stop }
    }

    /// Conditional stop rates in `[0, 1]`; the last level always stops.
    pub fn from_rates(model: Arc<Model>, rates: &[f64]) -> Self {
        let g = model.graph();
        let mut arrival = vec![0.0; g.len()];
        let mut stop = vec![0.0; g.len()];
        for &(r, w) in g.roots() {
            arrival[r] += w;
        }
        for v in 0..g.len() {
            match g.children(v) {
                Some([u, d]) => {
                    stop[v] = rates[v].clamp(0.0, 1.0) * arrival[v];
                    let x = 0.5 * (arrival[v] - stop[v]);
                    arrival[u] += x;
                    arrival[d] += x;
                }
                None => stop[v] = arrival[v],
            }
        }
        Self { model, arrival, stop }
    }

    /// Raw parts, not checked.
    pub fn from_parts(model: Arc<Model>, arrival: Vec<f64>, stop: Vec<f64>) -> Self {
        Self { model, arrival, stop }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn arrival(&self, v: usize) -> f64 {
        self.arrival[v]
    }

    pub fn stop(&self, v: usize) -> f64 {
        self.stop[v]
    }

    pub fn arrivals(&self) -> &[f64] {
        &self.arrival
    }

    pub fn stops(&self) -> &[f64] {
        &self.stop
    }

    /// Mass continuing past `v`.
    pub fn continuing(&self, v: usize) -> f64 {
        self.arrival[v] - self.stop[v]
    }

    /// Conditional stop rate, defined where mass arrives.
    pub fn rate(&self, v: usize) -> Option<f64> {
        (self.arrival[v] > 0.0).then(|| (self.stop[v] / self.arrival[v]).clamp(0.0, 1.0))
    }

    /// Stopped beyond the support threshold.
    pub fn is_stopped(&self, v: usize) -> bool {
        self.stop[v] > MASS_EPS
    }

    /// Continued beyond the support threshold.
    pub fn is_continued(&self, v: usize) -> bool {
        !self.model.graph().is_terminal(v) && self.continuing(v) > MASS_EPS
    }

    /// Stopped mass per level.
    pub fn level_stops(&self) -> Vec<f64> {
        let g = self.model.graph();
        (0..g.n_levels())
            .map(|k| g.level_range(k).map(|v| self.stop[v]).sum())
            .collect()
    }

    pub fn cost(&self, costs: &[CostVector]) -> CostVector {
        let arity = costs.first().map_or(1, |c| c.arity());
        self.stop
            .iter()
            .zip(costs)
            .filter(|(s, _)| **s != 0.0)
            .fold(CostVector::zero(arity), |acc, (s, c)| acc.add(c.scale(*s)))
    }

    pub fn check(&self, mu: Option<&TargetDistribution>) -> InvariantReport {
        let g = self.model.graph();
        let mut expect = vec![0.0; g.len()];
        for &(r, w) in g.roots() {
            expect[r] += w;
        }
        let mut rep = InvariantReport::default();
        for v in 0..g.len() {
            rep.flow = rep.flow.max((self.arrival[v] - expect[v]).abs());
            rep.bounds = rep.bounds.max(-self.stop[v]).max(self.stop[v] - self.arrival[v]);
            if let Some([u, d]) = g.children(v) {
                let x = 0.5 * (self.arrival[v] - self.stop[v]);
                expect[u] += x;
                expect[d] += x;
            }
        }
        let levels = self.level_stops();
        if let Some(mu) = mu {
            rep.marginal = levels
                .iter()
                .zip(mu.mass())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        }
        rep.total = (levels.iter().sum::<f64>() - 1.0).abs();
        rep
    }

    /// Nodes of a level in the stopped support.
    pub fn stopped_at(&self, k: usize) -> Vec<usize> {
        self.model
            .graph()
            .level_range(k)
            .filter(|&v| self.is_stopped(v))
            .collect()
    }

    /// Nodes of a level in the continued support.
    pub fn continued_at(&self, k: usize) -> Vec<usize> {
        self.model
            .graph()
            .level_range(k)
            .filter(|&v| self.is_continued(v))
            .collect()
    }

    /// CSV dump with one row per node.
    pub fn to_csv(&self) -> String {
        let g = self.model.graph();
        let mut out = String::from("node_id,level,state_b,state_m,arrival_mass,stop_mass,stop_rate\n");
        for v in 0..g.len() {
            let m = g.m(v).map(|m| m.to_string()).unwrap_or_default();
            let rate = self.rate(v).map(|r| format!("{r:.16e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{v},{},{},{m},{:.16e},{:.16e},{rate}",
                g.level(v),
                g.b(v),
                self.arrival[v],
                self.stop[v]
            );
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv) on the same model.
    pub fn from_csv(model: Arc<Model>, text: &str, origin: &str) -> Result<Self> {
        let g = model.graph();
        let n = g.len();
        let mut arrival = vec![f64::NAN; n];
        let mut stop = vec![f64::NAN; n];
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if i == 0 && line.starts_with("node_id") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err(line_no, format!("expected 7 fields, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(line_no, format!("`{s}`: {e}")));
            let v: usize = f[0].trim().parse().map_err(|e| err(line_no, format!("node id: {e}")))?;
            if v >= n {
                return Err(err(line_no, format!("node {v} outside the model ({n} nodes)")));
            }
            let level: usize = f[1].trim().parse().map_err(|e| err(line_no, format!("level: {e}")))?;
            let b: i32 = f[2].trim().parse().map_err(|e| err(line_no, format!("state_b: {e}")))?;
            if level != g.level(v) || b != g.b(v) {
                return Err(err(line_no, format!("node {v} does not match the model's state")));
            }
            arrival[v] = num(f[4])?;
            stop[v] = num(f[5])?;
        }
        if let Some(v) = arrival.iter().position(|a| a.is_nan()) {
            return Err(err(0, format!("node {v} missing")));
        }
        Ok(Self { model, arrival, stop })
    }
}

/// Turn an approximate solution into an exact one: forward recomputation
/// from conditional rates, then per-level correction of the stopped mass so
/// the time marginal matches `mu`.
pub fn polish(model: Arc<Model>, rates: &[f64], mu: &TargetDistribution) -> RandomizedStoppingTime {
    const SNAP: f64 = 1e-9;
    let g = model.graph();
    let n = g.len();
    let mut arrival = vec![0.0; n];
    let mut stop = vec![0.0; n];
    for &(r, w) in g.roots() {
        arrival[r] += w;
    }
    for k in 0..g.n_levels() {
        let range = g.level_range(k);
        if k == g.last_level() {
            for v in range {
                stop[v] = arrival[v];
            }
            break;
        }
        for v in range.clone() {
            let mut q = rates[v].clamp(0.0, 1.0);
            if q < SNAP {
                q = 0.0;
            } else if q > 1.0 - SNAP {
                q = 1.0;
            }
            stop[v] = q * arrival[v];
        }
        let target = mu.mass_at(k);
        let have: f64 = range.clone().map(|v| stop[v]).sum();
        let delta = target - have;
        if delta != 0.0 {
            // fractional nodes absorb the correction first
            let frac: Vec<usize> = range
                .clone()
                .filter(|&v| stop[v] > 0.0 && stop[v] < arrival[v])
                .collect();
            let pool: Vec<usize> = if delta > 0.0 {
                let f: Vec<usize> = frac.iter().copied().filter(|&v| arrival[v] - stop[v] > 0.0).collect();
                let room: f64 = f.iter().map(|&v| arrival[v] - stop[v]).sum();
                if room >= delta {
                    f
                } else {
                    range.clone().filter(|&v| arrival[v] > stop[v]).collect()
                }
            } else {
                let room: f64 = frac.iter().map(|&v| stop[v]).sum();
                if room >= -delta {
                    frac
                } else {
                    range.clone().filter(|&v| stop[v] > 0.0).collect()
                }
            };
            let room: f64 = pool
                .iter()
                .map(|&v| if delta > 0.0 { arrival[v] - stop[v] } else { stop[v] })
                .sum();
            if room > 0.0 {
                let f = (delta / room).clamp(-1.0, 1.0);
                for &v in &pool {
                    let r = if delta > 0.0 { arrival[v] - stop[v] } else { stop[v] };
                    stop[v] = (stop[v] + f * r).clamp(0.0, arrival[v]);
                }
            }
        }
        for v in range {
            if let Some([u, d]) = g.children(v) {
                let x = 0.5 * (arrival[v] - stop[v]);
                arrival[u] += x;
                arrival[d] += x;
            }
        }
    }
    RandomizedStoppingTime { model, arrival, stop }
}

/// Product-measure witness: independent of the path, stop at level `k`
/// with rate `mass_k / tail_k`.
pub fn feasibility_witness(model: Arc<Model>, mu: &TargetDistribution) -> Result<RandomizedStoppingTime> {
    if !model.grid().matches(mu.grid()) {
        return Err(Error::Model("target law and model use different grids".into()));
    }
    let g = model.graph();
    let mut rates = vec![0.0; g.len()];
    let mut tail = 1.0;
    for k in 0..g.n_levels() {
        let m = mu.mass_at(k);
        let r = if tail > 0.0 { (m / tail).min(1.0) } else { 1.0 };
        for v in g.level_range(k) {
            rates[v] = r;
        }
        tail = mu.tail(k + 1);
    }
    Ok(RandomizedStoppingTime::from_rates(model, &rates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::tree::{PathTree, StateKind, StateLattice};
    use proptest::prelude::*;

    fn depth2() -> Arc<Model> {
        Arc::new(Model::Tree(PathTree::new(TimeGrid::new(1.0, 2).unwrap()).unwrap()))
    }

    #[test]
    fn witness_rates() {
        let model = depth2();
        let g = model.grid().to_owned();
        let mu = TargetDistribution::new(g, vec![0.0, 0.5, 0.5]).unwrap();
        let w = feasibility_witness(model.clone(), &mu).unwrap();
        let gr = model.graph();
        for v in gr.level_range(1) {
            assert_eq!(w.rate(v), Some(0.5));
        }
        for v in gr.level_range(2) {
            assert_eq!(w.rate(v), Some(1.0));
        }
        assert!(w.check(Some(&mu)).holds(1e-15));
        let delta = TargetDistribution::dirac(g, 2).unwrap();
        let w = feasibility_witness(model.clone(), &delta).unwrap();
        assert_eq!(w.rate(gr.level_range(1).start), Some(0.0));
        assert_eq!(w.rate(gr.level_range(2).start), Some(1.0));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = TimeGrid::new(0.1, 9).unwrap();
        let model = Arc::new(Model::Lattice(StateLattice::new(g, StateKind::PositionAndMax)));
        let mu = TargetDistribution::new(g, {
            let mut m = vec![0.0; 10];
            m[3] = 0.1 / 3.0;
            m[5] = 0.3;
            m[9] = 1.0 - 0.3 - 0.1 / 3.0;
            m
        })
        .unwrap();
        let w = feasibility_witness(model.clone(), &mu).unwrap();
        let text = w.to_csv();
        let back = RandomizedStoppingTime::from_csv(model, &text, "mem").unwrap();
        assert_eq!(back.arrivals(), w.arrivals());
        assert_eq!(back.stops(), w.stops());
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let model = depth2();
        let w = RandomizedStoppingTime::from_rates(model.clone(), &[0.0; 7]);
        let mut text = w.to_csv();
        text = text.replacen("0,0,0,0,", "0,0,0,0,x", 1);
        match RandomizedStoppingTime::from_csv(model, &text, "f") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn witness_matches_any_target(raw in prop::collection::vec(0.0f64..1.0, 6)) {
            let g = TimeGrid::new(0.5, 6).unwrap();
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let mut mass = vec![0.0];
            mass.extend(raw.iter().map(|m| m / total));
            let s: f64 = mass.iter().sum();
            mass[6] += 1.0 - s;
            let mu = TargetDistribution::new(g, mass).unwrap();
            let model = Arc::new(Model::Tree(PathTree::new(g).unwrap()));
            let w = feasibility_witness(model, &mu).unwrap();
            prop_assert!(w.check(Some(&mu)).holds(1e-12));
        }

        #[test]
        fn polish_restores_exact_marginals(noise in prop::collection::vec(-1e-7f64..1e-7, 28)) {
            let g = TimeGrid::new(0.25, 6).unwrap();
            let model = Arc::new(Model::Lattice(StateLattice::new(g, StateKind::Position)));
            let mu = TargetDistribution::new(g, vec![0.0, 0.1, 0.0, 0.3, 0.1, 0.2, 0.3]).unwrap();
            let w = feasibility_witness(model.clone(), &mu).unwrap();
            let rates: Vec<f64> = (0..model.graph().len()).map(|v| w.rate(v).unwrap_or(0.0) + noise[v]).collect();
            let p = polish(model, &rates, &mu);
            prop_assert!(p.check(Some(&mu)).holds(1e-12));
        }
    }
}
