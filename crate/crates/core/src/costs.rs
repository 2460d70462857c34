//! Adapted cost processes `c(ω, t)`, stored in minimization form.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tree::{NodeGraph, NodeState, PathPrefix};

/// Ties within this margin count as equal in lexicographic comparisons.
pub const LEX_TOL: f64 = 1e-12;

/// Cost value with one or two lexicographically ordered components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostVector {
    values: [f64; 2],
    arity: usize,
}

impl CostVector {
    pub fn scalar(v: f64) -> Self {
        Self {
            values: [v, 0.0],
            arity: 1,
        }
    }

    pub fn pair(primary: f64, secondary: f64) -> Self {
        Self {
            values: [primary, secondary],
            arity: 2,
        }
    }

    pub fn zero(arity: usize) -> Self {
        Self {
            values: [0.0; 2],
            arity,
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn primary(&self) -> f64 {
        self.values[0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.arity]
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            values: [self.values[0] + o.values[0], self.values[1] + o.values[1]],
            arity: self.arity.max(o.arity),
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.scale(-1.0))
    }

    pub fn scale(self, s: f64) -> Self {
        Self {
            values: [self.values[0] * s, self.values[1] * s],
            arity: self.arity,
        }
    }

    /// Lexicographic comparison; components closer than `tol` tie.
    pub fn lex_cmp(&self, other: &Self, tol: f64) -> Ordering {
        let n = self.arity.max(other.arity);
        for i in 0..n {
            let d = self.values[i] - other.values[i];
            if d > tol {
                return Ordering::Greater;
            }
            if d < -tol {
                return Ordering::Less;
            }
        }
        Ordering::Equal
    }

    pub fn lex_min(self, other: Self) -> Self {
        if other.lex_cmp(&self, 0.0) == Ordering::Less {
            other
        } else {
            self
        }
    }
}

impl fmt::Display for CostVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.arity == 1 {
            write!(f, "{}", self.values[0])
        } else {
            write!(f, "({}, {})", self.values[0], self.values[1])
        }
    }
}

/// Time weight `A(t)` of the linear-in-position cost.
#[derive(Clone)]
pub enum TimeWeight {
    /// `t / (1 + t)`
    Bounded,
    /// `t`
    Identity,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl TimeWeight {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeWeight::Bounded => t / (1.0 + t),
            TimeWeight::Identity => t,
            TimeWeight::Custom(f) => f(t),
        }
    }
}

impl fmt::Debug for TimeWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeWeight::Bounded => f.write_str("t/(1+t)"),
            TimeWeight::Identity => f.write_str("t"),
            TimeWeight::Custom(_) => f.write_str("custom"),
        }
    }
}

/// Space function `φ(x)` of the terminal cost.
#[derive(Clone)]
pub enum SpaceFn {
    Cube,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl SpaceFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            SpaceFn::Cube => x * x * x,
            SpaceFn::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for SpaceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceFn::Cube => f.write_str("x^3"),
            SpaceFn::Custom(_) => f.write_str("custom"),
        }
    }
}

pub type PathCost = Arc<dyn Fn(&PathPrefix) -> CostVector + Send + Sync>;

/// Which state a model must carry to evaluate a cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sufficiency {
    Position,
    PositionAndMax,
    FullTree,
}

#[derive(Clone)]
pub enum CostFunctional {
    /// `-ω(t) A(t)`
    LinearTime(TimeWeight),
    /// `-φ(ω(t))`
    ConvexTerminal(SpaceFn),
    /// `-max_{s<=t} ω(s)`
    NegRunningMax,
    /// `+max_{s<=t} ω(s)`
    PosRunningMax,
    /// `(-max ω, (max ω - ω(t))^3)`
    DrawdownLex,
    Custom {
        arity: usize,
        name: String,
        eval: PathCost,
    },
}

impl fmt::Debug for CostFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl CostFunctional {
    /// Parse a cost name: `bt_at` (optionally `bt_at:a=t`), `phi_cubed`,
    /// `neg_max`, `pos_max`, `drawdown_lex`.
    pub fn from_name(name: &str) -> Result<Self> {
        let (base, opt) = match name.split_once(':') {
            Some((b, o)) => (b.trim(), Some(o.trim())),
            None => (name.trim(), None),
        };
        let cost = match (base, opt) {
            ("bt_at", None) | ("bt_at", Some("a=bounded")) => CostFunctional::LinearTime(TimeWeight::Bounded),
            ("bt_at", Some("a=t")) => CostFunctional::LinearTime(TimeWeight::Identity),
            ("phi_cubed", None) => CostFunctional::ConvexTerminal(SpaceFn::Cube),
            ("neg_max", None) => CostFunctional::NegRunningMax,
            ("pos_max", None) => CostFunctional::PosRunningMax,
            ("drawdown_lex", None) => CostFunctional::DrawdownLex,
            _ => return Err(Error::Domain(format!("unknown cost `{name}`"))),
        };
        Ok(cost)
    }

    pub fn name(&self) -> String {
        match self {
            CostFunctional::LinearTime(TimeWeight::Bounded) => "bt_at".into(),
            CostFunctional::LinearTime(TimeWeight::Identity) => "bt_at:a=t".into(),
            CostFunctional::LinearTime(TimeWeight::Custom(_)) => "bt_at:custom".into(),
            CostFunctional::ConvexTerminal(SpaceFn::Cube) => "phi_cubed".into(),
            CostFunctional::ConvexTerminal(SpaceFn::Custom(_)) => "phi:custom".into(),
            CostFunctional::NegRunningMax => "neg_max".into(),
            CostFunctional::PosRunningMax => "pos_max".into(),
            CostFunctional::DrawdownLex => "drawdown_lex".into(),
            CostFunctional::Custom { name, .. } => name.clone(),
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            CostFunctional::DrawdownLex => 2,
            CostFunctional::Custom { arity, .. } => *arity,
            _ => 1,
        }
    }

    pub fn is_markov(&self) -> bool {
        !matches!(self, CostFunctional::Custom { .. })
    }

    /// Evaluate from the Markov summary; `None` for path-dependent custom costs.
    pub fn evaluate_state(&self, s: &NodeState) -> Option<CostVector> {
        Some(match self {
            CostFunctional::LinearTime(a) => CostVector::scalar(-s.x * a.eval(s.t)),
            CostFunctional::ConvexTerminal(phi) => CostVector::scalar(-phi.eval(s.x)),
            CostFunctional::NegRunningMax => CostVector::scalar(-s.max),
            CostFunctional::PosRunningMax => CostVector::scalar(s.max),
            CostFunctional::DrawdownLex => {
                let dd = s.max - s.x;
                CostVector::pair(-s.max, dd * dd * dd)
            }
            CostFunctional::Custom { .. } => return None,
        })
    }

    pub fn evaluate(&self, prefix: &PathPrefix) -> CostVector {
        match self {
            CostFunctional::Custom { eval, .. } => eval(prefix),
            _ => self.evaluate_state(&prefix.state()).expect("markov cost"),
        }
    }

    pub fn state_sufficient(&self) -> Sufficiency {
        match self {
            CostFunctional::LinearTime(_) | CostFunctional::ConvexTerminal(_) => Sufficiency::Position,
            CostFunctional::NegRunningMax | CostFunctional::PosRunningMax | CostFunctional::DrawdownLex => {
                Sufficiency::PositionAndMax
            }
            CostFunctional::Custom { .. } => Sufficiency::FullTree,
        }
    }

    /// Check the structural hypotheses on the model's grid and value set.
    pub fn validate(&self, graph: &NodeGraph) -> Result<()> {
        match self {
            CostFunctional::LinearTime(a) => {
                let grid = graph.grid();
                for k in 1..=grid.n_steps() {
                    let (lo, hi) = (a.eval(grid.time(k - 1)), a.eval(grid.time(k)));
                    if !(hi > lo) {
                        return Err(Error::Domain(format!(
                            "time weight not strictly increasing on [{}, {}]",
                            grid.time(k - 1),
                            grid.time(k)
                        )));
                    }
                }
                Ok(())
            }
            CostFunctional::ConvexTerminal(phi) => {
                let step = graph.step();
                let mut lo = i32::MAX;
                let mut hi = i32::MIN;
                let mut roots: Vec<f64> = graph.roots().iter().map(|&(r, _)| graph.value(r)).collect();
                roots.dedup();
                for v in 0..graph.len() {
                    lo = lo.min(graph.b(v));
                    hi = hi.max(graph.b(v));
                }
                for base in roots {
                    for j in lo..=(hi - 3) {
                        let f = |i: i32| phi.eval(base + step * i as f64);
                        let d3 = f(j + 3) - 3.0 * f(j + 2) + 3.0 * f(j + 1) - f(j);
                        if !(d3 > 0.0) {
                            return Err(Error::Domain(format!(
                                "third difference of phi is {d3} at x = {}",
                                base + step * j as f64
                            )));
                        }
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Node costs on a model, evaluated from node states.
    pub fn node_costs(&self, graph: &NodeGraph) -> Result<Vec<CostVector>> {
        if !self.is_markov() {
            return Err(Error::Model(format!("cost `{}` needs path prefixes", self.name())));
        }
        if self.state_sufficient() == Sufficiency::PositionAndMax && !graph.tracks_max() {
            return Err(Error::Model(format!(
                "cost `{}` depends on the running maximum, which the model does not track",
                self.name()
            )));
        }
        Ok((0..graph.len())
            .map(|v| self.evaluate_state(&graph.state(v)).expect("markov"))
            .collect())
    }
}
