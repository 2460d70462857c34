//! Continuous-time Monte Carlo for barrier hitting times, the grid refinement
//! loop for inverse first passage, and the tilt check on barrier closures.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::costs::CostFunctional;
use crate::error::{Error, Result};
use crate::geometry::{extract_barrier, Barrier, PhaseProcess};
use crate::grid::{HorizonPolicy, MuSpec, TargetDistribution, TimeGrid};
use crate::lp::{assemble, solve, RandomizedStoppingTime};
use crate::tree::{Model, StateKind, StateLattice};

/// Default cap on the simulation step.
pub const DEFAULT_FINE_DT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub fine_dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub phase: PhaseProcess,
}

impl SimulationConfig {
    pub fn new(n_paths: usize, fine_dt: f64, horizon: f64, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::Domain("at least one path is needed".into()));
        }
        if !(fine_dt > 0.0 && fine_dt.is_finite()) {
            return Err(Error::Domain(format!(
                "simulation step must be positive, got {fine_dt}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            n_paths,
            fine_dt,
            horizon,
            seed,
            phase: PhaseProcess::position(),
        })
    }

    /// Config matched to a barrier's grid, stepping at `min(dt / 4, DEFAULT_FINE_DT)`.
    pub fn for_barrier(barrier: &Barrier, n_paths: usize, seed: u64) -> Result<Self> {
        let g = barrier.grid();
        Self::new(n_paths, (g.dt() / 4.0).min(DEFAULT_FINE_DT), g.horizon(), seed)
    }

    pub fn with_phase(mut self, phase: PhaseProcess) -> Self {
        self.phase = phase;
        self
    }
}

/// Stream of normals for one path; depends only on `(seed, index)`.
fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// First simulation time with `Y <= beta` (`<` for open barriers), `+inf` if none.
pub fn simulate_hitting_times(barrier: &Barrier, cfg: &SimulationConfig) -> Vec<f64> {
    let n_fine = (cfg.horizon / cfg.fine_dt - 1e-9).ceil().max(1.0) as usize;
    let times: Vec<f64> = (0..=n_fine)
        .map(|j| (j as f64 * cfg.fine_dt).min(cfg.horizon))
        .collect();
    let beta: Vec<f64> = times.iter().map(|&t| barrier.at_time(t)).collect();
    let tilt: Vec<f64> = times.iter().map(|&t| cfg.phase.eval_parts(t, 0.0, 0.0)).collect();
    let closed = barrier.is_closed();
    let phase = cfg.phase;
    let seed = cfg.seed;
    (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            let mut x = 0.0f64;
            let mut max = 0.0f64;
            for j in 1..=n_fine {
                let h = times[j] - times[j - 1];
                let z: f64 = rng.sample(StandardNormal);
                x += h.sqrt() * z;
                max = max.max(x);
                // the tilt only depends on time, so it is added from the table
                let y = phase.eval_parts(0.0, x, max) + tilt[j];
                let hit = if closed { y <= beta[j] } else { y < beta[j] };
                if hit {
                    return times[j];
                }
            }
            f64::INFINITY
        })
        .collect()
}

/// Target law for a KS comparison.
pub trait Law {
    fn cdf(&self, t: f64) -> f64;
    /// Left limit of the CDF.
    fn cdf_left(&self, t: f64) -> f64 {
        self.cdf(t)
    }
    /// Extra points where the distance is evaluated.
    fn grid_points(&self) -> Vec<f64> {
        Vec::new()
    }
    /// Where unstopped samples are placed; `None` keeps them beyond every time.
    fn unstopped_at(&self) -> Option<f64> {
        None
    }
}

impl Law for TargetDistribution {
    fn cdf(&self, t: f64) -> f64 {
        TargetDistribution::cdf(self, t)
    }

    fn cdf_left(&self, t: f64) -> f64 {
        let g = self.grid();
        let mut f = 0.0;
        for (k, m) in self.mass().iter().enumerate() {
            if g.time(k) < t - 1e-12 * (1.0 + t.abs()) {
                f += m;
            }
        }
        f.min(1.0)
    }

    fn grid_points(&self) -> Vec<f64> {
        self.grid().times().collect()
    }

    fn unstopped_at(&self) -> Option<f64> {
        Some(self.grid().horizon())
    }
}

/// A continuous CDF, optionally lumping the remaining mass at a horizon.
pub struct CdfLaw<F: Fn(f64) -> f64> {
    pub cdf: F,
    pub horizon: Option<f64>,
}

impl<F: Fn(f64) -> f64> CdfLaw<F> {
    pub fn new(cdf: F) -> Self {
        Self { cdf, horizon: None }
    }

    pub fn lumped_at(cdf: F, horizon: f64) -> Self {
        Self {
            cdf,
            horizon: Some(horizon),
        }
    }
}

impl<F: Fn(f64) -> f64> Law for CdfLaw<F> {
    fn cdf(&self, t: f64) -> f64 {
        match self.horizon {
            Some(h) if t >= h => 1.0,
            _ => (self.cdf)(t),
        }
    }

    fn cdf_left(&self, t: f64) -> f64 {
        (self.cdf)(t)
    }

    fn unstopped_at(&self) -> Option<f64> {
        self.horizon
    }
}

fn sorted(samples: &[f64], inf_to: Option<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = samples
        .iter()
        .map(|&x| match inf_to {
            Some(h) if x.is_infinite() => h,
            _ => x,
        })
        .collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of sorted values `<= t` and `< t`.
fn counts(sorted: &[f64], t: f64) -> (usize, usize) {
    (sorted.partition_point(|&x| x <= t), sorted.partition_point(|&x| x < t))
}

/// Sup distance between the empirical CDF of `samples` and `law`, over all
/// sample points and the law's grid points, both sides of each jump.
pub fn ks_distance(samples: &[f64], law: &dyn Law) -> f64 {
    assert!(!samples.is_empty(), "KS distance needs samples");
    let s = sorted(samples, law.unstopped_at());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut check = |t: f64| {
        let (le, lt) = counts(&s, t);
        d = d.max((le as f64 / n - law.cdf(t)).abs());
        d = d.max((lt as f64 / n - law.cdf_left(t)).abs());
    };
    let mut prev = f64::NAN;
    for &t in &s {
        if t.is_finite() && t != prev {
            check(t);
            prev = t;
        }
    }
    for t in law.grid_points() {
        check(t);
    }
    d
}

/// Sup distance between two empirical CDFs; `+inf` samples never count.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let sa = sorted(a, None);
    let sb = sorted(b, None);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut d: f64 = 0.0;
    for &t in sa.iter().chain(&sb) {
        if t.is_finite() {
            let fa = counts(&sa, t).0 as f64 / na;
            let fb = counts(&sb, t).0 as f64 / nb;
            d = d.max((fa - fb).abs());
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub ks: f64,
    /// `(t, empirical CDF, target CDF)` at the sample deciles.
    pub cdf_points: Vec<(f64, f64, f64)>,
    pub unstopped_fraction: f64,
    /// `|empirical - target|` at each decile point.
    pub decile_errors: Vec<f64>,
}

impl ValidationReport {
    pub fn new(samples: &[f64], law: &dyn Law) -> Self {
        let ks = ks_distance(samples, law);
        let unstopped = samples.iter().filter(|x| x.is_infinite()).count() as f64 / samples.len() as f64;
        let s = sorted(samples, law.unstopped_at());
        let n = s.len();
        let mut cdf_points = Vec::new();
        for q in 1..10 {
            let t = s[(q * n / 10).min(n - 1)];
            if t.is_finite() {
                let emp = counts(&s, t).0 as f64 / n as f64;
                cdf_points.push((t, emp, law.cdf(t)));
            }
        }
        let decile_errors = cdf_points.iter().map(|&(_, e, f)| (e - f).abs()).collect();
        Self {
            ks,
            cdf_points,
            unstopped_fraction: unstopped,
            decile_errors,
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ks={:.6e}", self.ks)?;
        writeln!(f, "unstopped_fraction={:.6e}", self.unstopped_fraction)?;
        for (t, e, g) in &self.cdf_points {
            writeln!(f, "cdf t={t:.6e} empirical={e:.6e} target={g:.6e}")?;
        }
        Ok(())
    }
}

/// One sample time per line, `+inf` for unstopped paths.
pub fn format_samples(samples: &[f64]) -> String {
    let mut out = String::with_capacity(samples.len() * 24);
    for &x in samples {
        if x.is_infinite() {
            out.push_str("+inf\n");
        } else {
            let _ = writeln!(out, "{x:.16e}");
        }
    }
    out
}

pub fn parse_samples(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "+inf" => Ok(f64::INFINITY),
            v => v.parse::<f64>().map_err(|e| Error::Parse {
                path: "samples".into(),
                line: i + 1,
                message: e.to_string(),
            }),
        })
        .collect()
}

/// Monte Carlo settings for the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfpSettings {
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Upper bound on the simulation step; each refinement also uses at most `dt / 4`.
    pub fine_dt: f64,
}

impl Default for IfpSettings {
    fn default() -> Self {
        Self {
            horizon: 5.0,
            n_paths: 100_000,
            seed: 0,
            fine_dt: DEFAULT_FINE_DT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub dt: f64,
    pub mu: TargetDistribution,
    pub rst: RandomizedStoppingTime,
    pub value: f64,
    pub lower: Barrier,
    pub upper: Barrier,
    pub boundary_rate: Vec<Option<f64>>,
    pub report: ValidationReport,
}

#[derive(Debug, Clone)]
pub struct IfpResult {
    pub refinements: Vec<Refinement>,
}

impl IfpResult {
    /// Barrier at the finest grid.
    pub fn barrier(&self) -> &Barrier {
        &self.refinements.last().expect("nonempty schedule").lower
    }

    /// KS never grows by more than `noise` from one refinement to the next.
    pub fn ks_nonincreasing(&self, noise: f64) -> bool {
        self.refinements
            .windows(2)
            .all(|w| w[1].report.ks <= w[0].report.ks + noise)
    }

    /// `refinement_dt,ks,unstopped_fraction`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("refinement_dt,ks,unstopped_fraction\n");
        for r in &self.refinements {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e}",
                r.dt, r.report.ks, r.report.unstopped_fraction
            );
        }
        out
    }
}

/// Law that MC samples are compared against: the continuous CDF lumped at
/// the horizon when there is one, the discretized law otherwise.
pub fn validation_law<'a>(spec: &'a MuSpec, mu: &'a TargetDistribution) -> Box<dyn Law + 'a> {
    match spec {
        MuSpec::Atoms { .. } => Box::new(mu.clone()),
        _ => Box::new(CdfLaw::lumped_at(
            move |t| spec.cdf(t).unwrap_or(0.0),
            mu.grid().horizon(),
        )),
    }
}

/// For each `dt`: discretize the target, solve on the position lattice, read
/// the lower barrier and measure its continuous-time hitting law.
pub fn solve_ifp(spec: &MuSpec, dt_schedule: &[f64], cost_name: &str, settings: &IfpSettings) -> Result<IfpResult> {
    if !matches!(cost_name, "bt_at" | "phi_cubed") {
        return Err(Error::Domain(format!(
            "inverse first passage needs cost bt_at or phi_cubed, got `{cost_name}`"
        )));
    }
    if dt_schedule.is_empty() {
        return Err(Error::Domain("empty refinement schedule".into()));
    }
    if dt_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("refinement schedule must be strictly decreasing".into()));
    }
    let cost = CostFunctional::from_name(cost_name)?;
    let phase = PhaseProcess::position();
    let mut refinements = Vec::with_capacity(dt_schedule.len());
    for &dt in dt_schedule {
        let grid = TimeGrid::with_horizon(dt, settings.horizon)?;
        let mu = spec.discretize(grid, HorizonPolicy::LumpAtEnd)?;
        let model = Arc::new(Model::Lattice(StateLattice::new(grid, StateKind::Position)));
        let lp = assemble(model, &mu, &cost)?;
        let sol = solve(&lp)?;
        let ex = extract_barrier(&sol.rst, &phase);
        let cfg = SimulationConfig::new(
            settings.n_paths,
            settings.fine_dt.min(dt / 4.0),
            grid.horizon(),
            settings.seed,
        )?;
        let samples = simulate_hitting_times(&ex.lower, &cfg);
        let report = ValidationReport::new(&samples, validation_law(spec, &mu).as_ref());
        log::info!(
            "dt={dt} ks={:.4e} unstopped={:.4e}",
            report.ks,
            report.unstopped_fraction
        );
        refinements.push(Refinement {
            dt,
            mu,
            rst: sol.rst,
            value: sol.value,
            lower: ex.lower,
            upper: ex.upper,
            boundary_rate: ex.boundary_rate,
            report,
        });
    }
    Ok(IfpResult { refinements })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureReport {
    /// `(eps, KS between tilted and untilted hitting laws)`
    pub entries: Vec<(f64, f64)>,
}

impl ClosureReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].1 < w[0].1)
    }

    pub fn final_ks(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }

    /// `eps,ks`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,ks\n");
        for (e, k) in &self.entries {
            let _ = writeln!(out, "{e:.16e},{k:.16e}");
        }
        out
    }
}

/// Hitting laws of `Y + eps * t / (1 + t)` against the same barrier, each
/// compared with the untilted law on common random numbers.
pub fn closure_insensitivity(barrier: &Barrier, eps_list: &[f64], cfg: &SimulationConfig) -> Result<ClosureReport> {
    if eps_list.windows(2).any(|w| w[1] >= w[0]) || eps_list.iter().any(|&e| e < 0.0) {
        return Err(Error::Domain(
            "tilts must be nonnegative and strictly decreasing".into(),
        ));
    }
    let base = simulate_hitting_times(barrier, cfg);
    let entries = eps_list
        .iter()
        .map(|&eps| {
            let tilted = cfg.with_phase(cfg.phase.with_tilt(eps));
            (eps, ks_two_sample(&simulate_hitting_times(barrier, &tilted), &base))
        })
        .collect();
    Ok(ClosureReport { entries })
}
