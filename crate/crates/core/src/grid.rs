//! Time grids and the discretized target law of the stopping time.

use std::fmt;
use std::path::Path;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Absolute tolerance on total probability mass.
pub const MASS_TOL: f64 = 1e-12;

/// Uniform grid `t_k = k * dt` for `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        Ok(Self { dt, n_steps })
    }

    /// Grid covering `[0, horizon]` with `n_steps = round(horizon / dt)`.
    pub fn with_horizon(dt: f64, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let n = (horizon / dt).round();
        if n < 1.0 || ((n * dt - horizon).abs() > 1e-9 * horizon.max(1.0)) {
            return Err(Error::Domain(format!(
                "horizon {horizon} is not a positive multiple of dt {dt}"
            )));
        }
        Self::new(dt, n as usize)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Space step of the matching random walk.
    pub fn step(&self) -> f64 {
        self.dt.sqrt()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }

    /// Index `k` of the cell `(t_{k-1}, t_k]` containing `t > 0`, unbounded above.
    /// Times within a relative 1e-9 of a grid point belong to that point.
    pub fn cell_index(&self, t: f64) -> usize {
        let r = t / self.dt;
        let nearest = r.round();
        let k = if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest
        } else {
            r.ceil()
        };
        (k.max(1.0)) as usize
    }

    /// Same grid up to float noise in `dt`.
    pub fn matches(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

/// What to do with mass beyond the last grid time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HorizonPolicy {
    #[default]
    LumpAtEnd,
    Reject,
}

/// Law of the stopping time as atoms on a grid; no mass at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    grid: TimeGrid,
    mass: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(grid: TimeGrid, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.n_steps + 1 {
            return Err(Error::Domain(format!(
                "expected {} masses, got {}",
                grid.n_steps + 1,
                mass.len()
            )));
        }
        if mass[0] != 0.0 {
            return Err(Error::Domain(format!("mass at t = 0 must be 0, got {}", mass[0])));
        }
        if let Some((k, m)) = mass.iter().enumerate().find(|(_, m)| !(**m >= 0.0 && m.is_finite())) {
            return Err(Error::Domain(format!("mass at level {k} is {m}")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("total mass {total:.15} differs from 1")));
        }
        Ok(Self { grid, mass })
    }

    /// Point mass at level `k >= 1`.
    pub fn dirac(grid: TimeGrid, k: usize) -> Result<Self> {
        if k == 0 || k > grid.n_steps {
            return Err(Error::Domain(format!("level {k} outside 1..={}", grid.n_steps)));
        }
        let mut mass = vec![0.0; grid.n_steps + 1];
        mass[k] = 1.0;
        Self::new(grid, mass)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn mass_at(&self, k: usize) -> f64 {
        self.mass[k]
    }

    /// `Σ_{j >= k} mass_j`, the mass still unstopped on arrival at level `k`.
    pub fn tail(&self, k: usize) -> f64 {
        self.mass[k.min(self.mass.len())..].iter().sum()
    }

    /// Levels carrying positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.mass.len()).filter(|&k| self.mass[k] > 0.0).collect()
    }

    /// Right-continuous CDF of the grid law.
    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let last = if t >= self.grid.horizon() {
            self.grid.n_steps
        } else {
            let r = t / self.grid.dt;
            let mut k = r.floor() as usize;
            // a time within float noise of the next grid point counts as reaching it
            if ((k + 1) as f64 - r).abs() <= 1e-9 * r.max(1.0) {
                k += 1;
            }
            k.min(self.grid.n_steps)
        };
        self.mass[..=last].iter().sum::<f64>().min(1.0)
    }

    pub fn moment(&self, p: f64) -> f64 {
        moment(self, p)
    }
}

/// `Σ_k mass_k * t_k^p`.
pub fn moment(mu: &TargetDistribution, p: f64) -> f64 {
    mu.mass
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > 0.0)
        .map(|(k, m)| m * mu.grid.time(k).powf(p))
        .sum()
}

/// Input accepted by [`discretize_measure`].
pub enum MeasureSource<'a> {
    Atoms(&'a [(f64, f64)]),
    Cdf(&'a dyn Fn(f64) -> f64),
}

/// Map a law on `(0, ∞)` to the grid: mass of `(t_{k-1}, t_k]` goes to `t_k`.
pub fn discretize_measure(
    source: MeasureSource<'_>,
    grid: TimeGrid,
    policy: HorizonPolicy,
) -> Result<TargetDistribution> {
    let n = grid.n_steps;
    let mut mass = vec![0.0; n + 1];
    let tail = match source {
        MeasureSource::Atoms(atoms) => {
            let mut tail = 0.0;
            for &(t, m) in atoms {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::Domain(format!("atom at t = {t} must lie in (0, ∞)")));
                }
                if !(m >= 0.0 && m.is_finite()) {
                    return Err(Error::Domain(format!("atom mass {m} at t = {t} is invalid")));
                }
                let k = grid.cell_index(t);
                if k > n {
                    tail += m;
                } else {
                    mass[k] += m;
                }
            }
            tail
        }
        MeasureSource::Cdf(f) => {
            let f0 = f(0.0);
            if f0.abs() > MASS_TOL {
                return Err(Error::Domain(format!("cdf at 0 is {f0}, expected 0")));
            }
            let mut prev = 0.0;
            for (k, slot) in mass.iter_mut().enumerate().skip(1) {
                let cur = f(grid.time(k));
                let d = cur - prev;
                if d < -MASS_TOL {
                    return Err(Error::Domain(format!(
                        "cdf decreases on ({}, {}]",
                        grid.time(k - 1),
                        grid.time(k)
                    )));
                }
                *slot = d.max(0.0);
                prev = cur;
            }
            (1.0 - prev).max(0.0)
        }
    };
    if tail > 0.0 {
        match policy {
            HorizonPolicy::Reject if tail > MASS_TOL => {
                return Err(Error::TailMass {
                    mass: tail,
                    horizon: grid.horizon(),
                })
            }
            HorizonPolicy::Reject => {}
            HorizonPolicy::LumpAtEnd => {
                if tail > MASS_TOL {
                    log::warn!(
                        "lumping tail mass {tail:.6e} beyond t = {} onto the last grid time",
                        grid.horizon()
                    );
                }
                mass[n] += tail;
            }
        }
    }
    TargetDistribution::new(grid, mass)
}

/// Named target laws accepted on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum MuSpec {
    /// Exponential law with the given rate.
    Exponential { rate: f64 },
    /// First hitting time of level `-a` by standard Brownian motion.
    Levy { a: f64 },
    /// Finite atom list read from a `t,mass` file.
    Atoms { path: String, atoms: Vec<(f64, f64)> },
}

impl MuSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let (family, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::Domain(format!("target law `{spec}` lacks a family prefix")))?;
        match family.trim() {
            "exp" => {
                let rate = named_param(rest, "rate")?;
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::Domain(format!("rate must be positive, got {rate}")));
                }
                Ok(MuSpec::Exponential { rate })
            }
            "levy" => {
                let a = named_param(rest, "a")?;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::Domain(format!("level a must be positive, got {a}")));
                }
                Ok(MuSpec::Levy { a })
            }
            "atoms" => {
                let path = rest.trim().to_string();
                let atoms = read_atoms(Path::new(&path))?;
                Ok(MuSpec::Atoms { path, atoms })
            }
            other => Err(Error::Domain(format!("unknown target family `{other}`"))),
        }
    }

    /// Continuous CDF, `None` for atom lists.
    pub fn cdf(&self, t: f64) -> Option<f64> {
        if t <= 0.0 {
            return match self {
                MuSpec::Atoms { .. } => None,
                _ => Some(0.0),
            };
        }
        match self {
            MuSpec::Exponential { rate } => Some(-(-rate * t).exp_m1()),
            MuSpec::Levy { a } => Some(levy_cdf(*a, t)),
            MuSpec::Atoms { .. } => None,
        }
    }

    pub fn discretize(&self, grid: TimeGrid, policy: HorizonPolicy) -> Result<TargetDistribution> {
        match self {
            MuSpec::Atoms { atoms, .. } => discretize_measure(MeasureSource::Atoms(atoms), grid, policy),
            _ => {
                let f = |t: f64| self.cdf(t).unwrap_or(0.0);
                discretize_measure(MeasureSource::Cdf(&f), grid, policy)
            }
        }
    }
}

impl fmt::Display for MuSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MuSpec::Exponential { rate } => write!(f, "exp:rate={rate}"),
            MuSpec::Levy { a } => write!(f, "levy:a={a}"),
            MuSpec::Atoms { path, .. } => write!(f, "atoms:{path}"),
        }
    }
}

/// `P(inf{s : W_s <= -a} <= t) = erfc(a / sqrt(2t))`.
pub fn levy_cdf(a: f64, t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        erfc(a / (2.0 * t).sqrt())
    }
}

fn named_param(rest: &str, key: &str) -> Result<f64> {
    let (k, v) = rest
        .split_once('=')
        .ok_or_else(|| Error::Domain(format!("expected `{key}=<value>`, got `{rest}`")))?;
    if k.trim() != key {
        return Err(Error::Domain(format!("expected parameter `{key}`, got `{}`", k.trim())));
    }
    v.trim()
        .parse::<f64>()
        .map_err(|e| Error::Domain(format!("parameter `{key}`: {e}")))
}

/// Read a two-column `t,mass` file; a non-numeric first line is taken as a header.
pub fn read_atoms(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    parse_atoms(&text, &path.display().to_string())
}

pub fn parse_atoms(text: &str, origin: &str) -> Result<Vec<(f64, f64)>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut atoms = Vec::new();
    let mut seen_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(err(
                line_no,
                format!("expected 2 comma-separated fields, found {}", fields.len()),
            ));
        }
        let parsed = (fields[0].parse::<f64>(), fields[1].parse::<f64>());
        match parsed {
            (Ok(t), Ok(m)) => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(err(line_no, format!("time {t} must lie in (0, ∞)")));
                }
                if !(m >= 0.0 && m.is_finite()) {
                    return Err(err(line_no, format!("mass {m} must be nonnegative")));
                }
                atoms.push((t, m));
                seen_data = true;
            }
            _ if !seen_data
                && atoms.is_empty()
                && fields[0].parse::<f64>().is_err()
                && fields[1].parse::<f64>().is_err() =>
            {
                // header line
                seen_data = true;
            }
            (Err(e), _) | (_, Err(e)) => return Err(err(line_no, format!("invalid number: {e}"))),
        }
    }
    if atoms.is_empty() {
        return Err(err(0, "no atoms found".into()));
    }
    Ok(atoms)
}
