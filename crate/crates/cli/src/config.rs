use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Verify,
    Ifp,
    Validate,
    SwapDemo,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "solve" => Command::Solve,
            "verify" => Command::Verify,
            "ifp" => Command::Ifp,
            "validate" => Command::Validate,
            "swap-demo" => Command::SwapDemo,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Ifp => "ifp",
            Command::Validate => "validate",
            Command::SwapDemo => "swap-demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Auto,
    Tree,
    Lattice,
}

impl ModelChoice {
    fn name(self) -> &'static str {
        match self {
            ModelChoice::Auto => "auto",
            ModelChoice::Tree => "tree",
            ModelChoice::Lattice => "lattice",
        }
    }
}

/// Flags; each may also be given as `key = value` in the config file.
#[derive(Debug, Parser)]
#[command(
    name = "stopgo",
    version,
    about = "Distribution-constrained optimal stopping on lattices"
)]
pub struct Args {
    /// solve | verify | ifp | validate | swap-demo
    #[arg(long)]
    pub cmd: Option<String>,
    /// Target law: exp:rate=R, levy:a=A or atoms:<file>
    #[arg(long)]
    pub mu: Option<String>,
    /// bt_at, bt_at:a=t, phi_cubed, neg_max, pos_max or drawdown_lex
    #[arg(long)]
    pub cost: Option<String>,
    /// Time step; a comma list gives the refinement schedule for `ifp`
    #[arg(long)]
    pub dt: Option<String>,
    #[arg(long)]
    pub horizon: Option<String>,
    /// Rule depth for Stop-Go checks
    #[arg(long)]
    pub depth: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Monte Carlo paths
    #[arg(long)]
    pub paths: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// auto | tree | lattice
    #[arg(long)]
    pub model: Option<String>,
    /// position | drawdown | neg_drawdown
    #[arg(long)]
    pub phase: Option<String>,
    /// Stopping rule to check instead of a fresh solve (rst.csv format)
    #[arg(long)]
    pub rst: Option<String>,
    /// Barrier to validate instead of a fresh solve (barrier.csv format)
    #[arg(long)]
    pub barrier: Option<String>,
    /// Tilts for the closure check in `validate`, comma separated
    #[arg(long)]
    pub eps: Option<String>,
    /// Largest number of pairs examined by the Stop-Go check
    #[arg(long)]
    pub budget: Option<String>,
    /// `key = value` file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const KEYS: [&str; 15] = [
    "cmd", "mu", "cost", "dt", "horizon", "depth", "seed", "paths", "out", "model", "phase", "rst", "barrier", "eps",
    "budget",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub cmd: Command,
    pub mu: Option<String>,
    pub cost: String,
    pub dt: Vec<f64>,
    pub horizon: f64,
    pub depth: usize,
    pub seed: u64,
    pub paths: usize,
    pub out: PathBuf,
    pub model: ModelChoice,
    pub phase: Option<String>,
    pub rst: Option<PathBuf>,
    pub barrier: Option<PathBuf>,
    pub eps: Vec<f64>,
    pub budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cmd: Command::Solve,
            mu: None,
            cost: "bt_at".into(),
            dt: vec![0.05],
            horizon: 5.0,
            depth: 3,
            seed: 0,
            paths: 100_000,
            out: PathBuf::from("out"),
            model: ModelChoice::Auto,
            phase: None,
            rst: None,
            barrier: None,
            eps: Vec::new(),
            budget: 20_000,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}={value}: {why}"))
}

fn positive_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let x: f64 = value.trim().parse().map_err(|e| bad(key, value, e))?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(bad(key, value, "must be positive"));
    }
    Ok(x)
}

fn f64_list(key: &str, value: &str, positive: bool) -> Result<Vec<f64>, CliError> {
    value
        .split(',')
        .map(|v| {
            if positive {
                positive_f64(key, v)
            } else {
                let x: f64 = v.trim().parse().map_err(|e| bad(key, value, e))?;
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(bad(key, value, "must be nonnegative"));
                }
                Ok(x)
            }
        })
        .collect()
}

fn positive_usize(key: &str, value: &str) -> Result<usize, CliError> {
    let n: usize = value.trim().parse().map_err(|e| bad(key, value, e))?;
    if n == 0 {
        return Err(bad(key, value, "must be positive"));
    }
    Ok(n)
}

fn existing(key: &str, value: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(value.trim());
    if !p.exists() {
        return Err(bad(key, value, "file not found"));
    }
    Ok(p)
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "cmd" => self.cmd = Command::parse(v).ok_or_else(|| bad(key, v, "unknown command"))?,
            "mu" => self.mu = Some(v.to_string()),
            "cost" => self.cost = v.to_string(),
            "dt" => self.dt = f64_list(key, v, true)?,
            "horizon" => self.horizon = positive_f64(key, v)?,
            "depth" => self.depth = v.parse().map_err(|e| bad(key, v, e))?,
            "seed" => self.seed = v.parse().map_err(|e| bad(key, v, e))?,
            "paths" => self.paths = positive_usize(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model" => {
                self.model = match v {
                    "auto" => ModelChoice::Auto,
                    "tree" => ModelChoice::Tree,
                    "lattice" => ModelChoice::Lattice,
                    _ => return Err(bad(key, v, "expected auto, tree or lattice")),
                }
            }
            "phase" => self.phase = Some(v.to_string()),
            "rst" => self.rst = Some(existing(key, v)?),
            "barrier" => self.barrier = Some(existing(key, v)?),
            "eps" => self.eps = f64_list(key, v, false)?,
            "budget" => self.budget = positive_usize(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &Args) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut given = Vec::new();
        if let Some(path) = &args.config {
            for (key, value) in read_config_file(path)? {
                cfg.set(&key, &value)?;
                given.push(key);
            }
        }
        let flags = [
            ("cmd", &args.cmd),
            ("mu", &args.mu),
            ("cost", &args.cost),
            ("dt", &args.dt),
            ("horizon", &args.horizon),
            ("depth", &args.depth),
            ("seed", &args.seed),
            ("paths", &args.paths),
            ("out", &args.out),
            ("model", &args.model),
            ("phase", &args.phase),
            ("rst", &args.rst),
            ("barrier", &args.barrier),
            ("eps", &args.eps),
            ("budget", &args.budget),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
                given.push(key.to_string());
            }
        }
        for key in KEYS {
            if !given.iter().any(|g| g == key) {
                log::info!("default {key} = {}", cfg.value_of(key));
            }
        }
        if cfg.mu.is_none() && !(cfg.cmd == Command::Validate && cfg.barrier.is_some()) {
            return Err(CliError::Config("a target law is required (--mu)".into()));
        }
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "cmd" => self.cmd.name().into(),
            "mu" => self.mu.clone().unwrap_or_default(),
            "cost" => self.cost.clone(),
            "dt" => list(&self.dt),
            "horizon" => self.horizon.to_string(),
            "depth" => self.depth.to_string(),
            "seed" => self.seed.to_string(),
            "paths" => self.paths.to_string(),
            "out" => self.out.display().to_string(),
            "model" => self.model.name().into(),
            "phase" => self.phase.clone().unwrap_or_default(),
            "rst" => path(&self.rst),
            "barrier" => path(&self.barrier),
            "eps" => list(&self.eps),
            "budget" => self.budget.to_string(),
            _ => String::new(),
        }
    }

    /// Resolved configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    /// Single time step for commands that solve one grid.
    pub fn single_dt(&self) -> Result<f64, CliError> {
        match self.dt.as_slice() {
            [dt] => Ok(*dt),
            _ => Err(CliError::Config(format!("`{}` takes a single dt", self.cmd.name()))),
        }
    }
}

fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let k = k.trim().trim_start_matches("--").to_string();
        if !KEYS.contains(&k.as_str()) {
            return Err(CliError::Config(format!(
                "{}:{}: unknown key `{k}`",
                path.display(),
                i + 1
            )));
        }
        pairs.push((k, v.trim().to_string()));
    }
    Ok(pairs)
}
