use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use stopgo_core::costs::Sufficiency;
use stopgo_core::geometry::{
    check_monotone_region, check_monotonicity_principle, extract_barrier, fmt_num, hitting_rst, stop_go_swap,
    time_marginal, Barrier, PhaseProcess,
};
use stopgo_core::lp::{
    assemble, extract_dual, feasibility_witness, solve, solve_lexicographic_from, DualCertificate, Solution,
};
use stopgo_core::mc::{
    closure_insensitivity, format_samples, simulate_hitting_times, solve_ifp, validation_law, IfpSettings, Law,
    SimulationConfig, ValidationReport, DEFAULT_FINE_DT,
};
use stopgo_core::tree::MAX_TREE_DEPTH;
use stopgo_core::{
    CostFunctional, HorizonPolicy, Model, MuSpec, PathTree, RandomizedStoppingTime, StateKind, StateLattice,
    StoppingLp, TargetDistribution, TimeGrid,
};

use crate::config::{Command, ModelChoice, RunConfig};
use crate::CliError;

/// Largest tree the automatic model choice builds.
const AUTO_TREE_DEPTH: usize = 8;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("{}: {e}", cfg.out.display())))?;
    write(&cfg.out, "config.txt", &cfg.echo())?;
    match cfg.cmd {
        Command::Solve => cmd_solve(cfg),
        Command::Verify => cmd_verify(cfg),
        Command::Ifp => cmd_ifp(cfg),
        Command::Validate => cmd_validate(cfg),
        Command::SwapDemo => cmd_swap_demo(cfg),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), text).map_err(|e| CliError::Config(format!("{}: {e}", dir.join(name).display())))
}

struct Instance {
    grid: TimeGrid,
    spec: MuSpec,
    mu: TargetDistribution,
    cost: CostFunctional,
    model: Arc<Model>,
    phase: PhaseProcess,
}

fn default_phase(cost: &CostFunctional) -> PhaseProcess {
    match cost {
        CostFunctional::DrawdownLex | CostFunctional::NegRunningMax => PhaseProcess::drawdown(),
        _ => PhaseProcess::position(),
    }
}

fn phase_of(cfg: &RunConfig, cost: &CostFunctional) -> Result<PhaseProcess, CliError> {
    match &cfg.phase {
        None => Ok(default_phase(cost)),
        Some(p) => PhaseProcess::from_name(p).ok_or_else(|| CliError::Config(format!("unknown phase `{p}`"))),
    }
}

fn build_model(choice: ModelChoice, grid: TimeGrid, cost: &CostFunctional) -> Result<Arc<Model>, CliError> {
    let suff = cost.state_sufficient();
    let tree = match choice {
        ModelChoice::Tree => true,
        ModelChoice::Lattice => false,
        ModelChoice::Auto => grid.n_steps() <= AUTO_TREE_DEPTH || suff == Sufficiency::FullTree,
    };
    if tree {
        if grid.n_steps() > MAX_TREE_DEPTH {
            return Err(CliError::Config(format!(
                "a path tree of depth {} exceeds the guard {MAX_TREE_DEPTH}; use --model lattice",
                grid.n_steps()
            )));
        }
        return Ok(Arc::new(Model::Tree(PathTree::new(grid)?)));
    }
    let kind = match suff {
        Sufficiency::Position => StateKind::Position,
        Sufficiency::PositionAndMax => StateKind::PositionAndMax,
        Sufficiency::FullTree => {
            return Err(CliError::Config(format!("cost `{}` needs a path tree", cost.name())));
        }
    };
    Ok(Arc::new(Model::Lattice(StateLattice::new(grid, kind))))
}

fn instance(cfg: &RunConfig) -> Result<Instance, CliError> {
    let dt = cfg.single_dt()?;
    let grid = TimeGrid::with_horizon(dt, cfg.horizon)?;
    let spec = MuSpec::parse(cfg.mu.as_deref().unwrap_or_default())?;
    let mu = spec.discretize(grid, HorizonPolicy::LumpAtEnd)?;
    let cost = CostFunctional::from_name(&cfg.cost)?;
    let model = build_model(cfg.model, grid, &cost)?;
    cost.validate(model.graph())?;
    let phase = phase_of(cfg, &cost)?;
    Ok(Instance {
        grid,
        spec,
        mu,
        cost,
        model,
        phase,
    })
}

struct Solved {
    lp: StoppingLp,
    first: Solution,
    rst: RandomizedStoppingTime,
    secondary: Option<f64>,
    cert: Result<DualCertificate, stopgo_core::Error>,
}

fn solve_instance(inst: &Instance) -> Result<Solved, CliError> {
    let lp = assemble(inst.model.clone(), &inst.mu, &inst.cost)?;
    let first = solve(&lp)?;
    let (rst, secondary) = if inst.cost.arity() == 2 {
        let lex = solve_lexicographic_from(&lp, first.clone())?;
        (lex.rst, Some(lex.values.get(1)))
    } else {
        (first.rst.clone(), None)
    };
    let cert = extract_dual(&lp, &first);
    Ok(Solved {
        lp,
        first,
        rst,
        secondary,
        cert,
    })
}

fn cmd_solve(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let s = solve_instance(&inst)?;
    let ex = extract_barrier(&s.rst, &inst.phase);
    let region = check_monotone_region(&s.rst, &inst.phase);
    write(&cfg.out, "rst.csv", &s.rst.to_csv())?;
    write(&cfg.out, "barrier.csv", &ex.to_csv())?;

    let mut sum = String::new();
    let _ = writeln!(sum, "command=solve");
    let _ = writeln!(sum, "model={}", inst.model.describe());
    let _ = writeln!(sum, "mu={}", inst.spec);
    let _ = writeln!(sum, "cost={}", inst.cost.name());
    let _ = writeln!(sum, "backend={}", s.first.backend);
    let _ = writeln!(sum, "columns={}", s.lp.n_columns());
    let _ = writeln!(sum, "rows={}", s.lp.n_rows());
    let _ = writeln!(sum, "value={}", fmt_num(s.first.value));
    let _ = writeln!(sum, "maximized_value={}", fmt_num(-s.first.value));
    if let Some(v) = s.secondary {
        let _ = writeln!(sum, "secondary_value={}", fmt_num(v));
    }
    match &s.cert {
        Ok(c) => {
            let _ = writeln!(sum, "dual_value={}", fmt_num(c.dual));
            let _ = writeln!(sum, "duality_gap={}", fmt_num(c.gap));
            let _ = writeln!(sum, "dual_certificate=pass");
        }
        Err(e) => {
            let _ = writeln!(sum, "dual_certificate=fail ({e})");
        }
    }
    let _ = writeln!(sum, "phase={}", inst.phase.name());
    let _ = writeln!(sum, "barrier_type={}", region.barrier_type);
    let _ = writeln!(sum, "region_offenders={}", region.offenders.len());
    let _ = writeln!(sum, "randomization_on_boundary={}", ex.randomization_on_boundary());
    write(&cfg.out, "summary.txt", &sum)?;
    print!("{sum}");
    Ok(())
}

fn status(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let s = solve_instance(&inst)?;
    let checked = match &cfg.rst {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RandomizedStoppingTime::from_csv(inst.model.clone(), &text, &path.display().to_string())?
        }
        None => s.rst.clone(),
    };
    let mut all_ok = true;
    let mut rep = String::new();

    let inv = checked.check(Some(&inst.mu));
    let ok = inv.holds(1e-9);
    all_ok &= ok;
    let _ = writeln!(rep, "check=invariants status={}", status(ok));

    let opt = s.first.value;
    let value = checked.cost(s.lp.costs()).primary();
    let ok = value <= opt + 1e-9 * (1.0 + opt.abs());
    all_ok &= ok;
    let _ = writeln!(
        rep,
        "check=optimality status={} value={} optimum={}",
        status(ok),
        fmt_num(value),
        fmt_num(opt)
    );

    let sg = check_monotonicity_principle(&checked, &inst.cost, cfg.depth, cfg.budget)?;
    all_ok &= sg.passed();
    let _ = writeln!(
        rep,
        "check=monotonicity status={} depth={} candidates={} checked={} undecided={} violations={}",
        status(sg.passed()),
        cfg.depth,
        sg.candidate_pairs,
        sg.checked,
        sg.undecided,
        sg.violations.len()
    );
    for v in &sg.violations {
        let _ = writeln!(
            rep,
            "violation level={} continued={} stopped={}",
            v.level,
            inst.model.label(v.continued),
            inst.model.label(v.stopped)
        );
    }

    match &s.cert {
        Ok(c) => {
            let _ = writeln!(
                rep,
                "check=duality status=pass gap={} martingale_residual={} feasibility={} slackness={}",
                fmt_num(c.gap),
                fmt_num(c.martingale_residual),
                fmt_num(c.feasibility_violation),
                fmt_num(c.slackness_violation)
            );
        }
        Err(e) => {
            all_ok = false;
            let _ = writeln!(rep, "check=duality status=fail detail={e}");
        }
    }
    let _ = writeln!(rep, "verdict={}", status(all_ok));
    write(&cfg.out, "verify_report.txt", &rep)?;
    print!("{rep}");
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Verification(
            "one or more checks failed; see verify_report.txt".into(),
        ))
    }
}

fn cmd_ifp(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = MuSpec::parse(cfg.mu.as_deref().unwrap_or_default())?;
    let settings = IfpSettings {
        horizon: cfg.horizon,
        n_paths: cfg.paths,
        seed: cfg.seed,
        fine_dt: DEFAULT_FINE_DT,
    };
    let res = solve_ifp(&spec, &cfg.dt, &cfg.cost, &settings)?;
    let last = res.refinements.last().expect("nonempty schedule");
    write(&cfg.out, "refinements.csv", &res.to_csv())?;
    write(
        &cfg.out,
        "barrier.csv",
        &Barrier::pair_to_csv(&last.lower, &last.upper, &last.boundary_rate),
    )?;
    let mut sum = String::new();
    let _ = writeln!(sum, "command=ifp");
    let _ = writeln!(sum, "mu={spec}");
    let _ = writeln!(sum, "cost={}", cfg.cost);
    for r in &res.refinements {
        let _ = writeln!(
            sum,
            "refinement dt={} value={} ks={} unstopped_fraction={}",
            r.dt,
            fmt_num(r.value),
            fmt_num(r.report.ks),
            fmt_num(r.report.unstopped_fraction)
        );
    }
    let _ = writeln!(sum, "final_ks={}", fmt_num(last.report.ks));
    let _ = writeln!(sum, "ks_nonincreasing={}", res.ks_nonincreasing(0.01));
    write(&cfg.out, "summary.txt", &sum)?;
    print!("{sum}");
    Ok(())
}

fn read_barrier(path: &Path, grid: TimeGrid) -> Result<Barrier, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut beta = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let field = line
            .split(',')
            .nth(1)
            .ok_or_else(|| CliError::Config(format!("{}:{}: expected t,beta_lower,...", path.display(), i + 1)))?;
        let b: f64 = field
            .trim()
            .parse()
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        beta.push(b);
    }
    if beta.len() != grid.n_steps() + 1 {
        return Err(CliError::Config(format!(
            "{}: {} barrier rows for a grid with {} times",
            path.display(),
            beta.len(),
            grid.n_steps() + 1
        )));
    }
    Ok(Barrier::new(grid, beta, true))
}

fn cmd_validate(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let barrier = match &cfg.barrier {
        Some(p) => read_barrier(p, inst.grid)?,
        None => extract_barrier(&solve_instance(&inst)?.rst, &inst.phase).lower,
    };
    let sim = SimulationConfig::for_barrier(&barrier, cfg.paths, cfg.seed)?.with_phase(inst.phase);
    let samples = simulate_hitting_times(&barrier, &sim);
    let law = validation_law(&inst.spec, &inst.mu);
    let report = ValidationReport::new(&samples, law.as_ref());
    write(&cfg.out, "samples.txt", &format_samples(&samples))?;
    write(&cfg.out, "cdf.csv", &cdf_table(&samples, law.as_ref(), inst.grid))?;

    let mut sum = String::new();
    let _ = writeln!(sum, "command=validate");
    let _ = writeln!(sum, "mu={}", inst.spec);
    let _ = writeln!(sum, "phase={}", inst.phase.name());
    let _ = writeln!(sum, "fine_dt={}", fmt_num(sim.fine_dt));
    sum.push_str(&report.to_string());

    // the barrier's own lattice law must give back the same stopped nodes
    let mut ok = true;
    if inst.phase == PhaseProcess::position() && matches!(inst.cost, CostFunctional::LinearTime(_)) {
        let planted = hitting_rst(inst.model.clone(), &barrier, &inst.phase);
        let mu_hat = time_marginal(&planted)?;
        let lp = assemble(inst.model.clone(), &mu_hat, &inst.cost)?;
        let back = solve(&lp)?.rst;
        let g = inst.model.graph();
        let exact = (0..g.len()).all(|v| (planted.stop(v) - back.stop(v)).abs() <= 1e-9);
        ok &= exact;
        let _ = writeln!(sum, "round_trip_exact={exact}");
    }
    if !cfg.eps.is_empty() {
        let closure = closure_insensitivity(&barrier, &cfg.eps, &sim)?;
        write(&cfg.out, "closure.csv", &closure.to_csv())?;
        let _ = writeln!(sum, "closure_strictly_decreasing={}", closure.strictly_decreasing());
        if let Some(k) = closure.final_ks() {
            let _ = writeln!(sum, "closure_final_ks={}", fmt_num(k));
        }
    }
    write(&cfg.out, "validation.txt", &sum)?;
    print!("{sum}");
    if ok {
        Ok(())
    } else {
        Err(CliError::Verification(
            "lattice round trip did not recover the barrier".into(),
        ))
    }
}

/// `t,empirical,target` at every grid time.
fn cdf_table(samples: &[f64], law: &dyn Law, grid: TimeGrid) -> String {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out = String::from("t,empirical,target\n");
    for t in grid.times() {
        let emp = s.partition_point(|&x| x <= t) as f64 / n;
        let _ = writeln!(out, "{},{},{}", fmt_num(t), fmt_num(emp), fmt_num(law.cdf(t)));
    }
    out
}

fn cmd_swap_demo(cfg: &RunConfig) -> Result<(), CliError> {
    let mut inst = instance(cfg)?;
    if inst.model.as_tree().is_none() {
        inst.model = build_model(ModelChoice::Tree, inst.grid, &inst.cost)?;
    }
    let lp = assemble(inst.model.clone(), &inst.mu, &inst.cost)?;
    let opt = solve(&lp)?.value;
    let mut rst = match &cfg.rst {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RandomizedStoppingTime::from_csv(inst.model.clone(), &text, &path.display().to_string())?
        }
        None => feasibility_witness(inst.model.clone(), &inst.mu)?,
    };
    let initial = rst.cost(lp.costs()).primary();
    let mut log = String::from("step,level,continued,stopped,amount,cost_before,cost_after\n");
    let mut steps = 0;
    let mut remaining = 0;
    for step in 1..=1000 {
        let rep = check_monotonicity_principle(&rst, &inst.cost, cfg.depth, cfg.budget)?;
        let Some(v) = rep.violations.first() else {
            break;
        };
        let amount = rst.continuing(v.continued).min(rst.stop(v.stopped));
        let before = rst.cost(lp.costs()).primary();
        rst = stop_go_swap(&rst, (v.continued, v.stopped), amount)?;
        let after = rst.cost(lp.costs()).primary();
        let _ = writeln!(
            log,
            "{step},{},{},{},{},{},{}",
            v.level,
            inst.model.label(v.continued),
            inst.model.label(v.stopped),
            fmt_num(amount),
            fmt_num(before),
            fmt_num(after)
        );
        steps = step;
        remaining = rep.violations.len() - 1;
    }
    if steps > 0 {
        remaining = check_monotonicity_principle(&rst, &inst.cost, cfg.depth, cfg.budget)?
            .violations
            .len();
    }
    let final_value = rst.cost(lp.costs()).primary();
    write(&cfg.out, "swaps.csv", &log)?;
    write(&cfg.out, "rst.csv", &rst.to_csv())?;
    let mut sum = String::new();
    let _ = writeln!(sum, "command=swap-demo");
    let _ = writeln!(sum, "model={}", inst.model.describe());
    let _ = writeln!(sum, "cost={}", inst.cost.name());
    let _ = writeln!(sum, "swaps={steps}");
    let _ = writeln!(sum, "initial_value={}", fmt_num(initial));
    let _ = writeln!(sum, "final_value={}", fmt_num(final_value));
    let _ = writeln!(sum, "optimal_value={}", fmt_num(opt));
    let _ = writeln!(sum, "remaining_violations={remaining}");
    write(&cfg.out, "summary.txt", &sum)?;
    print!("{sum}");
    Ok(())
}
