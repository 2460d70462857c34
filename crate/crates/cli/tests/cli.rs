use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn stopgo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stopgo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn depth_two(dir: &TempDir, out: &str, cmd: &str, extra: &[&str]) -> Output {
    let atoms = write(dir.path(), "two.csv", "t,mass\n1,0.5\n2,0.5\n");
    let out = dir.path().join(out);
    let mut args = vec![
        "--cmd",
        cmd,
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--cost",
        "bt_at:a=t",
        "--dt",
        "1",
        "--horizon",
        "2",
        "--model",
        "tree",
        "--out",
        out.to_str().unwrap(),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    stopgo(&refs)
}

#[test]
fn solve_depth_two_demo() {
    let dir = TempDir::new().unwrap();
    let o = depth_two(&dir, "run", "solve", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let summary = read(&run, "summary.txt");
    assert!(summary.contains("maximized_value=5.0000000000000000e-1"), "{summary}");
    assert!(summary.contains("dual_certificate=pass"));
    assert!(summary.contains("barrier_type=true"));
    let barrier = read(&run, "barrier.csv");
    let lines: Vec<&str> = barrier.lines().collect();
    assert_eq!(lines[0], "t,beta_lower,beta_upper,boundary_rate");
    assert!(lines[2].starts_with("1.0000000000000000e0,-1.0000000000000000e0,"));
    assert!(read(&run, "rst.csv").starts_with("node_id,level,state_b,state_m,arrival_mass,stop_mass,stop_rate\n"));
    assert!(read(&run, "config.txt").contains("cost=bt_at:a=t\n"));
}

#[test]
fn dirac_target_stops_only_at_the_horizon() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "dirac.csv", "1.0,1.0\n");
    let out = dir.path().join("run");
    let o = stopgo(&[
        "--cmd",
        "solve",
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--dt",
        "0.25",
        "--horizon",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let barrier = read(&out, "barrier.csv");
    let rows: Vec<Vec<&str>> = barrier.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in &rows[..4] {
        assert_eq!(r[1], "-inf");
    }
    assert_ne!(rows[4][1], "-inf");
}

#[test]
fn malformed_target_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "bad.csv", "t,mass\n0.5,abc\n");
    let o = stopgo(&[
        "--cmd",
        "solve",
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.csv:2:"), "{err}");
}

#[test]
fn verify_passes_on_the_optimum() {
    let dir = TempDir::new().unwrap();
    let o = depth_two(&dir, "run", "verify", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let rep = read(&dir.path().join("run"), "verify_report.txt");
    assert!(rep.contains("check=monotonicity status=pass"));
    assert!(rep.contains("check=duality status=pass"));
    assert!(rep.ends_with("verdict=pass\n"));
}

#[test]
fn verify_flags_an_injected_suboptimal_rule() {
    let dir = TempDir::new().unwrap();
    let rst = write(
        dir.path(),
        "rst.csv",
        "node_id,level,state_b,state_m,arrival_mass,stop_mass,stop_rate\n\
         0,0,0,,1,0,0\n\
         1,1,-1,,0.5,0,0\n\
         2,1,1,,0.5,0.5,1\n\
         3,2,-2,,0.25,0.25,1\n\
         4,2,0,,0.25,0.25,1\n\
         5,2,0,,0,0,\n\
         6,2,2,,0,0,\n",
    );
    let o = depth_two(&dir, "run", "verify", &["--rst", rst.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let rep = read(&dir.path().join("run"), "verify_report.txt");
    assert!(rep.contains("check=monotonicity status=fail"), "{rep}");
    assert!(rep.contains("violation level=1"), "{rep}");
    assert!(rep.contains("check=invariants status=pass"));
}

#[test]
fn verify_is_vacuous_for_a_dirac_target() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "dirac.csv", "1.0,1.0\n");
    let out = dir.path().join("run");
    let o = stopgo(&[
        "--cmd",
        "verify",
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--dt",
        "0.25",
        "--horizon",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(read(&out, "verify_report.txt").contains("candidates=0"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    assert!(depth_two(&dir, "a", "solve", &[]).status.success());
    assert!(depth_two(&dir, "b", "solve", &[]).status.success());
    for f in ["rst.csv", "barrier.csv", "summary.txt"] {
        assert_eq!(read(&dir.path().join("a"), f), read(&dir.path().join("b"), f), "{f}");
    }
}

#[test]
fn drawdown_run_is_barrier_type() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "dd.csv", "0.5,0.3\n1.25,0.3\n2.0,0.4\n");
    let out = dir.path().join("run");
    let o = stopgo(&[
        "--cmd",
        "solve",
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--cost",
        "drawdown_lex",
        "--dt",
        "0.25",
        "--horizon",
        "2",
        "--model",
        "lattice",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read(&out, "summary.txt");
    assert!(s.contains("phase=drawdown"));
    assert!(s.contains("barrier_type=true"), "{s}");
    assert!(s.contains("secondary_value="));
}

#[test]
fn ifp_then_validate_round_trip() {
    let dir = TempDir::new().unwrap();
    let ifp = dir.path().join("ifp");
    let o = stopgo(&[
        "--cmd",
        "ifp",
        "--mu",
        "levy:a=1",
        "--dt",
        "0.2,0.1",
        "--horizon",
        "2",
        "--paths",
        "2000",
        "--out",
        ifp.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&ifp, "refinements.csv").lines().count(), 3);
    assert!(read(&ifp, "summary.txt").contains("final_ks="));

    let val = dir.path().join("val");
    let barrier = ifp.join("barrier.csv");
    let o = stopgo(&[
        "--cmd",
        "validate",
        "--mu",
        "levy:a=1",
        "--dt",
        "0.1",
        "--horizon",
        "2",
        "--paths",
        "2000",
        "--model",
        "lattice",
        "--barrier",
        barrier.to_str().unwrap(),
        "--eps",
        "0.2,0.1",
        "--out",
        val.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read(&val, "validation.txt");
    assert!(v.contains("round_trip_exact=true"), "{v}");
    assert!(v.contains("closure_strictly_decreasing="));
    assert_eq!(read(&val, "samples.txt").lines().count(), 2000);
    assert!(read(&val, "cdf.csv").starts_with("t,empirical,target\n"));
}

#[test]
fn swap_demo_improves_the_witness() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "three.csv", "0.25,0.3\n0.5,0.3\n0.75,0.4\n");
    let out = dir.path().join("run");
    let o = stopgo(&[
        "--cmd",
        "swap-demo",
        "--mu",
        &format!("atoms:{}", atoms.display()),
        "--dt",
        "0.25",
        "--horizon",
        "0.75",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read(&out, "summary.txt");
    let get = |k: &str| -> f64 {
        s.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(get("swaps") >= 1.0, "{s}");
    assert!(get("final_value") < get("initial_value"));
    assert!(get("final_value") >= get("optimal_value") - 1e-9);
    assert!(read(&out, "swaps.csv").lines().count() >= 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "two.csv", "1,0.5\n2,0.5\n");
    let cfg = write(
        dir.path(),
        "run.cfg",
        &format!(
            "# depth-2 demo\ncmd = solve\nmu = atoms:{}\ncost = bt_at\ndt = 1\nhorizon = 2\nout = {}\n",
            atoms.display(),
            dir.path().join("run").display()
        ),
    );
    let o = stopgo(&["--config", cfg.to_str().unwrap(), "--cost", "bt_at:a=t"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = read(&dir.path().join("run"), "config.txt");
    assert!(echo.contains("cost=bt_at:a=t\n"));
    assert!(echo.contains("horizon=2\n"));

    let bad = write(dir.path(), "bad.cfg", "colour = blue\n");
    let o = stopgo(&["--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.cfg:1"));
}

#[test]
fn missing_target_and_bad_numbers_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        stopgo(&["--cmd", "solve", "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let o = stopgo(&[
        "--cmd",
        "solve",
        "--mu",
        "levy:a=1",
        "--dt",
        "-1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = stopgo(&["--cmd", "launch", "--mu", "levy:a=1"]);
    assert_eq!(o.status.code(), Some(2));
}
