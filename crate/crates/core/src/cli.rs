//! Command-line front end: validation, runs, sweeps and artifact files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::generator::{run_generator, GeneratorError, GeneratorTrajectory};
use crate::oracle::{solve_default, OracleError, OracleSolution};
use crate::scenario::{apply_override, load_config, Scenario, ScenarioConfig, ScenarioError};
use crate::sim::{summarize, trajectory_csv, RunSummary, SimError, Trajectory};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Fraction of the horizon treated as "terminal".
pub const TERMINAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("generator: {0}")]
    Generator(#[from] GeneratorError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Scenario(ScenarioError::Io { .. }) | Self::Io { .. } => EXIT_IO,
            Self::Sim(SimError::Divergence { .. } | SimError::NonFinite { .. })
            | Self::Generator(GeneratorError::Divergence { .. } | GeneratorError::NonFinite { .. }) => EXIT_DIVERGENCE,
            _ => EXIT_VALIDATION,
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "optcoord", version, about = "Distributed constrained optimal coordination simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "OPTCOORD_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file or preset and report every failed assumption.
    Validate { source: String },
    /// Solve for y*, simulate the closed loop and write artifacts.
    Run {
        source: String,
        #[command(flatten)]
        out: OutArgs,
        /// Also render SVG line charts.
        #[arg(long)]
        svg: bool,
        /// Run even when assumption checks fail.
        #[arg(long)]
        force: bool,
    },
    /// Simulate the optimal-signal generator alone.
    Generator {
        source: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Centralized solution of the constrained problem.
    Oracle {
        source: String,
        /// Drop every local constraint.
        #[arg(long)]
        unconstrained: bool,
    },
    /// One run per value; `--param n_w,ell --values 5,0.1 21,0.01` sweeps
    /// jointly.
    Sweep {
        source: String,
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 0.., allow_negative_numbers = true)]
        values: Vec<String>,
        #[command(flatten)]
        out: OutArgs,
    },
}

/// Parse arguments, execute, print errors and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Execute one subcommand, returning its human-readable report.
pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Validate { source } => {
            let s = Scenario::build(load_config(&source)?)?;
            Ok(validation_report(&s))
        }
        Command::Run { source, out, svg, force } => {
            let mut cfg = load_config(&source)?;
            cfg.validation.force |= force;
            let outcome = run_scenario(&Scenario::build(cfg)?, &out.out, svg)?;
            Ok(summary_text(&outcome))
        }
        Command::Generator { source, out } => {
            let s = Scenario::build(load_config(&source)?)?;
            let (sol, traj) = run_generator_only(&s)?;
            fs::create_dir_all(&out.out).map_err(io(format!("creating {}", out.out.display())))?;
            let path = out.out.join("generator.csv");
            fs::write(&path, generator_csv(&traj)).map_err(io(format!("writing {}", path.display())))?;
            let last = traj.last();
            Ok(format!(
                "y_star = {}\nconsensus_residual = {:e}\ndistance_to_ystar = {:e}\ncsv = {}\n",
                fmt_vec(&sol.y),
                last.consensus_residual,
                last.distance_to_optimum.unwrap_or(f64::NAN),
                path.display()
            ))
        }
        Command::Oracle { source, unconstrained } => {
            let s = Scenario::build(load_config(&source)?)?;
            let mut problem = s.central_problem();
            if unconstrained {
                problem = problem.unconstrained();
            }
            let start = Instant::now();
            let sol = solve_default(&problem)?;
            let omega = match problem.feasible_box() {
                Ok(set) => format!("{set:?}"),
                Err(_) => "intersection of non-box sets".into(),
            };
            Ok(format!(
                "y_star = {}\nkkt_residual = {:e}\nomega_0 = {omega}\niterations = {}\nruntime_s = {:.6}\n",
                fmt_vec(&sol.y),
                sol.kkt_residual,
                sol.iterations,
                start.elapsed().as_secs_f64()
            ))
        }
        Command::Sweep { source, param, values, out } => {
            let cfg = load_config(&source)?;
            let rows = sweep(&cfg, &param, &values, &out.out)?;
            let table = sweep_table(&param, &rows);
            fs::create_dir_all(&out.out).map_err(io(format!("creating {}", out.out.display())))?;
            let path = out.out.join("sweep.csv");
            fs::write(&path, &table).map_err(io(format!("writing {}", path.display())))?;
            Ok(table)
        }
    }
}

fn validation_report(s: &Scenario) -> String {
    let mut out = format!("scenario {} is valid\nconfig_hash = {}\n", s.config.name, s.config_hash());
    for (i, r) in s.convexity.iter().enumerate() {
        let _ = writeln!(
            out,
            "agent {}: curvature in [{:.4}, {:.4}] over {} samples",
            i + 1,
            r.min_strong_convexity_ratio,
            r.max_lipschitz_ratio,
            r.samples
        );
    }
    for w in &s.waived {
        let _ = writeln!(out, "waived: {w}");
    }
    out
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

pub fn run_generator_only(s: &Scenario) -> Result<(OracleSolution, GeneratorTrajectory), CliError> {
    let sol = solve_default(&s.central_problem())?;
    let integ = &s.config.integration;
    let traj = run_generator(&s.generator_problem(), &s.generator_initial(), integ.t_end, integ.dt, integ.record_every, Some(&sol.y))?;
    Ok((sol, traj))
}

/// `t, r_1.., v_1.., consensus_residual, distance_to_ystar`; vector blocks
/// expand per component.
pub fn generator_csv(traj: &GeneratorTrajectory) -> String {
    let first = &traj.samples[0].state;
    let (n, q) = (first.r.len(), first.r.first().map_or(1, |r| r.len()));
    let mut header = vec!["t".to_string()];
    for name in ["r", "v"] {
        for i in 1..=n {
            if q == 1 {
                header.push(format!("{name}_{i}"));
            } else {
                header.extend((1..=q).map(|k| format!("{name}_{i}_{k}")));
            }
        }
    }
    header.push("consensus_residual".into());
    header.push("distance_to_ystar".into());
    let mut out = header.join(",") + "\n";
    for s in &traj.samples {
        let mut row = vec![s.t.to_string()];
        row.extend(s.state.r.iter().flat_map(|r| r.iter().map(|x| x.to_string())));
        row.extend(s.state.v.iter().flat_map(|v| v.iter().map(|x| x.to_string())));
        row.push(s.consensus_residual.to_string());
        row.push(s.distance_to_optimum.unwrap_or(f64::NAN).to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub config_hash: String,
    pub oracle: OracleSolution,
    pub trajectory: Trajectory,
    pub summary: RunSummary,
    pub runtime_s: f64,
    pub dt: f64,
    pub out_dir: PathBuf,
}

/// Oracle, closed-loop simulation and metrics, without touching the disk.
pub fn simulate(s: &Scenario) -> Result<(OracleSolution, Trajectory, RunSummary, f64), CliError> {
    let start = Instant::now();
    let sol = solve_default(&s.central_problem())?;
    let sys = s.closed_loop()?;
    let integ = &s.config.integration;
    let traj = sys.integrate(integ.t_end, integ.dt, integ.record_every, Some(&sol.y))?;
    let summary = summarize(&traj, TERMINAL_FRACTION);
    Ok((sol, traj, summary, start.elapsed().as_secs_f64()))
}

/// [`simulate`] plus `trajectory.csv`, `summary.txt`, `config.toml` (and
/// optional SVGs) in `out_dir`.
pub fn run_scenario(s: &Scenario, out_dir: &Path, svg: bool) -> Result<RunOutcome, CliError> {
    let (oracle, trajectory, summary, runtime_s) = simulate(s)?;
    let outcome = RunOutcome {
        name: s.config.name.clone(),
        config_hash: s.config_hash(),
        oracle,
        trajectory,
        summary,
        runtime_s,
        dt: s.config.integration.dt,
        out_dir: out_dir.to_path_buf(),
    };
    fs::create_dir_all(out_dir).map_err(io(format!("creating {}", out_dir.display())))?;
    let files = [
        ("trajectory.csv", trajectory_csv(&outcome.trajectory)),
        ("summary.txt", summary_text(&outcome)),
        ("config.toml", s.echo()),
    ];
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io(format!("writing {}", path.display())))?;
    }
    if svg {
        for (name, body) in [
            ("outputs.svg", line_chart(&outcome.trajectory, "y_i(t)", |a| a.y[0])),
            ("eid.svg", line_chart(&outcome.trajectory, "e_id(t)", |a| signed(&a.disturbance_rejection))),
            ("nn_error.svg", line_chart(&outcome.trajectory, "nn error(t)", |a| signed(&a.nn_error))),
        ] {
            let path = out_dir.join(name);
            fs::write(&path, body).map_err(io(format!("writing {}", path.display())))?;
        }
    }
    Ok(outcome)
}

fn signed(v: &DVector<f64>) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v.norm()
    }
}

/// `key = value` lines.
pub fn summary_text(o: &RunOutcome) -> String {
    let s = &o.summary;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let _ = writeln!(out, "name = {}", o.name);
    let _ = writeln!(out, "config_hash = {}", o.config_hash);
    let _ = writeln!(out, "y_star = {}", fmt_vec(&o.oracle.y));
    let _ = writeln!(out, "oracle_kkt_residual = {:e}", o.oracle.kkt_residual);
    let _ = writeln!(out, "oracle_iterations = {}", o.oracle.iterations);
    let _ = writeln!(out, "t_end = {}", s.t_end);
    let _ = writeln!(out, "dt = {}", o.dt);
    let _ = writeln!(out, "samples = {}", o.trajectory.times.len());
    let _ = writeln!(out, "terminal_fraction = {TERMINAL_FRACTION}");
    let _ = writeln!(out, "terminal_coordination_error = {:.6e}", s.terminal_coordination_error);
    let _ = writeln!(out, "initial_coordination_error = {:.6e}", s.initial_coordination_error);
    let _ = writeln!(out, "terminal_tracking_error = {:.6e}", s.terminal_tracking_error);
    let _ = writeln!(out, "terminal_generator_error = {:.6e}", s.terminal_generator_error);
    let _ = writeln!(out, "terminal_disturbance_rejection = {:.6e}", s.terminal_disturbance_rejection);
    let _ = writeln!(out, "terminal_nn_error = {}", list(&s.terminal_nn_error));
    let _ = writeln!(out, "nn_error_at_1s = {}", list(&s.nn_error_at_1s));
    let _ = writeln!(out, "max_state_norm = {:.6e}", s.max_state_norm);
    let outputs: Vec<f64> = s.terminal_outputs.iter().map(|y| y[0]).collect();
    let _ = writeln!(out, "terminal_outputs = {}", list(&outputs));
    let _ = writeln!(out, "runtime_s = {:.3}", o.runtime_s);
    out
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub values: Vec<f64>,
    pub result: Result<RunSummary, String>,
}

fn parse_values(param: &str, values: &[String]) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let names: Vec<String> = param.split(',').map(|p| p.trim().to_string()).collect();
    let rows = values
        .iter()
        .map(|v| {
            let row: Result<Vec<f64>, _> = v.split(',').map(|x| x.trim().parse::<f64>()).collect();
            match row {
                Ok(r) if r.len() == names.len() => Ok(r),
                _ => Err(CliError::Scenario(ScenarioError::BadValue(v.clone()))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((names, rows))
}

/// One independent run per value tuple, executed in parallel; each writes to
/// its own subdirectory.
pub fn sweep(cfg: &ScenarioConfig, param: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    let (names, rows) = parse_values(param, values)?;
    // reject unknown names before spending any time
    let mut probe = cfg.clone();
    for n in &names {
        apply_override(&mut probe, n, 1.0)?;
    }
    let configs: Vec<(Vec<f64>, ScenarioConfig)> = rows
        .into_iter()
        .map(|row| {
            let mut c = cfg.clone();
            for (n, v) in names.iter().zip(&row) {
                apply_override(&mut c, n, *v)?;
            }
            Ok((row, c))
        })
        .collect::<Result<_, CliError>>()?;
    let results = configs
        .into_par_iter()
        .enumerate()
        .map(|(k, (row, c))| {
            let label: Vec<String> = names.iter().zip(&row).map(|(n, v)| format!("{n}={v}")).collect();
            let dir = out_dir.join(format!("run{k:02}_{}", label.join("_")));
            let result = Scenario::build(c)
                .map_err(CliError::from)
                .and_then(|s| run_scenario(&s, &dir, false))
                .map(|o| o.summary)
                .map_err(|e| e.to_string());
            SweepRow { values: row, result }
        })
        .collect();
    Ok(results)
}

pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{},terminal_coordination_error,terminal_disturbance_rejection,max_terminal_nn_error,max_state_norm,status\n",
        param.split(',').map(str::trim).collect::<Vec<_>>().join(",")
    );
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        match &r.result {
            Ok(s) => {
                let nn = s.terminal_nn_error.iter().copied().fold(0.0, f64::max);
                let _ = writeln!(
                    out,
                    "{},{:e},{:e},{:e},{:e},ok",
                    vals.join(","),
                    s.terminal_coordination_error,
                    s.terminal_disturbance_rejection,
                    nn,
                    s.max_state_norm
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{},,,,,\"{}\"", vals.join(","), e.replace('"', "'"));
            }
        }
    }
    out
}

/// Minimal SVG line chart of one scalar per agent against time.
pub fn line_chart(traj: &Trajectory, title: &str, f: impl Fn(&crate::sim::AgentMetrics) -> f64) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let n_agents = traj.metrics.first().map_or(0, |m| m.agents.len());
    let series: Vec<Vec<(f64, f64)>> = (0..n_agents)
        .map(|i| traj.metrics.iter().map(|m| (m.t, f(&m.agents[i]))).filter(|p| p.1.is_finite()).collect())
        .collect();
    let t_max = traj.times.last().copied().unwrap_or(1.0).max(1e-12);
    let (lo, hi) = series
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let px = |t: f64| M + (W - 2.0 * M) * t / t_max;
    let py = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{M}\" y=\"25\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n\
         <rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(svg, "<text x=\"5\" y=\"{}\" font-size=\"11\">{hi:.3}</text>", M + 4.0);
    let _ = writeln!(svg, "<text x=\"5\" y=\"{}\" font-size=\"11\">{lo:.3}</text>", H - M);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"11\">t = {t_max}</text>", W - M - 40.0, H - M + 18.0);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.iter().map(|&(t, v)| format!("{:.2},{:.2}", px(t), py(v))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>",
            COLORS[i % COLORS.len()],
            pts.join(" ")
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">agent {}</text>", W - M - 60.0, M + 15.0 * (i as f64 + 1.0), COLORS[i % COLORS.len()], i + 1);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_joint_values() {
        let (names, rows) = parse_values("n_w,ell", &["5,0.1".into(), "21,0.01".into()]).unwrap();
        assert_eq!(names, ["n_w", "ell"]);
        assert_eq!(rows, vec![vec![5.0, 0.1], vec![21.0, 0.01]]);
        assert!(parse_values("n_w,ell", &["5".into()]).is_err());
    }

    #[test]
    fn empty_sweep_is_empty_report() {
        let dir = std::env::temp_dir().join("optcoord-empty-sweep-unit");
        let rows = sweep(&crate::scenario::example1(), "n_w", &[], &dir).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_table("n_w", &rows).lines().count(), 1);
    }

    #[test]
    fn unknown_param_rejected() {
        let err = sweep(&crate::scenario::example1(), "kappa", &["1".into()], Path::new("unused")).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn exit_codes() {
        let div = CliError::Sim(SimError::Divergence { t: 1.0, agent: 1, magnitude: 1e10 });
        assert_eq!(div.exit_code(), EXIT_DIVERGENCE);
        let io_err = CliError::Io { context: "x".into(), source: std::io::Error::other("boom") };
        assert_eq!(io_err.exit_code(), EXIT_IO);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_VALIDATION);
    }
}
