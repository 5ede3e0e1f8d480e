//! Command-line entry point: config parsing, dispatch, artifact emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.
//! Every run writes `manifest.json` (config hash, seed, versions) next to
//! its artifacts.

use crate::bellman::{apply_t_pi_action, Ambiguity, BellmanOpts};
use crate::concentration::{radius, ConcentrationParams};
use crate::config::{Manifest, RunConfig};
use crate::distributions::{EmpiricalDistribution, GroundMetric};
use crate::harness::{
    dr_vs_saa_comparison, gaussian_sampler, investment_problem, investment_projection,
    out_of_sample_cost, reliability_sweep, write_comparison_csv, write_reliability_csv, TrialSetup,
};
use crate::lq::{solve_dare, solve_dr_riccati, LqProblem};
use crate::problem::{Grid, GridValueFunction, StationaryPolicy};
use crate::solvers::{get_solver, SolveOptions};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "wdrc", version, about = "Wasserstein distributionally robust stochastic control")]
struct Cli {
    /// Worker count; execution is serial regardless, the flag is accepted
    /// for interface stability (1 guarantees serial semantics).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Emit a plot script next to the CSV artifacts.
    #[arg(long, global = true)]
    plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `run.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` config overrides.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the DR control problem and write value/policy artifacts.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Ambiguity radius (overrides `ambiguity.theta`).
        #[arg(long)]
        theta: Option<f64>,
        /// Solver name: vi | pi | mpi.
        #[arg(long)]
        solver: Option<String>,
    },
    /// Evaluate a stored tabular policy out of sample.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy CSV produced by `solve`.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Extract the worst-case disturbance distribution at a state.
    WorstCase {
        #[command(flatten)]
        common: Common,
        /// State (comma-separated coordinates); defaults to `problem.x0`.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Concentration-based ambiguity radius.
    Radius {
        #[command(flatten)]
        common: Common,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
    },
    /// DR-Riccati solve; emits P and K.
    Lq {
        #[command(flatten)]
        common: Common,
        /// Penalty parameter (overrides `lq.lambda`).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Reliability / DR-vs-SAA experiment pipeline.
    Experiment {
        /// Problem family; only `invest` is built in.
        problem: String,
        #[command(flatten)]
        common: Common,
        /// Single training-sample size (overrides `experiment.n_list`).
        #[arg(long = "N")]
        n: Option<usize>,
        /// Comma-separated radii (overrides `experiment.theta_list`).
        #[arg(long)]
        theta_sweep: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Skip the DR-vs-SAA comparison table.
        #[arg(long)]
        no_comparison: bool,
    },
}

/// Parse and run; returns the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version via this path with status 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!(
                "{}",
                serde_json::json!({ "error": kind, "message": e.to_string(), "exit": code })
            );
            code
        }
    }
}

fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::DimensionMismatch(_) | Error::Io(_) => {
            (2, "config")
        }
        _ => (3, "numerical"),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { common, theta, solver } => {
            let mut extra = Vec::new();
            if let Some(t) = theta {
                extra.push(format!("ambiguity.theta={t}"));
            }
            if let Some(s) = &solver {
                extra.push(format!("solver.name={s}"));
            }
            let (cfg, out) = load(&common, &extra)?;
            cmd_solve(&cfg, &out, cli.plots)
        }
        Command::Evaluate { common, policy } => {
            let (cfg, out) = load(&common, &[])?;
            cmd_evaluate(&cfg, &out, &policy)
        }
        Command::WorstCase { common, x, theta } => {
            let mut extra = Vec::new();
            if let Some(t) = theta {
                extra.push(format!("ambiguity.theta={t}"));
            }
            let (cfg, out) = load(&common, &extra)?;
            let x0 = match x {
                Some(s) => parse_f64_list(&s)?,
                None => vec![cfg.problem.x0],
            };
            cmd_worst_case(&cfg, &out, &x0)
        }
        Command::Radius { common, n, beta, p, l, q, c1, c2 } => {
            let mut extra = Vec::new();
            for (k, v) in [("n", n.map(|v| v as f64)), ("l", l.map(|v| v as f64))] {
                if let Some(v) = v {
                    extra.push(format!("radius.{k}={v}"));
                }
            }
            for (k, v) in [("beta", beta), ("p", p), ("q", q), ("c1", c1), ("c2", c2)] {
                if let Some(v) = v {
                    extra.push(format!("radius.{k}={v}"));
                }
            }
            let (cfg, out) = load(&common, &extra)?;
            cmd_radius(&cfg, &out)
        }
        Command::Lq { common, lambda } => {
            let mut extra = Vec::new();
            if let Some(lam) = lambda {
                extra.push(format!("lq.lambda={lam}"));
            }
            let (cfg, out) = load(&common, &extra)?;
            cmd_lq(&cfg, &out)
        }
        Command::Experiment { problem, common, n, theta_sweep, trials, no_comparison } => {
            if problem != "invest" {
                return Err(Error::Config(format!("unsupported experiment problem '{problem}'")));
            }
            let mut extra = Vec::new();
            if let Some(t) = trials {
                extra.push(format!("experiment.trials={t}"));
            }
            let (mut cfg, out) = load(&common, &extra)?;
            if let Some(n) = n {
                cfg.experiment.n_list = vec![n];
            }
            if let Some(ts) = theta_sweep {
                cfg.experiment.theta_list = parse_f64_list(&ts)?;
            }
            cmd_experiment(&cfg, &out, !no_comparison)
        }
    }
}

fn load(common: &Common, extra: &[String]) -> Result<(RunConfig, PathBuf)> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<String> = extra.to_vec();
    if let Some(seed) = common.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    overrides.extend(common.set.iter().cloned());
    let cfg = base.with_overrides(&overrides)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot parse '{t}' as a number")))
        })
        .collect()
}

fn build_setup(cfg: &RunConfig) -> Result<TrialSetup> {
    if cfg.problem.kind != "invest" {
        return Err(Error::Config(format!("unsupported problem kind '{}'", cfg.problem.kind)));
    }
    let p = &cfg.problem;
    let (problem, grid) =
        investment_problem(p.zeta, p.alpha, p.eta, p.x_max, p.grid, p.action_m)?;
    Ok(TrialSetup {
        problem,
        grid,
        metric: GroundMetric::euclidean(cfg.ambiguity.metric_order)?,
        w_extra: cfg.ambiguity.w_extra,
        sampler: gaussian_sampler(p.true_mean, p.true_sd),
        x0_set: vec![vec![p.x0]],
        horizon: cfg.experiment.horizon,
        rollouts: cfg.experiment.rollouts,
        delta: cfg.solver.delta,
        bellman: BellmanOpts { lambda_iters: cfg.solver.lambda_iters, ..BellmanOpts::default() },
        project: Some(investment_projection()),
    })
}

fn draw_training(setup: &TrialSetup, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (setup.sampler)(&mut rng)).collect()
}

fn training_ambiguity(setup: &TrialSetup, cfg: &RunConfig, samples: Vec<Vec<f64>>) -> Result<Ambiguity> {
    let nu = EmpiricalDistribution::from_samples(samples)?;
    let counts = vec![setup.w_extra.max(2); setup.problem.disturbance_lower.len()];
    Ambiguity::with_uniform_grid(
        nu,
        cfg.ambiguity.theta,
        setup.metric,
        &setup.problem.disturbance_lower,
        &setup.problem.disturbance_upper,
        &counts,
    )
}

fn write_summary(out: &Path, summary: &serde_json::Value) -> Result<()> {
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(summary).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(())
}

fn write_grid_csv(path: &Path, grid: &Grid, columns: &[(&str, &dyn Fn(usize) -> Vec<f64>)]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header: Vec<String> = (0..grid.dim()).map(|d| format!("x{d}")).collect();
    for (name, f) in columns {
        let width = f(0).len();
        if width == 1 {
            header.push((*name).to_string());
        } else {
            header.extend((0..width).map(|c| format!("{name}{c}")));
        }
    }
    wtr.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for k in 0..grid.node_count() {
        let mut row: Vec<String> = grid.coords(k).iter().map(|v| format!("{v:.12e}")).collect();
        for (_, f) in columns {
            row.extend(f(k).iter().map(|v| format!("{v:.12e}")));
        }
        wtr.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    wtr.write_record((0..m.ncols()).map(|c| format!("c{c}")))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in 0..m.nrows() {
        wtr.write_record((0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_plot_script(out: &Path, csvs: &[&str]) -> Result<()> {
    let mut body = String::from(
        "#!/usr/bin/env python3\nimport csv, sys\nimport matplotlib.pyplot as plt\n\n",
    );
    for name in csvs {
        body.push_str(&format!(
            "with open('{name}') as f:\n    rows = list(csv.DictReader(f))\nif rows:\n    keys = list(rows[0])\n    xs = [float(r[keys[0]]) for r in rows]\n    for k in keys[1:]:\n        try:\n            plt.plot(xs, [float(r[k]) for r in rows], label=k)\n        except ValueError:\n            pass\n    plt.legend(); plt.xlabel(keys[0]); plt.title('{name}')\n    plt.savefig('{name}.png', dpi=150); plt.clf()\n"
        ));
    }
    std::fs::write(out.join("plot.py"), body)?;
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, out: &Path, plots: bool) -> Result<()> {
    let setup = build_setup(cfg)?;
    let samples = draw_training(&setup, cfg.ambiguity.n, cfg.run.seed);
    let amb = training_ambiguity(&setup, cfg, samples)?;
    let solver = get_solver(&cfg.solver.name)?;
    let opts = SolveOptions {
        delta: cfg.solver.delta,
        max_iter: cfg.solver.max_iter,
        bellman: setup.bellman.clone(),
        mpi_order: cfg.solver.mpi_order,
    };
    let v0 = GridValueFunction::constant(setup.grid.clone(), 0.0);
    let outcome = solver.solve(&setup.problem, &amb, &v0, &opts)?;
    let values = outcome.value.values().to_vec();
    let actions = match &outcome.policy {
        StationaryPolicy::Tabular { actions, .. } => actions.clone(),
        _ => return Err(Error::Numerical("expected a tabular policy".into())),
    };
    write_grid_csv(
        &out.join("value.csv"),
        &setup.grid,
        &[("value", &|k| vec![values[k]])],
    )?;
    write_grid_csv(&out.join("policy.csv"), &setup.grid, &[("u", &|k| actions[k].clone())])?;
    if cfg.solver.log {
        let f = std::fs::File::create(out.join("solver_log.csv"))?;
        outcome.report.write_csv(f)?;
    }
    let v_x0 = outcome.value.evaluate_clamping(&[cfg.problem.x0])?.0;
    write_summary(
        out,
        &serde_json::json!({
            "command": "solve",
            "solver": solver.name(),
            "theta": cfg.ambiguity.theta,
            "n": cfg.ambiguity.n,
            "iterations": outcome.report.iterations,
            "final_residual": outcome.report.final_residual,
            "converged": outcome.report.converged,
            "value_at_x0": v_x0,
        }),
    )?;
    if plots {
        write_plot_script(out, &["value.csv", "policy.csv"])?;
    }
    Manifest::new(cfg, "solve")?.write(out)
}

fn read_policy_csv(path: &Path, grid: &Arc<Grid>) -> Result<StationaryPolicy> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read policy {}: {e}", path.display())))?;
    let header_len = rdr
        .headers()
        .map_err(|e| Error::Config(e.to_string()))?
        .len();
    let sd = grid.dim();
    if header_len <= sd {
        return Err(Error::Config("policy CSV has no action columns".into()));
    }
    let mut actions = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("bad number '{t}'"))))
            .collect::<Result<_>>()?;
        actions.push(row[sd..].to_vec());
    }
    if actions.len() != grid.node_count() {
        return Err(Error::Config(format!(
            "policy CSV has {} rows, grid has {} nodes",
            actions.len(),
            grid.node_count()
        )));
    }
    StationaryPolicy::tabular(grid.clone(), actions)
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, policy_path: &Path) -> Result<()> {
    let setup = build_setup(cfg)?;
    let policy = read_policy_csv(policy_path, &setup.grid)?;
    let oos = out_of_sample_cost(
        &setup.problem,
        &policy,
        setup.project.as_ref(),
        &setup.sampler,
        &[cfg.problem.x0],
        setup.horizon,
        setup.rollouts,
        cfg.run.seed,
        f64::INFINITY,
    )?;
    let mut wtr = csv::Writer::from_path(out.join("evaluation.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    wtr.write_record(["rollout", "discounted_cost"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (r, c) in oos.per_rollout.iter().enumerate() {
        wtr.write_record([r.to_string(), format!("{c:.12e}")])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    let n = oos.per_rollout.len() as f64;
    let var = oos
        .per_rollout
        .iter()
        .map(|c| (c - oos.mean) * (c - oos.mean))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    write_summary(
        out,
        &serde_json::json!({
            "command": "evaluate",
            "mean_cost": oos.mean,
            "standard_error": (var / n).sqrt(),
            "rollouts": oos.per_rollout.len(),
            "truncation_bound": oos.truncation_bound,
        }),
    )?;
    Manifest::new(cfg, "evaluate")?.write(out)
}

fn cmd_worst_case(cfg: &RunConfig, out: &Path, x0: &[f64]) -> Result<()> {
    let setup = build_setup(cfg)?;
    let samples = draw_training(&setup, cfg.ambiguity.n, cfg.run.seed);
    let amb = training_ambiguity(&setup, cfg, samples)?;
    let solver = get_solver(&cfg.solver.name)?;
    let opts = SolveOptions {
        delta: cfg.solver.delta,
        max_iter: cfg.solver.max_iter,
        bellman: setup.bellman.clone(),
        mpi_order: cfg.solver.mpi_order,
    };
    let v0 = GridValueFunction::constant(setup.grid.clone(), 0.0);
    let outcome = solver.solve(&setup.problem, &amb, &v0, &opts)?;
    let u = outcome.policy.action(x0)?;
    let (value, wc) =
        apply_t_pi_action(&outcome.value, x0, &u, &setup.problem, &amb, &setup.bellman, None)?;
    let mut wtr = csv::Writer::from_path(out.join("worst_case.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let dim = wc.atoms.first().map(|a| a.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..dim).map(|d| format!("w{d}")).collect();
    header.push("weight".into());
    wtr.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (a, w) in wc.atoms.iter().zip(&wc.weights) {
        let mut row: Vec<String> = a.iter().map(|v| format!("{v:.12e}")).collect();
        row.push(format!("{w:.12e}"));
        wtr.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    write_summary(
        out,
        &serde_json::json!({
            "command": "worst-case",
            "x": x0,
            "action": u,
            "value": value,
            "atoms": wc.atoms.len(),
            "budget_residual": wc.budget_residual,
        }),
    )?;
    Manifest::new(cfg, "worst-case")?.write(out)
}

fn cmd_radius(cfg: &RunConfig, out: &Path) -> Result<()> {
    let r = &cfg.radius;
    let params = ConcentrationParams::new(r.l, r.p, r.q, r.c1, r.c2)?;
    let theta = radius(r.n, r.beta, &params)?;
    println!("{theta:.12e}");
    write_summary(
        out,
        &serde_json::json!({
            "command": "radius",
            "n": r.n,
            "beta": r.beta,
            "theta": theta,
        }),
    )?;
    Manifest::new(cfg, "radius")?.write(out)
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

fn cmd_lq(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.lq;
    let lq = LqProblem::new(
        to_matrix(&s.a, "lq.a")?,
        to_matrix(&s.b, "lq.b")?,
        to_matrix(&s.xi, "lq.xi")?,
        to_matrix(&s.q, "lq.q")?,
        to_matrix(&s.r, "lq.r")?,
        s.alpha,
        s.lambda,
        EmpiricalDistribution::from_samples(s.samples.clone())?,
    )?;
    let sol = solve_dr_riccati(&lq, 1e-12, 100_000)?;
    let (_, k_dare, _) = solve_dare(&lq.a, &lq.b, &lq.q, &lq.r, lq.alpha, 1e-12, 100_000)?;
    write_matrix_csv(&out.join("P.csv"), &sol.p)?;
    write_matrix_csv(&out.join("K.csv"), &sol.k)?;
    write_summary(
        out,
        &serde_json::json!({
            "command": "lq",
            "lambda": s.lambda,
            "z": sol.z,
            "residual": sol.residual,
            "iterations": sol.iterations,
            "lambda_ok": sol.lambda_ok,
            "gain_gap_to_dare": (&sol.k - &k_dare).norm(),
            "warnings": sol.warnings,
        }),
    )?;
    Manifest::new(cfg, "lq")?.write(out)
}

fn cmd_experiment(cfg: &RunConfig, out: &Path, comparison: bool) -> Result<()> {
    let mut setup = build_setup(cfg)?;
    setup.horizon = cfg.experiment.horizon;
    setup.rollouts = cfg.experiment.rollouts;
    let mut reports = Vec::new();
    for &n in &cfg.experiment.n_list {
        reports.extend(reliability_sweep(
            &setup,
            &cfg.experiment.theta_list,
            n,
            cfg.experiment.trials,
            cfg.run.seed,
        )?);
    }
    let f = std::fs::File::create(out.join("reliability.csv"))?;
    write_reliability_csv(&reports, f)?;
    let mut summary = serde_json::json!({
        "command": "experiment",
        "trials": cfg.experiment.trials,
        "n_list": cfg.experiment.n_list,
        "theta_list": cfg.experiment.theta_list,
    });
    if comparison {
        let n = *cfg.experiment.n_list.first().unwrap_or(&10);
        let table = dr_vs_saa_comparison(
            &setup,
            n,
            &cfg.experiment.theta_list,
            cfg.experiment.training_draws,
            cfg.run.seed,
        )?;
        let f = std::fs::File::create(out.join("comparison.csv"))?;
        write_comparison_csv(&table, f)?;
        summary["best_theta"] = serde_json::json!(table.thetas[table.best_theta_index]);
        summary["saa_mean_cost"] = serde_json::json!(table.saa_mean);
        summary["best_dr_mean_cost"] = serde_json::json!(table.dr_mean[table.best_theta_index]);
    }
    write_summary(out, &summary)?;
    Manifest::new(cfg, "experiment")?.write(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_out(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wdrc-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("wdrc".to_string()).chain(args.iter().map(|s| s.to_string())))
    }

    #[test]
    fn radius_writes_manifest_and_summary() {
        let out = tmp_out("radius");
        let code = run_args(&[
            "radius",
            "--N",
            "100",
            "--beta",
            "0.05",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert!(summary["theta"].as_f64().unwrap() > 0.0);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["seed"], 0);
        assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
    }

    #[test]
    fn unknown_config_key_exits_two() {
        let out = tmp_out("badkey");
        std::fs::create_dir_all(&out).unwrap();
        let cfg = out.join("bad.toml");
        std::fs::write(&cfg, "[solver]\nwibble = 1\n").unwrap();
        let code = run_args(&["radius", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_solver_exits_two() {
        let out = tmp_out("badsolver");
        let code = run_args(&[
            "solve",
            "--solver",
            "simplex9000",
            "--set",
            "problem.grid=8",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn solve_emits_artifacts() {
        let out = tmp_out("solve");
        let code = run_args(&[
            "solve",
            "--theta",
            "0.02",
            "--set",
            "problem.grid=10",
            "--set",
            "problem.action_m=3",
            "--set",
            "ambiguity.n=4",
            "--set",
            "solver.delta=1e-3",
            "--out",
            out.to_str().unwrap(),
            "--plots",
        ]);
        assert_eq!(code, 0);
        for f in ["value.csv", "policy.csv", "solver_log.csv", "summary.json", "manifest.json", "plot.py"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let value = std::fs::read_to_string(out.join("value.csv")).unwrap();
        assert!(value.starts_with("x0,value"));

        // Round-trip the policy through evaluate.
        let out2 = tmp_out("eval");
        let code = run_args(&[
            "evaluate",
            "--policy",
            out.join("policy.csv").to_str().unwrap(),
            "--set",
            "problem.grid=10",
            "--set",
            "problem.action_m=3",
            "--set",
            "experiment.rollouts=10",
            "--set",
            "experiment.horizon=30",
            "--out",
            out2.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out2.join("evaluation.csv").exists());
    }

    #[test]
    fn lq_emits_gain_near_dare_for_large_lambda() {
        let out = tmp_out("lq");
        let code = run_args(&["lq", "--lambda", "1e6", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert!(summary["gain_gap_to_dare"].as_f64().unwrap() < 1e-3);
        assert!(out.join("P.csv").exists() && out.join("K.csv").exists());
    }

    #[test]
    fn worst_case_emits_distribution() {
        let out = tmp_out("wc");
        let code = run_args(&[
            "worst-case",
            "--theta",
            "0.05",
            "--set",
            "problem.grid=10",
            "--set",
            "problem.action_m=3",
            "--set",
            "ambiguity.n=4",
            "--set",
            "solver.delta=1e-3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let wc = std::fs::read_to_string(out.join("worst_case.csv")).unwrap();
        assert!(wc.starts_with("w0,weight"));
        let weights: f64 = wc
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((weights - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bad_number_list_exits_two() {
        let out = tmp_out("badlist");
        let code = run_args(&[
            "experiment",
            "invest",
            "--theta-sweep",
            "0,zebra",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }
}
