//! Command-line harness: experiment configuration, simulation and solver
//! drivers, the validation battery, and report emission.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
//! 3 validation failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use levyhjb::config::ExperimentConfig;
use levyhjb::fk::mean_stderr;
use levyhjb::hjb::{
    dpp_consistency, evaluate_cost, verify_identity, ControlOperator, FeedbackLaw, HjbSolver,
    ValueFunction,
};
use levyhjb::sde::{
    simulate_path, ControlLaw, RandomAdmissible, RecordMode, SimulationPlan, ZeroControl,
};
use levyhjb::validate::{run_battery, Level};

#[derive(Parser)]
#[command(
    name = "levyhjb",
    version,
    about = "Spectral Galerkin simulation and feedback control of stochastic 2D Navier-Stokes dynamics"
)]
struct Cli {
    /// Path to the experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override (also LEVYHJB_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (also LEVYHJB_WORKERS); results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate uncontrolled state paths and write trajectory summaries.
    Simulate {
        /// Number of Monte Carlo paths.
        #[arg(long, default_value_t = 100)]
        paths: usize,
        /// Dump the first N full trajectories (time, coefficients, accumulators).
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Solve the mild-form value function and persist it with the Picard history.
    Solve,
    /// Price policies against a solved value function and check the cost identity.
    Evaluate {
        /// Value-function snapshot produced by `solve`.
        #[arg(long)]
        value: PathBuf,
        /// Paths per policy evaluation.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
    },
    /// Run the invariant battery and emit a machine-readable report.
    Validate {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
    },
    /// Render a stored report: table view, plot-ready CSV and a gnuplot stub.
    Report {
        /// Report JSON produced by `validate` or `evaluate`.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Validation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Validation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Validation(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn env_u64(name: &str) -> Option<u64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn env_usize(name: &str) -> Option<usize> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    if let Some(seed) = cli.seed.or_else(|| env_u64("LEVYHJB_SEED")) {
        cfg.seeds.master = seed;
    }
    for w in cfg.warnings() {
        eprintln!("warning: {}: {}", w.field, w.message);
    }
    Ok(cfg)
}

fn init_workers(cli: &Cli) {
    if let Some(n) = cli.workers.or_else(|| env_usize("LEVYHJB_WORKERS")) {
        // ignore failure when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content)
        .map_err(|e| Failure::Numerical(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Numerical(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_workers(&cli);
    match &cli.command {
        Command::Simulate { paths, dump } => cmd_simulate(&cli, *paths, *dump),
        Command::Solve => cmd_solve(&cli),
        Command::Evaluate { value, paths } => cmd_evaluate(&cli, value, *paths),
        Command::Validate { level } => cmd_validate(&cli, *level),
        Command::Report { input } => cmd_report(&cli, input),
    }
}

fn cmd_simulate(cli: &Cli, n_paths: usize, dump: usize) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let fingerprint = cfg.fingerprint();
    let model = cfg
        .build_model()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let jumps = cfg.jump_model(&model.basis);
    let mut plan = SimulationPlan::new(&model, &jumps, cfg.integrator(), cfg.seeds.master);
    if dump > 0 {
        plan.record = RecordMode::Full;
    }
    let x0 = model.basis.zero_field();
    let results: Vec<_> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| simulate_path(&plan, &x0, path, None))
        .collect();

    let mut rows = Vec::with_capacity(n_paths);
    let mut failures = 0usize;
    let mut first_failure = String::new();
    let mut bundles_for_dump = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(b) => {
                rows.push((
                    i,
                    b.terminal.norm(),
                    b.enstrophy,
                    b.running_cost + b.terminal.norm_sq(),
                    b.jump_count,
                ));
                if i < dump {
                    bundles_for_dump.push((i, b));
                }
            }
            Err(e) => {
                failures += 1;
                if first_failure.is_empty() {
                    first_failure = e.to_string();
                }
            }
        }
    }
    if rows.is_empty() || failures as f64 > 0.001 * n_paths as f64 {
        return Err(Failure::Numerical(format!(
            "{failures} of {n_paths} paths failed; first: {first_failure}"
        )));
    }

    let mut csv = format!("# fingerprint={fingerprint} seed={}\n", cfg.seeds.master);
    csv.push_str("path,terminal_norm,enstrophy,cost,jump_count\n");
    for (i, norm, ens, cost, jumps) in &rows {
        csv.push_str(&format!("{i},{norm},{ens},{cost},{jumps}\n"));
    }
    write_text(&dir.join("simulate_paths.csv"), &csv)?;

    let terminal: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let enstrophy: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let cost: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let total_jumps: usize = rows.iter().map(|r| r.4).sum();
    let (tm, ts) = mean_stderr(&terminal);
    let (em, es) = mean_stderr(&enstrophy);
    let (cm, cs) = mean_stderr(&cost);
    let summary = serde_json::json!({
        "schema_version": 1,
        "fingerprint": fingerprint,
        "master_seed": cfg.seeds.master,
        "n_paths": rows.len(),
        "failed_paths": failures,
        "terminal_norm": {"mean": tm, "stderr": ts},
        "enstrophy": {"mean": em, "stderr": es},
        "cost": {"mean": cm, "stderr": cs},
        "total_jump_events": total_jumps,
    });
    write_json(&dir.join("simulate_summary.json"), &summary)?;

    if dump > 0 {
        // basis and tensor snapshot for cross-implementation comparison
        write_json(
            &dir.join("spectral_snapshot.json"),
            &levyhjb::spectral::snapshot_json(&model.basis, &model.tensor),
        )?;
    }
    for (i, bundle) in &bundles_for_dump {
        let mut dump_csv = format!("# fingerprint={fingerprint} seed={} path={i}\n", cfg.seeds.master);
        dump_csv.push_str("time,");
        dump_csv.push_str(
            &(0..model.basis.len())
                .map(|j| format!("c{j}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        dump_csv.push_str(",enstrophy\n");
        for ((t, state), ens) in bundle
            .times
            .iter()
            .zip(&bundle.states)
            .zip(&bundle.enstrophy_at)
        {
            let coeffs = state
                .coeffs()
                .iter()
                .map(|c| format!("{c}"))
                .collect::<Vec<_>>()
                .join(",");
            dump_csv.push_str(&format!("{t},{coeffs},{ens}\n"));
        }
        write_text(&dir.join(format!("path_{i:05}.csv")), &dump_csv)?;
    }

    println!(
        "simulated {} paths (fingerprint {fingerprint}, seed {}): cost {cm:.6} +- {cs:.6}, {total_jumps} jump events",
        rows.len(),
        cfg.seeds.master
    );
    Ok(())
}

fn cmd_solve(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let fingerprint = cfg.fingerprint();
    let model = cfg
        .build_model()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let jumps = cfg.jump_model(&model.basis);
    let solver = HjbSolver {
        model: &model,
        jumps: &jumps,
        dt: cfg.integrator.dt,
        horizon: cfg.integrator.horizon,
        params: cfg.hjb.clone(),
        master: cfg.seeds.master,
    };
    let (vf, report) = solver
        .solve()
        .map_err(|e| Failure::Numerical(format!("value-function solve failed: {e}")))?;
    write_json(
        &dir.join("value.json"),
        &vf.to_snapshot(&fingerprint, cfg.seeds.master),
    )?;
    let report_json = serde_json::json!({
        "schema_version": 1,
        "fingerprint": fingerprint,
        "master_seed": cfg.seeds.master,
        "iterations": report.iterations,
        "residuals": report.residuals,
        "converged": report.converged,
    });
    write_json(&dir.join("solve_report.json"), &report_json)?;
    println!(
        "converged: {} (residuals {:?})",
        report.iterations, report.residuals
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, value_path: &Path, n_paths: usize) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let fingerprint = cfg.fingerprint();
    let text = std::fs::read_to_string(value_path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", value_path.display())))?;
    let snapshot: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("value snapshot: {e}")))?;
    let (vf, vf_fingerprint, _) = ValueFunction::from_snapshot(&snapshot)
        .map_err(|e| Failure::Usage(format!("value snapshot: {e}")))?;
    if vf_fingerprint != fingerprint {
        return Err(Failure::Usage(format!(
            "fingerprint mismatch: value {vf_fingerprint} vs config {fingerprint}"
        )));
    }
    let model = cfg
        .build_model()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let jumps = cfg.jump_model(&model.basis);
    let integrator = cfg.integrator();
    let k_op = ControlOperator {
        exponent: cfg.hjb.alpha_tilde1,
    };
    let x = {
        // probe state: energy in the first shell
        let mut coeffs = vec![0.0; model.basis.len()];
        let pattern = [0.5, -0.35, 0.4, 0.25];
        for (j, c) in coeffs.iter_mut().enumerate().take(4.min(model.basis.len())) {
            *c = pattern[j];
        }
        model.basis.field_from(coeffs)
    };
    let feedback_law = FeedbackLaw {
        vf: &vf,
        basis: &model.basis,
        k_op,
        radius: cfg.hjb.radius,
        horizon: cfg.integrator.horizon,
    };
    let random_law = RandomAdmissible {
        radius: cfg.hjb.radius,
        hold: 0.05,
        master: cfg.seeds.master ^ 0xbad,
    };
    let policies: Vec<(&str, &dyn ControlLaw)> = vec![
        ("zero", &ZeroControl),
        ("random", &random_law),
        ("feedback", &feedback_law),
    ];

    let value_at_probe = vf.value(cfg.integrator.horizon, &x);
    let mut rows = Vec::new();
    for (name, law) in &policies {
        let cost = evaluate_cost(
            &model,
            &jumps,
            integrator,
            *law,
            cfg.hjb.radius,
            cfg.hjb.alpha_tilde1,
            &x,
            n_paths,
            cfg.seeds.master,
        )
        .map_err(|e| Failure::Numerical(format!("cost of `{name}`: {e}")))?;
        let identity = verify_identity(
            &model,
            &jumps,
            integrator,
            *law,
            &vf,
            cfg.hjb.radius,
            k_op,
            &x,
            n_paths,
            cfg.seeds.master,
        )
        .map_err(|e| Failure::Numerical(format!("identity for `{name}`: {e}")))?;
        let tol = (3.0 * identity.stderr).max(0.05 * identity.lhs.abs());
        rows.push(serde_json::json!({
            "policy": name,
            "cost": cost.value,
            "cost_stderr": cost.stderr,
            "identity_lhs": identity.lhs,
            "identity_rhs": identity.rhs,
            "identity_residual": identity.residual,
            "identity_tolerance": tol,
            "identity_status": if identity.residual.abs() <= tol { "PASS" } else { "FAIL" },
        }));
    }
    // paired comparison on common noise: same path ids share substreams
    let paired: Vec<f64> = {
        let cost_along = |law: &dyn ControlLaw, path: u64| -> Result<f64, Failure> {
            let mut plan = SimulationPlan::new(&model, &jumps, integrator, cfg.seeds.master);
            plan.control = law;
            plan.clip_radius = cfg.hjb.radius;
            plan.k_exponent = cfg.hjb.alpha_tilde1;
            simulate_path(&plan, &x, path, None)
                .map(|b| b.running_cost + b.terminal.norm_sq())
                .map_err(|e| Failure::Numerical(e.to_string()))
        };
        (0..n_paths as u64)
            .into_par_iter()
            .map(|path| {
                Ok(cost_along(&ZeroControl, path)? - cost_along(&feedback_law, path)?)
            })
            .collect::<Result<Vec<f64>, Failure>>()?
    };
    let (saving, saving_se) = mean_stderr(&paired);
    let benefit_significant = saving - 1.645 * saving_se > 0.0;

    let dpp = dpp_consistency(
        &model,
        &jumps,
        cfg.integrator.dt,
        &feedback_law,
        &vf,
        cfg.hjb.radius,
        cfg.hjb.alpha_tilde1,
        &x,
        0.0,
        cfg.integrator.horizon / 2.0,
        cfg.integrator.horizon,
        n_paths,
        cfg.seeds.master,
    )
    .map_err(|e| Failure::Numerical(format!("dpp: {e}")))?;
    let dpp_tol = (3.0 * dpp.stderr).max(0.05 * dpp.value.abs());

    let evaluation = serde_json::json!({
        "schema_version": 1,
        "fingerprint": fingerprint,
        "master_seed": cfg.seeds.master,
        "n_paths": n_paths,
        "value_at_probe": value_at_probe,
        "policies": rows,
        "benefit": {
            "zero_minus_feedback": saving,
            "stderr": saving_se,
            "significant_at_95": benefit_significant,
        },
        "dpp": {
            "residual": dpp.residual,
            "stderr": dpp.stderr,
            "tolerance": dpp_tol,
            "status": if dpp.residual.abs() <= dpp_tol { "PASS" } else { "FAIL" },
        },
    });
    write_json(&dir.join("evaluation.json"), &evaluation)?;

    let mut csv = format!("# fingerprint={fingerprint} seed={}\n", cfg.seeds.master);
    csv.push_str("policy,cost,cost_stderr,identity_residual,identity_tolerance,identity_status\n");
    for row in evaluation["policies"].as_array().unwrap() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row["policy"].as_str().unwrap(),
            row["cost"],
            row["cost_stderr"],
            row["identity_residual"],
            row["identity_tolerance"],
            row["identity_status"].as_str().unwrap(),
        ));
    }
    write_text(&dir.join("cost_table.csv"), &csv)?;

    println!("value at probe state: {value_at_probe:.6}");
    for row in evaluation["policies"].as_array().unwrap() {
        println!(
            "  {:<9} cost {:.6} +- {:.6}   identity residual {:+.6} [{}]",
            row["policy"].as_str().unwrap(),
            row["cost"].as_f64().unwrap(),
            row["cost_stderr"].as_f64().unwrap(),
            row["identity_residual"].as_f64().unwrap(),
            row["identity_status"].as_str().unwrap(),
        );
    }
    println!(
        "  feedback saving vs zero on common seeds: {saving:+.6} +- {saving_se:.6} [{}]",
        if benefit_significant { "significant at 95%" } else { "not significant" }
    );
    println!(
        "  dpp residual {:+.6} (tol {:.6}) [{}]",
        dpp.residual,
        dpp_tol,
        evaluation["dpp"]["status"].as_str().unwrap()
    );
    let any_fail = evaluation["policies"]
        .as_array()
        .unwrap()
        .iter()
        .any(|r| r["identity_status"] == "FAIL")
        || evaluation["dpp"]["status"] == "FAIL";
    if any_fail {
        return Err(Failure::Validation("identity or dpp check failed".into()));
    }
    Ok(())
}

fn cmd_validate(cli: &Cli, level: LevelArg) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let report = run_battery(
        &cfg,
        match level {
            LevelArg::Fast => Level::Fast,
            LevelArg::Full => Level::Full,
        },
    );
    let json = serde_json::to_value(&report)
        .map_err(|e| Failure::Numerical(format!("serialize report: {e}")))?;
    write_json(&dir.join("report.json"), &json)?;
    print!("{}", report.table());
    let _ = std::io::stdout().flush();
    if report.all_passed() {
        println!("all checks passed ({} records)", report.checks.len());
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Validation(format!(
            "failing checks: {}",
            failing.join(", ")
        )))
    }
}

fn cmd_report(cli: &Cli, input: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", input.display())))?;
    let report: levyhjb::report::RunReport = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("report JSON: {e}")))?;
    print!("{}", report.table());
    let dir = match &cli.out {
        Some(d) => {
            std::fs::create_dir_all(d)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", d.display())))?;
            d.clone()
        }
        None => PathBuf::from("."),
    };
    let mut csv = format!(
        "# fingerprint={} seed={}\n",
        report.fingerprint, report.master_seed
    );
    csv.push_str("check,status,measured,tolerance,stderr,runtime_s\n");
    for c in &report.checks {
        csv.push_str(&format!(
            "{},{:?},{},{},{},{}\n",
            c.name,
            c.status,
            c.measured,
            c.tolerance.map(|t| t.to_string()).unwrap_or_default(),
            c.stderr.map(|s| s.to_string()).unwrap_or_default(),
            c.runtime_s
        ));
    }
    write_text(&dir.join("checks.csv"), &csv)?;
    let stub = "# gnuplot stub for the check table\n\
                set datafile separator ','\n\
                set style data histograms\n\
                set style fill solid 0.6\n\
                set logscale y\n\
                set xtics rotate by -45\n\
                plot 'checks.csv' every ::1 using 3:xtic(1) title 'measured', \\\n\
                     '' every ::1 using 4 title 'tolerance'\n";
    write_text(&dir.join("plot.gp"), stub)?;
    println!("wrote checks.csv and plot.gp to {}", dir.display());
    Ok(())
}
