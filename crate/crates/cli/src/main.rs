//! `fastdual` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a solver fails or stops at its cap,
//! 2 for bad input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastdual::bench;
use fastdual::curvature::{self, CurvatureMatrix};
use fastdual::error::Error;
use fastdual::metric::{self, Metric, SelectOptions, StructurePattern};
use fastdual::mpc::{self, CurvatureChoice, Formulation, MetricChoice, Scenario, SolverConfig, StopMode};
use fastdual::problem::{self, ComposedProblem};
use fastdual::solver::{self, RunOptions, StopRule, Tolerances};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "fastdual", version, about = "Fast dual gradient methods with selected metrics")]
struct Cli {
    /// Seed for scenario perturbations (initial state jitter).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Tabular output: CSV files under --out-dir, or a table on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Console)]
    format: Format,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Console,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select a metric for a problem file and write it as JSON.
    Precondition(PreconditionArgs),
    /// Solve a problem file.
    Solve(SolveArgs),
    /// Closed-loop simulation of the AFTI-16 controller.
    MpcSim(SimArgs),
    /// Iteration-count table on AFTI-16.
    #[command(name = "bench-afti16")]
    BenchAfti16(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PatternArg {
    Diagonal,
    Full,
    /// Dense block on the equality duals, diagonal on the rest.
    DualSplit,
    /// `‖CPCᵀ‖ I`.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CurvatureArg {
    /// K11 for an equality-indicator h, H⁻¹ otherwise.
    Auto,
    InverseH,
    Projected,
    Kkt,
}

#[derive(Debug, Args)]
struct PreconditionArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t = PatternArg::DualSplit)]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value_t = CurvatureArg::Auto)]
    curvature: CurvatureArg,
    /// Output file name, relative to --out-dir.
    #[arg(long, default_value = "metric.json")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algorithm {
    Fdgm,
    Fgm,
    Admm,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    /// Metric file from `precondition`; selected on the fly when absent.
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Algorithm::Fdgm)]
    algorithm: Algorithm,
    /// ADMM penalty.
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol_eq: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol_ineq: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol_fp: f64,
    /// Run with a metric that does not dominate the curvature.
    #[arg(long)]
    allow_uncertified: bool,
    /// Output file name, relative to --out-dir.
    #[arg(long, default_value = "result.csv")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormulationArg {
    EqDual,
    IneqDual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fdgm,
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Selected,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MpcCurvatureArg {
    InverseH,
    Kkt,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Scenario file (JSON); the built-in pitch maneuver when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormulationArg::EqDual)]
    formulation: FormulationArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Fdgm)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Selected)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = MpcCurvatureArg::InverseH)]
    curvature: MpcCurvatureArg,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long)]
    warm_start: bool,
    #[arg(long, default_value_t = bench::DEFAULT_CAP)]
    max_iter: usize,
    /// Relative accuracy of the oracle stopping rule.
    #[arg(long, default_value_t = 0.005)]
    oracle_tol: f64,
    /// Also write the condensed problem at the initial state.
    #[arg(long)]
    export_problem: Option<PathBuf>,
    /// Output file name, relative to --out-dir.
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    warm_start: bool,
    /// Output file name, relative to --out-dir.
    #[arg(long, default_value = "afti16_table.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Context chain, skipping sources already quoted by their wrapper.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

/// 1 for solver trouble, 2 for anything the user can fix in the input.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::CapReached { .. }
            | Error::SdpNonConvergence { .. }
            | Error::EigenNonConvergence { .. }
            | Error::KktResidual { .. }
            | Error::Infeasible(_)
            | Error::Reference(_),
        ) => 1,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.cmd {
        Command::Precondition(a) => precondition(cli, a),
        Command::Solve(a) => solve(cli, a),
        Command::MpcSim(a) => mpc_sim(cli, a),
        Command::BenchAfti16(a) => bench_afti16(cli, a),
    }
}

fn load_problem(path: &Path) -> Result<ComposedProblem> {
    let p = problem::load_problem(path).with_context(|| format!("reading {}", path.display()))?;
    let report = problem::validate(&p)?;
    if !report.is_valid() {
        return Err(Error::Validation(report.diagnostics.join("; ")).into());
    }
    Ok(p)
}

fn curvature_for(p: &ComposedProblem, c: CurvatureArg) -> Result<CurvatureMatrix> {
    Ok(match c {
        CurvatureArg::Auto => curvature::applicable_curvature(p)?,
        CurvatureArg::InverseH => curvature::curvature_general(p)?,
        CurvatureArg::Projected => curvature::curvature_projected(p)?,
        CurvatureArg::Kkt => curvature::curvature_kkt(p)?,
    })
}

fn choose_metric(p: &ComposedProblem, cm: &CurvatureMatrix, pattern: PatternArg) -> Result<Metric> {
    let structure = match pattern {
        PatternArg::Scalar => return Ok(metric::scalar_metric(cm)?),
        PatternArg::Diagonal => StructurePattern::Diagonal,
        PatternArg::Full => StructurePattern::Full,
        PatternArg::DualSplit => StructurePattern::dual_split(p.m(), p.p()),
    };
    Ok(metric::select_metric(cm, &structure, &SelectOptions::default())?)
}

fn write_out(cli: &Cli, name: &Path, text: &str) -> Result<PathBuf> {
    let path = cli.out_dir.join(name);
    fs::write(&path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn precondition(cli: &Cli, a: &PreconditionArgs) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let cm = curvature_for(&p, a.curvature)?;
    let m = choose_metric(&p, &cm, a.pattern)?;
    let path = write_out(cli, &a.out, &metric::metric_to_json(&m))?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    let scalar = metric::scalar_metric(&cm)?;
    match cli.format {
        Format::Console => {
            println!("pattern            {}", m.pattern.label());
            println!("curvature          {}", cm.source.label());
            println!("case               {:?}", m.case);
            println!("achieved ratio     {:.6e}", m.achieved_ratio);
            println!("scalar ratio       {:.6e}", scalar.achieved_ratio);
            println!("certificate margin {:.3e}", m.certificate_margin);
            println!("wrote {}", path.display());
        }
        Format::Csv => println!("{}", path.display()),
    }
    Ok(())
}

fn solve(cli: &Cli, a: &SolveArgs) -> Result<()> {
    let p = load_problem(&a.problem)?;
    let opts = RunOptions {
        max_iter: a.max_iter,
        stop: StopRule::Library(Tolerances {
            eq: a.tol_eq,
            ineq: a.tol_ineq,
            fp: a.tol_fp,
        }),
        record_log: true,
        record_dual: true,
        reference: None,
    };
    let (out, extra) = match a.algorithm {
        Algorithm::Admm => {
            let out = solver::admm_run(&p, a.rho, &opts)?;
            (out, vec![("rho", format!("{}", a.rho))])
        }
        Algorithm::Fdgm | Algorithm::Fgm => {
            let m = match &a.metric {
                Some(path) => metric::load_metric(path, Some(&curvature::applicable_curvature(&p)?))
                    .with_context(|| format!("reading {}", path.display()))?,
                None => choose_metric(&p, &curvature::applicable_curvature(&p)?, PatternArg::DualSplit)?,
            };
            let out = if a.algorithm == Algorithm::Fdgm {
                solver::fdgm_run(&p, &m, None, &opts, a.allow_uncertified)?
            } else {
                solver::fgm_dual_run(&p, &m, &opts, a.allow_uncertified)?
            };
            let extra = vec![
                ("metric_pattern", m.pattern.label()),
                ("metric_ratio", format!("{:e}", m.achieved_ratio)),
            ];
            (out, extra)
        }
    };
    let csv = solver::result_csv(&out, &extra);
    match cli.format {
        Format::Csv => println!("{}", write_out(cli, &a.out, &csv)?.display()),
        Format::Console => {
            println!("algorithm      {}", out.algorithm);
            for (k, v) in &extra {
                println!("{k:<14} {v}");
            }
            println!("converged      {}", out.converged);
            println!("iterations     {}", out.iterations);
            println!("eq residual    {:.3e}", out.eq_res);
            println!("ineq residual  {:.3e}", out.ineq_res);
            println!("objective      {:.10e}", p.primal_objective(&out.y, 1e-6));
            let y: Vec<String> = out.y.iter().map(|v| format!("{v:.6}")).collect();
            println!("y              [{}]", y.join(", "));
        }
    }
    out.require_converged()?;
    Ok(())
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        Some(p) => Ok(mpc::load_scenario(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(Scenario::afti16_default()),
    }
}

/// Jitter the initial state by up to ±0.01 per component.
fn perturb(mut s: Scenario, seed: Option<u64>) -> Scenario {
    if let Some(seed) = seed {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut s.x0 {
            *v += r.random_range(-0.01..=0.01);
        }
    }
    s
}

fn mpc_sim(cli: &Cli, a: &SimArgs) -> Result<()> {
    let inst = mpc::afti16_model();
    let scenario = perturb(load_scenario(a.scenario.as_deref())?, cli.seed);
    scenario.check(&inst)?;
    let formulation = match a.formulation {
        FormulationArg::EqDual => Formulation::EqDual,
        FormulationArg::IneqDual => Formulation::IneqDual,
    };
    let mut config = match a.method {
        MethodArg::Admm => {
            if formulation != Formulation::IneqDual {
                return Err(Error::Validation("admm needs --formulation ineq-dual".into()).into());
            }
            SolverConfig::admm(a.rho)
        }
        MethodArg::Fdgm => SolverConfig::fdgm(
            formulation,
            match a.metric {
                MetricArg::Selected => MetricChoice::Selected,
                MetricArg::Scalar => MetricChoice::Scalar,
            },
            match a.curvature {
                MpcCurvatureArg::InverseH => CurvatureChoice::InverseH,
                MpcCurvatureArg::Kkt => CurvatureChoice::Kkt,
            },
        ),
    };
    config.warm_start = a.warm_start;
    config.max_iter = a.max_iter;
    config.stop = StopMode::Oracle(a.oracle_tol);

    if let Some(path) = &a.export_problem {
        let mut p = inst.condense(formulation)?;
        let x0 = nalgebra::DVector::from_vec(scenario.x0.clone());
        let y_r = scenario.references().first().cloned().unwrap_or_else(|| inst.y_ref.clone());
        mpc::update_online(&inst, &mut p, &x0, &y_r)?;
        let target = cli.out_dir.join(path);
        problem::save_problem(&p, &target).with_context(|| format!("writing {}", target.display()))?;
    }

    let run = mpc::closed_loop_run(&inst, config, &scenario)?;
    match cli.format {
        Format::Csv => println!("{}", write_out(cli, &a.out, &run.to_csv())?.display()),
        Format::Console => {
            let (avg, max) = run.iteration_stats();
            println!("{}", run.label);
            println!("{:>4} {:>10} {:>10} {:>10} {:>10} {:>10}", "t", "y1", "y2", "u1", "u2", "iter");
            for r in &run.records {
                println!(
                    "{:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                    r.t, r.y[0], r.y[1], r.u[0], r.u[1], r.iterations
                );
            }
            println!("samples {}, avg iterations {avg:.1}, max {max}", run.records.len());
        }
    }
    run.require_complete()?;
    Ok(())
}

fn bench_afti16(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let scenario = perturb(load_scenario(a.scenario.as_deref())?, cli.seed);
    let report = bench::bench_afti16(&scenario, a.warm_start)?;
    match cli.format {
        Format::Csv => println!("{}", write_out(cli, &a.out, &report.to_csv())?.display()),
        Format::Console => print!("{}", report.to_console()),
    }
    if let Some(r) = report.rows.iter().find(|r| r.capped > 0) {
        return Err(Error::CapReached { iterations: r.max_iter })
            .with_context(|| format!("{} ({}) hit its cap on {} samples", r.name, r.params, r.capped));
    }
    Ok(())
}
