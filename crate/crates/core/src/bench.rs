//! AFTI-16 iteration-count benchmark: every solver configuration runs the
//! same reference-driven closed loop and is stopped by the relative oracle
//! rule.

use std::fmt::Write as _;
use std::thread;

use crate::error::{Error, Result};
use crate::mpc::{
    self, ClosedLoopRun, CurvatureChoice, Formulation, MetricChoice, MpcController, MpcInstance,
    ReferenceSample, Scenario, SolverConfig, StopMode,
};

/// Iteration cap for the scalar-metric rows.
pub const SCALAR_CAP: usize = 1_000_000;
/// Iteration cap for every other row.
pub const DEFAULT_CAP: usize = 100_000;

#[derive(Debug, Clone)]
pub struct BenchRowSpec {
    pub name: &'static str,
    pub params: &'static str,
    pub config: SolverConfig,
}

/// Rows in table order.
pub fn afti16_rows(warm_start: bool) -> Vec<BenchRowSpec> {
    use CurvatureChoice::{InverseH, Kkt};
    use Formulation::{EqDual, IneqDual};
    use MetricChoice::{Scalar, Selected};
    let cap = |mut c: SolverConfig, scalar: bool| {
        c.max_iter = if scalar { SCALAR_CAP } else { DEFAULT_CAP };
        c.warm_start = warm_start;
        c.stop = StopMode::Oracle(0.005);
        c
    };
    vec![
        BenchRowSpec {
            name: "fdgm eq-dual",
            params: "L_lambda = A H^-1 A'",
            config: cap(SolverConfig::fdgm(EqDual, Selected, InverseH), false),
        },
        BenchRowSpec {
            name: "fdgm eq-dual scalar",
            params: "L_lambda = ||A H^-1 A'|| I",
            config: cap(SolverConfig::fdgm(EqDual, Scalar, InverseH), true),
        },
        BenchRowSpec {
            name: "fdgm ineq-dual",
            params: "L_mu diagonal, P = K11",
            config: cap(SolverConfig::fdgm(IneqDual, Selected, Kkt), false),
        },
        BenchRowSpec {
            name: "fdgm ineq-dual",
            params: "L_mu diagonal, P = H^-1",
            config: cap(SolverConfig::fdgm(IneqDual, Selected, InverseH), false),
        },
        BenchRowSpec {
            name: "fdgm ineq-dual scalar",
            params: "L_mu = ||B K11 B'|| I",
            config: cap(SolverConfig::fdgm(IneqDual, Scalar, Kkt), true),
        },
        BenchRowSpec {
            name: "fdgm ineq-dual scalar",
            params: "L_mu = ||B H^-1 B'|| I",
            config: cap(SolverConfig::fdgm(IneqDual, Scalar, InverseH), true),
        },
        BenchRowSpec {
            name: "admm",
            params: "rho = 0.3",
            config: cap(SolverConfig::admm(0.3), false),
        },
        BenchRowSpec {
            name: "admm",
            params: "rho = 3",
            config: cap(SolverConfig::admm(3.0), false),
        },
        BenchRowSpec {
            name: "admm",
            params: "rho = 30",
            config: cap(SolverConfig::admm(30.0), false),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub params: String,
    pub avg_iter: f64,
    pub max_iter: usize,
    pub avg_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
    /// Samples that hit the iteration cap.
    pub capped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
    pub samples: usize,
    pub warm_start: bool,
}

impl BenchmarkReport {
    /// Row by name and parameter summary.
    pub fn row(&self, name: &str, params: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name && r.params == params)
    }

    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.capped == 0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,parameters,avg_iter,max_iter,avg_ms,max_ms,samples,capped\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},\"{}\",{:.1},{},{:.4},{:.4},{},{}",
                r.name, r.params, r.avg_iter, r.max_iter, r.avg_ms, r.max_ms, r.samples, r.capped
            );
        }
        s
    }

    pub fn to_console(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "AFTI-16, {} samples, {} start, oracle tolerance 0.5%",
            self.samples,
            if self.warm_start { "warm" } else { "cold" }
        );
        let _ = writeln!(
            s,
            "{:<24} {:<28} {:>10} {:>10} {:>10} {:>10} {:>7}",
            "algorithm", "parameters", "avg ms", "max ms", "avg iter", "max iter", "capped"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:<28} {:>10.3} {:>10.3} {:>10.1} {:>10} {:>7}",
                r.name, r.params, r.avg_ms, r.max_ms, r.avg_iter, r.max_iter, r.capped
            );
        }
        s
    }
}

fn summarize(spec: &BenchRowSpec, run: &ClosedLoopRun) -> BenchRow {
    let (avg_iter, max_iter) = run.iteration_stats();
    let (avg_s, max_s) = run.time_stats();
    BenchRow {
        name: spec.name.to_string(),
        params: spec.params.to_string(),
        avg_iter,
        max_iter,
        avg_ms: avg_s * 1e3,
        max_ms: max_s * 1e3,
        samples: run.records.len(),
        capped: run.records.iter().filter(|r| !r.converged).count(),
    }
}

pub fn run_row(inst: &MpcInstance, spec: &BenchRowSpec, samples: &[ReferenceSample]) -> Result<BenchRow> {
    let mut ctrl = MpcController::new(inst, spec.config.clone())?;
    let run = mpc::run_on_samples(&mut ctrl, samples, false)?;
    Ok(summarize(spec, &run))
}

/// Run the given rows on a shared reference trajectory, one thread per
/// row.
pub fn run_rows(
    inst: &MpcInstance,
    scenario: &Scenario,
    rows: &[BenchRowSpec],
    warm_start: bool,
) -> Result<BenchmarkReport> {
    let samples = mpc::reference_trajectory(inst, scenario)?;
    let results: Vec<Result<BenchRow>> = thread::scope(|s| {
        let handles: Vec<_> = rows
            .iter()
            .map(|spec| s.spawn(|| run_row(inst, spec, &samples)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Validation("benchmark worker panicked".into())))
            })
            .collect()
    });
    Ok(BenchmarkReport {
        rows: results.into_iter().collect::<Result<_>>()?,
        samples: samples.len(),
        warm_start,
    })
}

/// The full table on the AFTI-16 instance.
pub fn bench_afti16(scenario: &Scenario, warm_start: bool) -> Result<BenchmarkReport> {
    run_rows(&mpc::afti16_model(), scenario, &afti16_rows(warm_start), warm_start)
}
