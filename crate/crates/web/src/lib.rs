//! Browser demo. Every export returns a JSON string for the page script.
//!
//! The closed-loop demo drives [`MpcController::solve`] directly because
//! `std::time::Instant` is unavailable on `wasm32-unknown-unknown`.

use fastdual::curvature::{self, CurvatureMatrix};
use fastdual::metric::{self, Metric, SelectOptions, StructurePattern};
use fastdual::mpc::{self, CurvatureChoice, Formulation, MetricChoice, MpcController, Scenario, Segment, SolverConfig};
use fastdual::numkern::SymMatrix;
use fastdual::problem::{ComposedProblem, GKind, GTerm, HTerm, QuadCost};
use fastdual::qp;
use fastdual::solver::{self, RunOptions, StopRule};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Two variables, two box rows: `H = [1 c; c κ]`, `B = [1 β; 0 1]`.
pub fn toy_problem(kappa: f64, coupling: f64, skew: f64) -> fastdual::Result<ComposedProblem> {
    let h = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, coupling, coupling, kappa]))?;
    let cost = QuadCost::new(h, DVector::from_vec(vec![-1.0, 2.0]))?;
    let g = GTerm {
        b: DMatrix::from_row_slice(2, 2, &[1.0, skew, 0.0, 1.0]),
        kind: GKind::Box {
            lo: DVector::from_vec(vec![-0.3, -0.2]),
            hi: DVector::from_vec(vec![0.3, 0.2]),
        },
    };
    ComposedProblem::new(cost, HTerm::Zero, None, g)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn metrics(cm: &CurvatureMatrix) -> fastdual::Result<Vec<(&'static str, Metric)>> {
    let opts = SelectOptions::default();
    Ok(vec![
        ("scalar", metric::scalar_metric(cm)?),
        ("diagonal", metric::select_metric(cm, &StructurePattern::Diagonal, &opts)?),
        ("full", metric::select_metric(cm, &StructurePattern::Full, &opts)?),
    ])
}

/// Dual curvature of the toy problem and the three metrics chosen for it.
pub fn metric_report(kappa: f64, coupling: f64, skew: f64) -> fastdual::Result<Value> {
    let p = toy_problem(kappa, coupling, skew)?;
    let cm = curvature::curvature_general(&p)?;
    let list: Vec<Value> = metrics(&cm)?
        .into_iter()
        .map(|(name, m)| {
            json!({
                "name": name,
                "L": rows(m.l.matrix()),
                "ratio": m.achieved_ratio,
                "margin": m.certificate_margin,
            })
        })
        .collect();
    Ok(json!({ "cpc": rows(cm.value.matrix()), "metrics": list }))
}

/// Dual suboptimality `D⋆ − D(νᵏ)` per metric over a fixed budget.
pub fn convergence_report(kappa: f64, coupling: f64, skew: f64, iterations: usize) -> fastdual::Result<Value> {
    let p = toy_problem(kappa, coupling, skew)?;
    let d_star = qp::reference_solution(&p)?.objective;
    let cm = curvature::curvature_general(&p)?;
    let opts = RunOptions {
        max_iter: iterations.clamp(1, 5000),
        stop: StopRule::Exhaust,
        record_log: true,
        record_dual: true,
        reference: None,
    };
    let mut traces = Vec::new();
    for (name, m) in metrics(&cm)? {
        let out = solver::fdgm_run(&p, &m, None, &opts, false)?;
        let gap: Vec<f64> = out
            .log
            .dual_trace()
            .into_iter()
            .map(|(_, d)| (d_star - d).max(1e-16))
            .collect();
        traces.push(json!({ "name": name, "ratio": m.achieved_ratio, "gap": gap }));
    }
    Ok(json!({ "d_star": d_star, "traces": traces }))
}

/// Pitch step on AFTI-16 with the reference solver closing the loop; the
/// chosen method is run on every sample and its iteration count reported.
pub fn afti16_report(pitch: f64, samples: usize, method: &str) -> fastdual::Result<Value> {
    let inst = mpc::afti16_model();
    let half = samples.clamp(2, 80) / 2;
    let scenario = Scenario {
        x0: vec![0.0; 4],
        segments: vec![
            Segment { samples: half, y_ref: vec![0.0, pitch] },
            Segment { samples: half, y_ref: vec![0.0, 0.0] },
        ],
    };
    let config = match method {
        "admm" => SolverConfig::admm(3.0),
        "ineq-dual" => SolverConfig::fdgm(Formulation::IneqDual, MetricChoice::Selected, CurvatureChoice::Kkt),
        _ => SolverConfig::fdgm(Formulation::EqDual, MetricChoice::Selected, CurvatureChoice::InverseH),
    };
    let label = config.label();
    let trajectory = mpc::reference_trajectory(&inst, &scenario)?;
    let mut ctrl = MpcController::new(&inst, config)?;
    let lay = inst.layout();
    let (mut y1, mut y2, mut u1, mut u2, mut iters) = (vec![], vec![], vec![], vec![], vec![]);
    for s in &trajectory {
        let out = ctrl.solve(&s.x_bar, &s.y_ref, Some(&s.y_star))?;
        let y = inst.plant.output(&s.x_bar);
        y1.push(y[0]);
        y2.push(y[1]);
        u1.push(s.y_star[lay.u(0)]);
        u2.push(s.y_star[lay.u(0) + 1]);
        iters.push(if out.converged { out.iterations as i64 } else { -1 });
    }
    Ok(json!({ "label": label, "y1": y1, "y2": y2, "u1": u1, "u2": u2, "iterations": iters }))
}

fn to_js(r: fastdual::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn metric_demo(kappa: f64, coupling: f64, skew: f64) -> Result<String, JsError> {
    to_js(metric_report(kappa, coupling, skew))
}

#[wasm_bindgen]
pub fn convergence_demo(kappa: f64, coupling: f64, skew: f64, iterations: usize) -> Result<String, JsError> {
    to_js(convergence_report(kappa, coupling, skew, iterations))
}

#[wasm_bindgen]
pub fn afti16_demo(pitch: f64, samples: usize, method: &str) -> Result<String, JsError> {
    to_js(afti16_report(pitch, samples, method))
}
