mod common;

use fastdual::mpc::{
    self, CurvatureChoice, Formulation, MetricChoice, MpcController, MpcInstance, MpcWeights, Plant,
    Scenario, Segment, SoftBound, SolverConfig, StopMode,
};
use fastdual::numkern::SymMatrix;
use fastdual::problem::{self, CurvaturePath};
use fastdual::qp;
use fastdual::solver::Tolerances;
use nalgebra::{dmatrix, dvector, DVector};
use proptest::prelude::*;
use rand::Rng;

/// A trajectory of the plant under random inputs, stacked in layout order,
/// with random nonnegative slacks.
fn random_trajectory(inst: &MpcInstance, r: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
    let lay = inst.layout();
    let mut y = DVector::zeros(lay.n());
    let mut x = inst.x0.clone();
    y.rows_mut(lay.x(0), lay.nx).copy_from(&x);
    for t in 0..inst.horizon {
        let u = common::rand_vec(r, lay.nu);
        x = inst.plant.step(&x, &u);
        y.rows_mut(lay.u(t), lay.nu).copy_from(&u);
        y.rows_mut(lay.x(t + 1), lay.nx).copy_from(&x);
        for k in 0..lay.slacks_per_stage {
            y[lay.s(t + 1) + k] = r.random_range(0.0..1.0);
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn condensation_is_consistent(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let inst = common::mpc_instance(&mut r);
        let y = random_trajectory(&inst, &mut r);
        let dyn_eq = inst.dynamics();
        prop_assert_eq!(&dyn_eq.b, &inst.rhs(&inst.x0));
        let res = (&dyn_eq.a * &y - &dyn_eq.b).amax();
        prop_assert!(res <= 1e-13 * (1.0 + y.amax()), "res {res:e}");

        let y_r = inst.y_ref.clone();
        let h = inst.stacked_hessian();
        let stacked = 0.5 * h.quad(&y) + inst.linear_term(&y_r).unwrap().dot(&y) + inst.cost_constant(&y_r).unwrap();
        let stages = inst.stage_cost_sum(&y, &y_r).unwrap();
        prop_assert!((stacked - stages).abs() <= 1e-12 * (1.0 + stages.abs()), "{stacked} vs {stages}");

        for f in [Formulation::EqDual, Formulation::IneqDual] {
            let p = inst.condense(f).unwrap();
            prop_assert_eq!(p.cost.h.matrix(), h.matrix());
        }
    }
}

#[test]
fn formulations_agree_on_the_optimum() {
    let mut r = common::rng(51);
    for i in 0..30 {
        let inst = if i % 2 == 0 {
            common::mpc_instance(&mut r)
        } else {
            common::hard_mpc_instance(&mut r)
        };
        let a = qp::reference_solution(&inst.condense(Formulation::EqDual).unwrap()).unwrap();
        let b = qp::reference_solution(&inst.condense(Formulation::IneqDual).unwrap()).unwrap();
        let diff = (&a.y - &b.y).amax() / (1.0 + b.y.amax());
        assert!(diff <= 1e-6, "instance {i}: {diff:e}");
    }
}

#[test]
fn solvers_agree_across_formulations() {
    let mut r = common::rng(52);
    let tight = StopMode::Library(Tolerances {
        eq: 1e-10,
        ineq: 1e-10,
        fp: 1e-12,
    });
    for _ in 0..6 {
        let inst = common::mpc_instance(&mut r);
        let mut ys = Vec::new();
        for f in [Formulation::EqDual, Formulation::IneqDual] {
            let curv = if f == Formulation::EqDual { CurvatureChoice::InverseH } else { CurvatureChoice::Kkt };
            let mut cfg = SolverConfig::fdgm(f, MetricChoice::Selected, curv);
            cfg.stop = tight.clone();
            cfg.max_iter = 200_000;
            let mut ctrl = MpcController::new(&inst, cfg).unwrap();
            let out = ctrl.solve(&inst.x0, &inst.y_ref, None).unwrap().require_converged().unwrap();
            ys.push(out.y);
        }
        let diff = (&ys[0] - &ys[1]).amax() / (1.0 + ys[1].amax());
        assert!(diff <= 1e-6, "{diff:e}");
    }
}

#[test]
fn online_samples_reuse_offline_factorizations() {
    let inst = mpc::afti16_model();
    let scenario = Scenario {
        x0: vec![0.0; 4],
        segments: vec![Segment {
            samples: 6,
            y_ref: vec![0.0, 10.0],
        }],
    };
    let samples = mpc::reference_trajectory(&inst, &scenario).unwrap();
    let configs = [
        SolverConfig::fdgm(Formulation::EqDual, MetricChoice::Selected, CurvatureChoice::InverseH),
        SolverConfig::fdgm(Formulation::IneqDual, MetricChoice::Selected, CurvatureChoice::Kkt),
        SolverConfig::admm(3.0),
    ];
    for cfg in configs {
        let mut ctrl = MpcController::new(&inst, cfg).unwrap();
        let before = ctrl.factorizations();
        assert_eq!(before, 1);
        let run = mpc::run_on_samples(&mut ctrl, &samples, true).unwrap();
        assert_eq!(run.records.len(), samples.len());
        assert_eq!(ctrl.factorizations(), before, "{}", run.label);
    }
}

#[test]
fn singular_state_weight_is_accepted_on_kkt_path() {
    let plant = Plant::new(
        dmatrix![1.0, 0.1; 0.0, 1.0],
        dmatrix![0.0; 0.1],
        dmatrix![1.0, 0.0],
    )
    .unwrap();
    let q = SymMatrix::from_diagonal(&dvector![1.0, 0.0]);
    let inst = MpcInstance {
        weights: MpcWeights {
            q_f: q.clone(),
            q,
            r: SymMatrix::from_diagonal(&dvector![0.1]),
            s: dvector![10.0, 10.0],
        },
        plant,
        horizon: 5,
        u_lo: dvector![-1.0],
        u_hi: dvector![1.0],
        x_lo: DVector::from_element(2, f64::NEG_INFINITY),
        x_hi: DVector::from_element(2, f64::INFINITY),
        y_soft: vec![SoftBound {
            lower: -0.2,
            upper: 0.2,
        }],
        x0: dvector![0.5, 0.0],
        y_ref: dvector![0.0],
    };
    let p = inst.condense(Formulation::IneqDual).unwrap();
    let rep = problem::validate(&p).unwrap();
    assert!(!rep.h_positive_definite);
    assert!(rep.has_path(CurvaturePath::Kkt));
    let mut cfg = SolverConfig::fdgm(Formulation::IneqDual, MetricChoice::Selected, CurvatureChoice::Kkt);
    cfg.stop = StopMode::Library(Tolerances::default());
    let mut ctrl = MpcController::new(&inst, cfg).unwrap();
    let out = ctrl.solve(&inst.x0, &inst.y_ref, None).unwrap();
    assert!(out.converged);
    let reference = qp::reference_solution(&p).unwrap();
    assert!((&out.y - &reference.y).amax() < 1e-4);
}

#[test]
fn afti16_pitch_maneuver_respects_soft_bound() {
    let inst = mpc::afti16_model();
    let samples = mpc::reference_trajectory(&inst, &Scenario::afti16_default()).unwrap();
    let lay = inst.layout();
    let mut peak: f64 = 0.0;
    for s in &samples {
        let y1 = inst.plant.output(&s.x_bar)[0];
        peak = peak.max(y1.abs());
        // Predicted attack angle stays inside the band up to its slack.
        for t in 1..=inst.horizon {
            let x = s.y_star.rows(lay.x(t), lay.nx).into_owned();
            let slack = s.y_star.rows(lay.s(t), lay.slacks_per_stage).max();
            assert!(inst.plant.output(&x)[0].abs() <= 0.5 + slack + 1e-6);
        }
    }
    // Soft, so the realized output may sit slightly outside; 1% of the band.
    assert!(peak <= 0.505, "peak attack angle {peak}");
    let pitch = inst.plant.output(&samples[29].x_bar)[1];
    assert!((pitch - 10.0).abs() < 1.0, "pitch after the first segment {pitch}");
}

fn integrator() -> MpcInstance {
    MpcInstance {
        plant: Plant::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap(),
        weights: MpcWeights {
            q: SymMatrix::identity(1),
            q_f: SymMatrix::identity(1),
            r: SymMatrix::from_diagonal(&dvector![0.1]),
            s: dvector![100.0, 100.0],
        },
        horizon: 5,
        u_lo: dvector![-0.3],
        u_hi: dvector![0.3],
        x_lo: dvector![f64::NEG_INFINITY],
        x_hi: dvector![f64::INFINITY],
        y_soft: vec![SoftBound {
            lower: -0.2,
            upper: 1.2,
        }],
        x0: dvector![0.0],
        y_ref: dvector![0.0],
    }
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/integrator_step.csv");

#[test]
fn integrator_step_matches_golden_file() {
    let scenario = Scenario {
        x0: vec![0.0],
        segments: vec![Segment {
            samples: 15,
            y_ref: vec![1.0],
        }],
    };
    let cfg = SolverConfig::fdgm(Formulation::EqDual, MetricChoice::Selected, CurvatureChoice::InverseH);
    let run = mpc::closed_loop_run(&integrator(), cfg, &scenario).unwrap().require_complete().unwrap();
    let csv = run.to_csv();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(GOLDEN, &csv).unwrap();
    }
    let golden = std::fs::read_to_string(GOLDEN).unwrap();
    let rows = |s: &str| -> Vec<Vec<String>> { s.lines().map(|l| l.split(',').map(String::from).collect()).collect() };
    let (got, want) = (rows(&csv), rows(&golden));
    assert_eq!(got[0], want[0]);
    assert_eq!(got.len(), want.len());
    // t, x1, u1, y1 and slack_max; iteration counts are not pinned.
    for (g, w) in got[1..].iter().zip(&want[1..]) {
        for c in 0..5 {
            let (a, b): (f64, f64) = (g[c].parse().unwrap(), w[c].parse().unwrap());
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
    // Monotone approach to the setpoint without overshoot.
    let xs: Vec<f64> = run.records.iter().map(|r| r.x[0]).collect();
    assert!(xs.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(xs.iter().all(|&x| x <= 1.0 + 1e-9));
    assert!((xs[xs.len() - 1] - 1.0).abs() < 1e-3);
}
