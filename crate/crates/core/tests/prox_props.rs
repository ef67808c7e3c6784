mod common;

use fastdual::numkern::SymMatrix;
use fastdual::prox::{self, ProxFn};
use nalgebra::{dvector, DVector};
use proptest::prelude::*;
use rand::Rng;

fn rand_box(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> (DVector<f64>, DVector<f64>) {
    let c = common::rand_vec(r, n);
    let w = DVector::from_fn(n, |_, _| r.random_range(0.1..1.5));
    (&c - &w, &c + &w)
}

/// Minimize `⟨q, y⟩ + ½ yᵀ L y` over a 2-D box by enumerating the nine
/// lower / free / upper patterns.
fn enumerate_box_qp(l: &SymMatrix, q: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let obj = |y: &DVector<f64>| q.dot(y) + 0.5 * l.quad(y);
    let inside = |y: &DVector<f64>| (0..2).all(|i| y[i] >= lo[i] - 1e-12 && y[i] <= hi[i] + 1e-12);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for a in 0..3 {
        for b in 0..3 {
            let fix = [a, b];
            let mut y = DVector::zeros(2);
            let mut free = Vec::new();
            for i in 0..2 {
                match fix[i] {
                    0 => y[i] = lo[i],
                    2 => y[i] = hi[i],
                    _ => free.push(i),
                }
            }
            match free.len() {
                2 => {
                    let lm = l.matrix().clone();
                    y = -lm.cholesky().unwrap().solve(q);
                }
                1 => {
                    let i = free[0];
                    let j = 1 - i;
                    y[i] = -(q[i] + l[(i, j)] * y[j]) / l[(i, i)];
                }
                _ => {}
            }
            if inside(&y) {
                let v = obj(&y);
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, y));
                }
            }
        }
    }
    best.unwrap().1
}

#[test]
fn full_metric_box_prox_matches_enumeration() {
    let l = SymMatrix::symmetrized(nalgebra::dmatrix![2.0, 1.0; 1.0, 2.0]);
    let lo = dvector![-1.0, -1.0];
    let hi = dvector![1.0, 1.0];
    let x = dvector![2.0, 2.0];
    let got = prox::prox(&ProxFn::BoxIndicator { lo: lo.clone(), hi: hi.clone() }, &l, &x).unwrap();
    let want = enumerate_box_qp(&l, &-(l.matrix() * &x), &lo, &hi);
    assert!((got - want).amax() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn moreau_identity(seed in any::<u64>(), n in 1usize..=5, full in any::<bool>()) {
        let mut r = common::rng(seed);
        let l = if full { common::rand_pd(&mut r, n) } else { common::rand_diag_pd(&mut r, n) };
        let (lo, hi) = rand_box(&mut r, n);
        let g = ProxFn::BoxIndicator { lo, hi };
        let x = common::rand_vec(&mut r, n) * 2.0;
        let left = prox::conjugate_prox_via_moreau(&g, &l, &x).unwrap();
        let chol = l.matrix().clone().cholesky().unwrap();
        let linv = SymMatrix::symmetrized(chol.inverse());
        let right = chol.solve(&prox::prox(&g, &linv, &(l.matrix() * &x)).unwrap());
        let res = (&left + &right - &x).amax();
        prop_assert!(res <= 1e-10 * (1.0 + x.amax()), "res {res:e}");
    }

    #[test]
    fn box_prox_firmly_nonexpansive(seed in any::<u64>(), n in 1usize..=5, full in any::<bool>()) {
        let mut r = common::rng(seed);
        let l = if full { common::rand_pd(&mut r, n) } else { common::rand_diag_pd(&mut r, n) };
        let (lo, hi) = rand_box(&mut r, n);
        let psi = ProxFn::BoxIndicator { lo, hi };
        let x1 = common::rand_vec(&mut r, n) * 2.0;
        let x2 = common::rand_vec(&mut r, n) * 2.0;
        let p1 = prox::prox(&psi, &l, &x1).unwrap();
        let p2 = prox::prox(&psi, &l, &x2).unwrap();
        let dp = &p1 - &p2;
        let dx = &x1 - &x2;
        let tol = 1e-10 * (1.0 + l.quad(&dx));
        prop_assert!(l.quad(&dp) <= dp.dot(&(l.matrix() * &dx)) + tol);
        prop_assert!(l.norm_of(&dp) <= l.norm_of(&dx) + tol);
    }

    #[test]
    fn support_prox_equals_moreau_path(seed in any::<u64>(), n in 1usize..=6) {
        let mut r = common::rng(seed);
        let l = common::rand_diag_pd(&mut r, n);
        let (lo, hi) = rand_box(&mut r, n);
        let v = common::rand_vec(&mut r, n);
        let by = common::rand_vec(&mut r, n) * 2.0;
        let closed = prox::support_prox_box(&lo, &hi, &l.diagonal(), &v, &by);
        // prox_{σ_D}^L(v + L⁻¹By)
        let shifted = &v + by.component_div(&l.diagonal());
        let via = prox::conjugate_prox_via_moreau(&ProxFn::BoxIndicator { lo, hi }, &l, &shifted).unwrap();
        prop_assert!((closed - via).amax() <= 1e-10 * (1.0 + shifted.amax()));
    }

    #[test]
    fn prox_step_minimizes_linearized_model(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let l = common::rand_pd(&mut r, 2);
        let (lo, hi) = rand_box(&mut r, 2);
        let x = common::rand_vec(&mut r, 2);
        let grad = common::rand_vec(&mut r, 2) * 3.0;
        let psi = ProxFn::BoxIndicator { lo: lo.clone(), hi: hi.clone() };
        let step = &x - l.matrix().clone().cholesky().unwrap().solve(&grad);
        let got = prox::prox(&psi, &l, &step).unwrap();
        // argmin ⟨∇ℓ(x), y − x⟩ + ½‖y − x‖²_L = argmin ⟨∇ℓ(x) − Lx, y⟩ + ½ yᵀLy
        let want = enumerate_box_qp(&l, &(&grad - l.matrix() * &x), &lo, &hi);
        prop_assert!((&got - &want).amax() <= 1e-9, "{got} vs {want}");
    }
}
