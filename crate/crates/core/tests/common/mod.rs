// Random instance generators shared by the integration tests.
#![allow(dead_code)]

use fastdual::mpc::{MpcInstance, MpcWeights, Plant, SoftBound};
use fastdual::numkern::SymMatrix;
use fastdual::problem::{AffineEq, ComposedProblem, GKind, GTerm, HTerm, QuadCost, SoftCoupling};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = r.random_range(f64::EPSILON..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(r))
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(r))
}

pub fn rand_pd(r: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let g = rand_mat(r, n, n);
    SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(n, n) * 0.5)
}

pub fn rand_diag_pd(r: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    SymMatrix::from_diagonal(&DVector::from_fn(n, |_, _| r.random_range(0.2..5.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    /// `h = 0`, dense PD `H`.
    Free,
    /// Box `h`, diagonal `H`.
    Box,
    /// Equality-indicator `h`, `H` PD on its null space only.
    Equality,
    /// Slack-coupled soft bands, diagonal `H`.
    Soft,
}

pub const CLASSES: [Class; 4] = [Class::Free, Class::Box, Class::Equality, Class::Soft];

/// Box around `center` with random widths; some sides left open.
fn box_around(r: &mut ChaCha8Rng, center: &DVector<f64>, open: f64) -> (DVector<f64>, DVector<f64>) {
    let n = center.len();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        lo[i] = if r.random::<f64>() < open {
            f64::NEG_INFINITY
        } else {
            center[i] - r.random_range(0.05..1.0)
        };
        hi[i] = if r.random::<f64>() < open {
            f64::INFINITY
        } else {
            center[i] + r.random_range(0.05..1.0)
        };
    }
    (lo, hi)
}

/// Random feasible composed problem. `m` dualized equality rows, `p`
/// rows in `g`, and `n` primal variables (before slacks for `Soft`).
pub fn problem(r: &mut ChaCha8Rng, class: Class, n: usize, m: usize, p: usize) -> ComposedProblem {
    match class {
        Class::Free | Class::Box => {
            let x = rand_vec(r, n) * 0.5;
            let h = if class == Class::Free {
                rand_pd(r, n)
            } else {
                rand_diag_pd(r, n)
            };
            let hterm = if class == Class::Free {
                HTerm::Zero
            } else {
                let (lo, hi) = box_around(r, &x, 0.2);
                HTerm::Box { lo, hi }
            };
            finish(r, h, hterm, &x, m, p)
        }
        Class::Equality => {
            let me = (n / 2).max(1);
            let a = rand_mat(r, me, n);
            let x = rand_vec(r, n) * 0.5;
            // Rank-deficient H that is still PD on null(A).
            let z = fastdual::numkern::null_space_basis(&a, 1e-9).0;
            let k = z.ncols();
            let g = rand_mat(r, n, k.max(1));
            let hz = &z * z.transpose() * 2.0 + &g * g.transpose() * 0.3;
            let h = SymMatrix::symmetrized(hz);
            let eq = AffineEq {
                b: &a * &x,
                a,
            };
            finish(r, h, HTerm::Equality(eq), &x, m, p)
        }
        Class::Soft => {
            let coupled = (n / 2).max(1);
            let n_slack = 2 * coupled;
            let nt = n + n_slack;
            let core = rand_vec(r, n) * 0.5;
            let mut x = DVector::zeros(nt);
            x.rows_mut(0, n).copy_from(&core);
            let (mut lo, mut hi) = box_around(r, &x, 0.2);
            let mut couplings = Vec::new();
            for c in 0..coupled {
                lo[c] = f64::NEG_INFINITY;
                hi[c] = f64::INFINITY;
                let (sl, sh) = (n + 2 * c, n + 2 * c + 1);
                for j in [sl, sh] {
                    lo[j] = 0.0;
                    hi[j] = f64::INFINITY;
                }
                couplings.push(SoftCoupling {
                    var: c,
                    slack_lo: Some(sl),
                    slack_hi: Some(sh),
                    lower: core[c] - r.random_range(0.05..0.5),
                    upper: core[c] + r.random_range(0.05..0.5),
                });
            }
            let mut d = rand_diag_pd(r, nt).diagonal();
            for j in n..nt {
                d[j] = r.random_range(5.0..50.0);
            }
            let h = SymMatrix::from_diagonal(&d);
            finish(r, h, HTerm::SoftBox { lo, hi, couplings }, &x, m, p)
        }
    }
}

fn finish(
    r: &mut ChaCha8Rng,
    h: SymMatrix,
    hterm: HTerm,
    x: &DVector<f64>,
    m: usize,
    p: usize,
) -> ComposedProblem {
    let n = x.len();
    let zeta = rand_vec(r, n);
    let eq = (m > 0).then(|| {
        let a = rand_mat(r, m, n);
        AffineEq {
            b: &a * x,
            a,
        }
    });
    let g = if p > 0 {
        let b = rand_mat(r, p, n);
        let (lo, hi) = box_around(r, &(&b * x), 0.2);
        GTerm {
            b,
            kind: GKind::Box { lo, hi },
        }
    } else {
        GTerm::none(n)
    };
    ComposedProblem::new(QuadCost::new(h, zeta).unwrap(), hterm, eq, g).unwrap()
}

/// Which side of each bound an inner minimizer sits on. Equal signatures at
/// neighbouring points mean the dual is a single quadratic piece there.
pub fn region_signature(p: &ComposedProblem, x: &DVector<f64>) -> Vec<i8> {
    let side = |v: f64, lo: f64, hi: f64| -> i8 {
        if v <= lo {
            -1
        } else if v >= hi {
            1
        } else {
            0
        }
    };
    match &p.h {
        HTerm::Box { lo, hi } => (0..x.len()).map(|i| side(x[i], lo[i], hi[i])).collect(),
        HTerm::SoftBox { lo, hi, couplings } => {
            let mut s: Vec<i8> = (0..x.len()).map(|i| side(x[i], lo[i], hi[i])).collect();
            for c in couplings {
                s.push(side(x[c.var], c.lower, c.upper));
            }
            s
        }
        _ => Vec::new(),
    }
}

/// Small random soft-constrained MPC instance with a single-state output
/// map, usable by both condensations.
pub fn mpc_instance(r: &mut ChaCha8Rng) -> MpcInstance {
    let nx = r.random_range(2..=3);
    let nu = r.random_range(1..=2);
    let mut phi = rand_mat(r, nx, nx) * 0.4;
    for i in 0..nx {
        phi[(i, i)] += 0.6;
    }
    let gamma = rand_mat(r, nx, nu);
    let mut c_out = DMatrix::zeros(1, nx);
    c_out[(0, 0)] = 1.0;
    let plant = Plant::new(phi, gamma, c_out).unwrap();
    let q = rand_diag_pd(r, nx);
    let weights = MpcWeights {
        q_f: q.clone(),
        q,
        r: rand_diag_pd(r, nu),
        s: DVector::from_element(2, 50.0),
    };
    let x0 = rand_vec(r, nx);
    MpcInstance {
        plant,
        weights,
        horizon: r.random_range(2..=4),
        u_lo: DVector::from_element(nu, -r.random_range(0.3..1.5)),
        u_hi: DVector::from_element(nu, r.random_range(0.3..1.5)),
        x_lo: DVector::from_element(nx, f64::NEG_INFINITY),
        x_hi: DVector::from_element(nx, f64::INFINITY),
        y_soft: vec![SoftBound {
            lower: -r.random_range(0.2..1.0),
            upper: r.random_range(0.2..1.0),
        }],
        x0,
        y_ref: DVector::from_element(1, r.random_range(-1.0..1.0)),
    }
}

/// Random MPC instance with hard state and input boxes only and a zero
/// reference, so the cost has no linear term.
pub fn hard_mpc_instance(r: &mut ChaCha8Rng) -> MpcInstance {
    let mut inst = mpc_instance(r);
    let nx = inst.plant.nx();
    inst.y_soft = vec![SoftBound {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    }];
    inst.x_lo = DVector::from_element(nx, -r.random_range(0.5..2.0));
    inst.x_hi = DVector::from_element(nx, r.random_range(0.5..2.0));
    inst.x0 = DVector::from_fn(nx, |i, _| 0.5 * (inst.x_lo[i] + inst.x_hi[i]));
    inst.y_ref = DVector::zeros(1);
    inst
}
