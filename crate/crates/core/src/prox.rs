//! Generalized prox operators `prox_ψ^L(x) = argmin ψ(y) + ½‖y − x‖²_L`.
//!
//! Separable closed forms need a diagonal `L`. A non-diagonal `L` is
//! accepted for small boxes and routed through the dense QP solver.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numkern::{self, ShiftPolicy, SymMatrix};
use crate::problem::SoftCoupling;
use crate::qp::{self, QpProblem};

/// Largest dimension for which a non-diagonal metric is accepted.
pub const DENSE_PROX_MAX_N: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ProxFn {
    Zero,
    BoxIndicator {
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    NonnegOrthant,
    /// `σ_D(y) = sup_{d ∈ D} ⟨d, y⟩` for a box `D`: the conjugate of its indicator.
    SupportOfBox {
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    SoftBoxCoupled {
        lo: DVector<f64>,
        hi: DVector<f64>,
        couplings: Vec<SoftCoupling>,
    },
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: what.into(),
            expected,
            got,
        })
    }
}

pub fn prox(psi: &ProxFn, l: &SymMatrix, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.len();
    check_len("prox metric", n, l.n())?;
    if l.is_diagonal() {
        return prox_diag(psi, &l.diagonal(), x);
    }
    match psi {
        ProxFn::Zero => Ok(x.clone()),
        ProxFn::BoxIndicator { lo, hi } => box_prox_dense(lo, hi, l, x),
        ProxFn::NonnegOrthant => box_prox_dense(
            &DVector::zeros(n),
            &DVector::from_element(n, f64::INFINITY),
            l,
            x,
        ),
        ProxFn::SupportOfBox { lo, hi } => {
            // prox_{σ_D}^L(x) = x − L⁻¹ prox_{I_D}^{L⁻¹}(Lx)
            let chol = numkern::chol_psd(l, ShiftPolicy::exact())?;
            let linv = SymMatrix::symmetrized(chol.inverse());
            let inner = box_prox_dense(lo, hi, &linv, &(l.matrix() * x))?;
            Ok(x - chol.solve(&inner))
        }
        ProxFn::SoftBoxCoupled { .. } => Err(Error::UnsupportedProx(
            "slack-coupled box prox needs a diagonal metric".into(),
        )),
    }
}

/// Closed forms for a diagonal metric given by its diagonal.
pub fn prox_diag(psi: &ProxFn, l: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.len();
    check_len("prox metric", n, l.len())?;
    if let Some(i) = l.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::UnsupportedProx(format!(
            "metric diagonal entry {i} is not positive"
        )));
    }
    match psi {
        ProxFn::Zero => Ok(x.clone()),
        ProxFn::BoxIndicator { lo, hi } => {
            check_len("box bounds", n, lo.len())?;
            Ok(clip(x, lo, hi))
        }
        ProxFn::NonnegOrthant => Ok(x.map(|v| v.max(0.0))),
        ProxFn::SupportOfBox { lo, hi } => {
            check_len("box bounds", n, lo.len())?;
            let mut out = DVector::zeros(n);
            support_prox_box_into(lo, hi, l, x, None, &mut out);
            Ok(out)
        }
        ProxFn::SoftBoxCoupled { lo, hi, couplings } => {
            check_len("box bounds", n, lo.len())?;
            let mut y = clip(x, lo, hi);
            for c in couplings {
                let side = |slack: Option<usize>, bound: f64| {
                    slack.map(|j| SoftSide {
                        bound,
                        qs: l[j],
                        c: -l[j] * x[j],
                    })
                };
                let (yv, s_lo, s_hi) = soft_box_inner_min(
                    l[c.var],
                    -l[c.var] * x[c.var],
                    side(c.slack_lo, c.lower),
                    side(c.slack_hi, c.upper),
                )?;
                y[c.var] = yv;
                if let Some(j) = c.slack_lo {
                    y[j] = s_lo;
                }
                if let Some(j) = c.slack_hi {
                    y[j] = s_hi;
                }
            }
            Ok(y)
        }
    }
}

pub fn clip(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(&v, (&l, &h))| v.max(l).min(h)),
    )
}

fn box_prox_dense(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    l: &SymMatrix,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = x.len();
    check_len("box bounds", n, lo.len())?;
    if n > DENSE_PROX_MAX_N {
        return Err(Error::UnsupportedProx(format!(
            "non-diagonal metric box prox limited to n ≤ {DENSE_PROX_MAX_N}, got {n}"
        )));
    }
    let qp = QpProblem::with_bounds(l.matrix().clone(), -(l.matrix() * x), lo, hi);
    let sol = qp::solve_qp(&qp, &qp::QpOptions::default())?;
    Ok(clip(&sol.x, lo, hi))
}

/// `prox_{g⋆}^L(x) = x − L⁻¹ prox_g^{L⁻¹}(Lx)`.
pub fn conjugate_prox_via_moreau(g: &ProxFn, l: &SymMatrix, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("prox metric", x.len(), l.n())?;
    let lx = l.matrix() * x;
    if l.is_diagonal() {
        let d = l.diagonal();
        let inv = d.map(|v| 1.0 / v);
        let inner = prox_diag(g, &inv, &lx)?;
        return Ok(x - inner.component_div(&d));
    }
    let chol = numkern::chol_psd(l, ShiftPolicy::exact())?;
    let linv = SymMatrix::symmetrized(chol.inverse());
    let inner = prox(g, &linv, &lx)?;
    Ok(x - chol.solve(&inner))
}

/// `μ = min(v + L⁻¹(By − d̲), max(v + L⁻¹(By − d̄), 0))` componentwise.
pub fn support_prox_box(
    d_lo: &DVector<f64>,
    d_hi: &DVector<f64>,
    l_mu: &DVector<f64>,
    v: &DVector<f64>,
    by: &DVector<f64>,
) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    support_prox_box_into(d_lo, d_hi, l_mu, v, Some(by), &mut out);
    out
}

/// In-place form of [`support_prox_box`]; `by = None` means `By = 0`, which
/// turns it into `prox_{σ_D}^L(v)`.
pub fn support_prox_box_into(
    d_lo: &DVector<f64>,
    d_hi: &DVector<f64>,
    l_mu: &DVector<f64>,
    v: &DVector<f64>,
    by: Option<&DVector<f64>>,
    out: &mut DVector<f64>,
) {
    for i in 0..v.len() {
        let b = by.map_or(0.0, |by| by[i]);
        let inv = 1.0 / l_mu[i];
        let up = v[i] + inv * (b - d_lo[i]);
        let down = v[i] + inv * (b - d_hi[i]);
        out[i] = up.min(down.max(0.0));
    }
}

/// One side of a soft bound: `y ≤ bound + s` (upper) or `y ≥ bound − s`
/// (lower), with slack cost `½ qs s² + c s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftSide {
    pub bound: f64,
    pub qs: f64,
    pub c: f64,
}

/// Minimize `½ qy y² + a y + Σ_sides (½ qs s² + c s)` subject to
/// `lower.bound − s_lo ≤ y ≤ upper.bound + s_hi`, `s ≥ 0`.
///
/// Returns `(y, s_lo, s_hi)`; an absent side yields a zero slack.
pub fn soft_box_inner_min(
    qy: f64,
    a: f64,
    lower: Option<SoftSide>,
    upper: Option<SoftSide>,
) -> Result<(f64, f64, f64)> {
    if !(qy > 0.0) || lower.is_some_and(|s| !(s.qs > 0.0)) || upper.is_some_and(|s| !(s.qs > 0.0))
    {
        return Err(Error::UnsupportedInner(
            "soft-bound subproblem needs positive curvature".into(),
        ));
    }
    // The slack's own minimizer when its constraint is slack.
    let rest = |s: &SoftSide| (-s.c / s.qs).max(0.0);
    let y_free = -a / qy;
    let y = match (lower, upper) {
        // Past the kink the slack tracks y; a positive slack price can pin
        // y to the kink itself.
        (_, Some(u)) if y_free > u.bound + rest(&u) => {
            ((u.qs * u.bound - u.c - a) / (qy + u.qs)).max(u.bound + rest(&u))
        }
        (Some(l), _) if y_free < l.bound - rest(&l) => {
            ((l.qs * l.bound + l.c - a) / (qy + l.qs)).min(l.bound - rest(&l))
        }
        _ => y_free,
    };
    let s_lo = lower.map_or(0.0, |l| rest(&l).max(l.bound - y));
    let s_hi = upper.map_or(0.0, |u| rest(&u).max(y - u.bound));
    Ok((y, s_lo, s_hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn zero_prox_is_identity() {
        let l = SymMatrix::new(dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        let x = dvector![0.3, -7.0];
        assert_eq!(prox(&ProxFn::Zero, &l, &x).unwrap(), x);
    }

    #[test]
    fn box_with_diagonal_metric_clips() {
        let psi = ProxFn::BoxIndicator {
            lo: dvector![-1.0, -1.0],
            hi: dvector![1.0, 1.0],
        };
        let l = SymMatrix::from_diagonal(&dvector![3.0, 0.5]);
        assert_eq!(prox(&psi, &l, &dvector![2.0, -3.0]).unwrap(), dvector![1.0, -1.0]);
        assert_eq!(
            prox(&ProxFn::NonnegOrthant, &l, &dvector![-2.0, 4.0]).unwrap(),
            dvector![0.0, 4.0]
        );
    }

    #[test]
    fn box_with_full_metric_hits_corner() {
        // For L = [[2,1],[1,2]] and x = (2,2) both bounds are active at (1,1):
        // the gradient L(y − x) = (−3,−3) points into the box.
        let psi = ProxFn::BoxIndicator {
            lo: dvector![-1.0, -1.0],
            hi: dvector![1.0, 1.0],
        };
        let l = SymMatrix::new(dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        let y = prox(&psi, &l, &dvector![2.0, 2.0]).unwrap();
        assert!((y - dvector![1.0, 1.0]).amax() < 1e-12);
    }

    #[test]
    fn conjugate_of_zero_projects_to_origin() {
        let l = SymMatrix::from_diagonal(&dvector![1.0, 4.0]);
        let mu = conjugate_prox_via_moreau(&ProxFn::Zero, &l, &dvector![3.0, -1.0]).unwrap();
        assert_eq!(mu, dvector![0.0, 0.0]);
    }

    #[test]
    fn support_prox_cases() {
        let lo = dvector![-1.0];
        let hi = dvector![1.0];
        let l = dvector![2.0];
        assert_eq!(support_prox_box(&lo, &hi, &l, &dvector![0.0], &dvector![0.5])[0], 0.0);
        // By above the upper bound: (By − d̄)/L = (3 − 1)/2
        assert_eq!(support_prox_box(&lo, &hi, &l, &dvector![0.0], &dvector![3.0])[0], 1.0);
        assert_eq!(support_prox_box(&lo, &hi, &l, &dvector![0.0], &dvector![-3.0])[0], -1.0);
    }

    #[test]
    fn support_prox_matches_moreau_path() {
        let lo = dvector![-1.0, 0.0, f64::NEG_INFINITY];
        let hi = dvector![2.0, 0.5, 1.0];
        let l = dvector![0.5, 3.0, 1.5];
        let v = dvector![0.7, -0.2, 1.9];
        let by = dvector![3.0, 0.1, -4.0];
        let direct = support_prox_box(&lo, &hi, &l, &v, &by);
        let w = &v + by.component_div(&l);
        let g = ProxFn::BoxIndicator { lo, hi };
        let moreau = conjugate_prox_via_moreau(&g, &SymMatrix::from_diagonal(&l), &w).unwrap();
        assert!((direct - moreau).amax() < 1e-14);
    }

    #[test]
    fn soft_region_one() {
        let up = SoftSide {
            bound: 5.0,
            qs: 1.0,
            c: 0.0,
        };
        let (y, _, s) = soft_box_inner_min(2.0, -4.0, None, Some(up)).unwrap();
        assert_eq!((y, s), (2.0, 0.0));
    }

    #[test]
    fn soft_region_two() {
        let up = SoftSide {
            bound: 1.0,
            qs: 1.0,
            c: 0.0,
        };
        let (y, _, s) = soft_box_inner_min(1.0, -4.0, None, Some(up)).unwrap();
        assert!((y - 2.5).abs() < 1e-15 && (s - 1.5).abs() < 1e-15);
        // mirrored lower side
        let lo = SoftSide {
            bound: -1.0,
            qs: 1.0,
            c: 0.0,
        };
        let (y, s, _) = soft_box_inner_min(1.0, 4.0, Some(lo), None).unwrap();
        assert!((y + 2.5).abs() < 1e-15 && (s - 1.5).abs() < 1e-15);
    }

    // For fixed y the optimal slacks are explicit, so the reduced objective
    // is a convex function of y alone; ternary search over it is the oracle.
    #[test]
    fn soft_matches_grid_oracle() {
        let sides = [-2.0, -0.3, 0.0, 0.4, 3.0];
        let slack_cost = |side: Option<SoftSide>, viol: f64| {
            side.map_or(0.0, |s| {
                let v = (-s.c / s.qs).max(0.0).max(viol);
                0.5 * s.qs * v * v + s.c * v
            })
        };
        for &c_lo in &sides {
            for &c_hi in &sides {
                for &a in &[-6.0, -1.0, 0.2, 5.0] {
                    let qy = 1.3;
                    let lower = Some(SoftSide { bound: -0.7, qs: 2.0, c: c_lo });
                    let upper = Some(SoftSide { bound: 0.9, qs: 0.8, c: c_hi });
                    let phi = |y: f64| {
                        0.5 * qy * y * y + a * y + slack_cost(lower, -0.7 - y) + slack_cost(upper, y - 0.9)
                    };
                    let (mut l, mut h) = (-50.0, 50.0);
                    for _ in 0..300 {
                        let m1 = l + (h - l) / 3.0;
                        let m2 = h - (h - l) / 3.0;
                        if phi(m1) < phi(m2) {
                            h = m2;
                        } else {
                            l = m1;
                        }
                    }
                    let (y, s_lo, s_hi) = soft_box_inner_min(qy, a, lower, upper).unwrap();
                    let yo = 0.5 * (l + h);
                    assert!(phi(y) <= phi(yo) + 1e-12, "c=({c_lo},{c_hi}) a={a}: {y} vs {yo}");
                    assert!((y - yo).abs() < 1e-6);
                    assert!(s_lo >= 0.0 && s_hi >= 0.0);
                    assert!(y >= -0.7 - s_lo - 1e-15 && y <= 0.9 + s_hi + 1e-15);
                }
            }
        }
    }

    #[test]
    fn soft_rejects_nonpositive_curvature() {
        assert!(soft_box_inner_min(0.0, 1.0, None, None).is_err());
    }
}
