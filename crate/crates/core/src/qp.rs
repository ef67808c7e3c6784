//! Dense convex QP solver used as an independent reference:
//!
//! ```text
//! minimize ½xᵀHx + qᵀx  subject to  Ax = b,  Gx ≥ h
//! ```
//!
//! A Mehrotra predictor-corrector interior point method gets close, then an
//! active-set polish solves the KKT system of the identified active rows.
//! Multipliers follow `Hx + q = Aᵀy + Gᵀz`, `z ≥ 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{ComposedProblem, GKind, HTerm};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub hb: DVector<f64>,
}

impl QpProblem {
    /// Box-constrained QP; infinite bounds produce no rows.
    pub fn with_bounds(
        h: DMatrix<f64>,
        q: DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Self {
        let n = q.len();
        let mut rows = RowBuilder::new(n);
        for i in 0..n {
            rows.bound(&unit(n, i), lo[i], hi[i]);
        }
        let (g, hb) = rows.finish();
        Self {
            h,
            q,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            g,
            hb,
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// Collects one-sided rows `gᵀx ≥ h`.
struct RowBuilder {
    n: usize,
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
}

impl RowBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    fn geq(&mut self, row: DVector<f64>, rhs: f64) -> Option<usize> {
        if rhs == f64::NEG_INFINITY {
            return None;
        }
        self.rows.push(row);
        self.rhs.push(rhs);
        Some(self.rows.len() - 1)
    }

    /// `lo ≤ rowᵀx ≤ hi`; returns the indices of the lower and upper rows.
    fn bound(&mut self, row: &DVector<f64>, lo: f64, hi: f64) -> (Option<usize>, Option<usize>) {
        let l = self.geq(row.clone(), lo);
        let u = self.geq(-row, -hi);
        (l, u)
    }

    fn finish(self) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(self.rows.len(), self.n);
        for (i, r) in self.rows.iter().enumerate() {
            g.set_row(i, &r.transpose());
        }
        (g, DVector::from_vec(self.rhs))
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-11,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub iterations: usize,
    pub polished: bool,
    /// Max of the scaled stationarity, feasibility and complementarity residuals.
    pub kkt_residual: f64,
}

/// Scaled KKT residual of a candidate primal-dual point.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let scale = 1.0 + p.q.amax().max(p.h.amax() * x.amax());
    let stat = (&p.h * x + &p.q - p.a.tr_mul(y) - p.g.tr_mul(z)).amax() / scale;
    let bscale = 1.0 + p.b.amax().max(p.hb.amax());
    let prim_eq = if p.a.nrows() > 0 {
        (&p.a * x - &p.b).amax() / bscale
    } else {
        0.0
    };
    let gx = &p.g * x;
    let mut prim_in = 0.0_f64;
    let mut dual = 0.0_f64;
    let mut comp = 0.0_f64;
    for i in 0..p.hb.len() {
        let slack = gx[i] - p.hb[i];
        prim_in = prim_in.max(-slack / bscale);
        dual = dual.max(-z[i] / scale);
        comp = comp.max((slack * z[i]).abs() / (scale * bscale));
    }
    stat.max(prim_eq).max(prim_in).max(dual).max(comp)
}

pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let ipm = interior_point(p, opts)?;
    if !opts.polish {
        return Ok(ipm);
    }
    match polish(p, &ipm) {
        Some(pol) if pol.kkt_residual <= ipm.kkt_residual.max(opts.tol) => Ok(pol),
        _ => Ok(ipm),
    }
}

fn interior_point(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let n = p.n();
    let (me, mi) = (p.a.nrows(), p.g.nrows());
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(me);
    let gx = &p.g * &x;
    let mut s = DVector::from_iterator(mi, (0..mi).map(|i| (gx[i] - p.hb[i]).max(1.0)));
    let mut z = DVector::from_element(mi, 1.0);
    let hscale = p.h.amax().max(1.0);
    let reg = 1e-13 * hscale;

    let mut best: Option<(f64, QpSolution)> = None;
    for it in 0..opts.max_iter {
        let rd = &p.h * &x + &p.q - p.a.tr_mul(&y) - p.g.tr_mul(&z);
        let rp = &p.a * &x - &p.b;
        let rg = &p.g * &x - &s - &p.hb;
        let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };

        let res = kkt_residual(p, &x, &y, &z);
        let gap = mu / (1.0 + p.q.amax());
        if best.as_ref().is_none_or(|(r, _)| res.max(gap) < *r) {
            best = Some((
                res.max(gap),
                QpSolution {
                    x: x.clone(),
                    y: y.clone(),
                    z: z.clone(),
                    iterations: it,
                    polished: false,
                    kkt_residual: res,
                },
            ));
        }
        if res <= opts.tol && gap <= opts.tol {
            break;
        }

        // Reduced system [H + GᵀWG + reg·I, Aᵀ; A, −reg·I] [dx; −dy] = rhs
        let w = DVector::from_iterator(mi, (0..mi).map(|i| z[i] / s[i]));
        let mut k = DMatrix::zeros(n + me, n + me);
        let mut hw = p.h.clone();
        for i in 0..mi {
            let gi = p.g.row(i);
            hw += gi.transpose() * gi * w[i];
        }
        for i in 0..n {
            hw[(i, i)] += reg;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&hw);
        k.view_mut((n, 0), (me, n)).copy_from(&p.a);
        k.view_mut((0, n), (n, me)).copy_from(&p.a.transpose());
        for i in 0..me {
            k[(n + i, n + i)] = -reg;
        }
        let lu = k.lu();

        let solve = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rc is the complementarity right-hand side: Z ds + S dz = rc
            let sinv_rc = DVector::from_iterator(mi, (0..mi).map(|i| rc[i] / s[i]));
            let top = -&rd - p.g.tr_mul(&w.component_mul(&rg)) + p.g.tr_mul(&sinv_rc);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&top);
            rhs.rows_mut(n, me).copy_from(&(-&rp));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = -sol.rows(n, me).into_owned();
            let gdx = &p.g * &dx;
            let dz = DVector::from_iterator(
                mi,
                (0..mi).map(|i| w[i] * (-rg[i] - gdx[i]) + sinv_rc[i]),
            );
            let ds = DVector::from_iterator(mi, (0..mi).map(|i| (rc[i] - s[i] * dz[i]) / z[i]));
            Some((dx, dy, dz, ds))
        };
        let step_len = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
            let mut a = 1.0_f64;
            for i in 0..v.len() {
                if dv[i] < 0.0 {
                    a = a.min(-v[i] / dv[i]);
                }
            }
            a
        };

        let rc_aff = DVector::from_iterator(mi, (0..mi).map(|i| -s[i] * z[i]));
        let Some((_, _, dz_a, ds_a)) = solve(&rc_aff) else {
            break;
        };
        let a_aff = step_len(&s, &ds_a).min(step_len(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (0..mi)
                .map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i]))
                .sum::<f64>()
                / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        let rc = DVector::from_iterator(
            mi,
            (0..mi).map(|i| -s[i] * z[i] - ds_a[i] * dz_a[i] + sigma * mu),
        );
        let Some((dx, dy, dz, ds)) = solve(&rc) else {
            break;
        };
        let alpha = (0.995 * step_len(&s, &ds).min(step_len(&z, &dz))).min(1.0);
        x += alpha * dx;
        y += alpha * dy;
        z += alpha * dz;
        s += alpha * ds;
    }
    let (_, sol) = best.ok_or_else(|| Error::Reference("no iterate produced".into()))?;
    Ok(sol)
}

/// Solve the equality-constrained QP on the active set suggested by `ipm`,
/// adjusting the set a few times on sign or feasibility violations.
fn polish(p: &QpProblem, ipm: &QpSolution) -> Option<QpSolution> {
    let n = p.n();
    let me = p.a.nrows();
    let gx = &p.g * &ipm.x;
    let mut active: Vec<bool> = (0..p.g.nrows())
        .map(|i| ipm.z[i] > gx[i] - p.hb[i])
        .collect();
    let tol = 1e-10;
    for _ in 0..10 {
        let idx: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let k = me + idx.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.q));
        for r in 0..me {
            for j in 0..n {
                kkt[(n + r, j)] = p.a[(r, j)];
                kkt[(j, n + r)] = p.a[(r, j)];
            }
            rhs[n + r] = p.b[r];
        }
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..n {
                kkt[(n + me + r, j)] = p.g[(i, j)];
                kkt[(j, n + me + r)] = p.g[(i, j)];
            }
            rhs[n + me + r] = p.hb[i];
        }
        let sol = kkt.lu().solve(&rhs)?;
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let y = -sol.rows(n, me).into_owned();
        let mut z = DVector::zeros(p.g.nrows());
        for (r, &i) in idx.iter().enumerate() {
            z[i] = -sol[n + me + r];
        }
        let gx = &p.g * &x;
        let scale = 1.0 + p.hb.amax();
        let mut changed = false;
        for i in 0..active.len() {
            if active[i] && z[i] < -tol * (1.0 + z.amax()) {
                active[i] = false;
                changed = true;
            } else if !active[i] && gx[i] - p.hb[i] < -tol * scale {
                active[i] = true;
                changed = true;
            }
        }
        if !changed {
            let kkt_residual = kkt_residual(p, &x, &y, &z);
            return Some(QpSolution {
                x,
                y,
                z,
                iterations: ipm.iterations,
                polished: true,
                kkt_residual,
            });
        }
    }
    None
}

/// High-accuracy primal-dual solution of a composed problem.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub y: DVector<f64>,
    /// Multipliers of the dualized equality `Ax = b`.
    pub lambda: DVector<f64>,
    /// Multipliers of `Bx = v`, positive at upper bounds.
    pub mu: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
}

impl ReferenceSolution {
    /// `ν⋆ = (λ⋆, μ⋆)`
    pub fn nu(&self) -> DVector<f64> {
        let mut nu = DVector::zeros(self.lambda.len() + self.mu.len());
        nu.rows_mut(0, self.lambda.len()).copy_from(&self.lambda);
        nu.rows_mut(self.lambda.len(), self.mu.len()).copy_from(&self.mu);
        nu
    }
}

/// Residual level accepted from the reference solver.
pub const REFERENCE_TOL: f64 = 1e-9;

pub fn reference_solution(p: &ComposedProblem) -> Result<ReferenceSolution> {
    let n = p.n();
    let m = p.m();
    let mut a = p.eq.a.clone();
    let mut b = p.eq.b.clone();
    if let Some(e) = p.h_equality() {
        let rows = a.nrows() + e.m();
        let mut a2 = DMatrix::zeros(rows, n);
        a2.view_mut((0, 0), (a.nrows(), n)).copy_from(&a);
        a2.view_mut((a.nrows(), 0), (e.m(), n)).copy_from(&e.a);
        let mut b2 = DVector::zeros(rows);
        b2.rows_mut(0, b.len()).copy_from(&b);
        b2.rows_mut(b.len(), e.m()).copy_from(&e.b);
        a = a2;
        b = b2;
    }
    let mut rows = RowBuilder::new(n);
    match &p.h {
        HTerm::Box { lo, hi } | HTerm::SoftBox { lo, hi, .. } => {
            for i in 0..n {
                rows.bound(&unit(n, i), lo[i], hi[i]);
            }
        }
        _ => {}
    }
    if let HTerm::SoftBox { couplings, .. } = &p.h {
        for c in couplings {
            if let Some(s) = c.slack_lo {
                let mut r = unit(n, c.var);
                r[s] = 1.0;
                rows.geq(r, c.lower);
            }
            if let Some(s) = c.slack_hi {
                let mut r = -unit(n, c.var);
                r[s] = 1.0;
                rows.geq(r, -c.upper);
            }
        }
    }
    let mut g_rows = Vec::new();
    if let GKind::Box { lo, hi } = &p.g.kind {
        for i in 0..p.p() {
            let row = p.g.b.row(i).transpose();
            g_rows.push(rows.bound(&row, lo[i], hi[i]));
        }
    }
    let (g, hb) = rows.finish();
    let qp = QpProblem {
        h: p.cost.h.matrix().clone(),
        q: p.cost.zeta.clone(),
        a,
        b,
        g,
        hb,
    };
    let sol = solve_qp(&qp, &QpOptions::default())?;
    if sol.kkt_residual > REFERENCE_TOL {
        return Err(Error::Reference(format!(
            "KKT residual {:e} above {REFERENCE_TOL:e}",
            sol.kkt_residual
        )));
    }
    // Lagrangian f + λᵀ(Ax − b) + μᵀBx has Hx + ζ = −Aᵀλ − Bᵀμ.
    let lambda = -sol.y.rows(0, m).into_owned();
    let mu = DVector::from_iterator(
        p.p(),
        g_rows.iter().map(|&(l, u)| {
            u.map_or(0.0, |u| sol.z[u]) - l.map_or(0.0, |l| sol.z[l])
        }),
    );
    let objective = p.cost.value(&sol.x);
    Ok(ReferenceSolution {
        y: sol.x,
        lambda,
        mu,
        objective,
        kkt_residual: sol.kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::SymMatrix;
    use crate::problem::{AffineEq, GTerm, QuadCost};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unconstrained_is_newton_step() {
        let p = ComposedProblem::new(
            QuadCost::new(
                SymMatrix::new(dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap(),
                dvector![1.0, -1.0],
            )
            .unwrap(),
            HTerm::Zero,
            None,
            GTerm::none(2),
        )
        .unwrap();
        let r = reference_solution(&p).unwrap();
        let want = -p.cost.h.matrix().clone().try_inverse().unwrap() * &p.cost.zeta;
        assert!((r.y - want).amax() < 1e-12);
    }

    #[test]
    fn one_d_box_lands_on_bound() {
        let p = ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(1), dvector![-5.0]).unwrap(),
            HTerm::Box {
                lo: dvector![-1.0],
                hi: dvector![2.0],
            },
            None,
            GTerm::none(1),
        )
        .unwrap();
        let r = reference_solution(&p).unwrap();
        assert!((r.y[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn multipliers_follow_lagrangian_sign() {
        // min ½x² s.t. x = 1: stationarity x + λ = 0 gives λ = −1
        let p = ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(1), dvector![0.0]).unwrap(),
            HTerm::Zero,
            Some(AffineEq::new(dmatrix![1.0], dvector![1.0]).unwrap()),
            GTerm::none(1),
        )
        .unwrap();
        let r = reference_solution(&p).unwrap();
        assert!((r.lambda[0] + 1.0).abs() < 1e-12);

        let p = ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(1), dvector![-3.0]).unwrap(),
            HTerm::Zero,
            None,
            GTerm {
                b: dmatrix![1.0],
                kind: GKind::Box {
                    lo: dvector![0.0],
                    hi: dvector![0.5],
                },
            },
        )
        .unwrap();
        let r = reference_solution(&p).unwrap();
        assert!((r.y[0] - 0.5).abs() < 1e-12);
        // x − 3 + μ = 0 → μ = 2.5 > 0 at the upper bound
        assert!((r.mu[0] - 2.5).abs() < 1e-10);
    }

    #[test]
    fn degenerate_psd_hessian() {
        // min x1 s.t. x1 ≥ 1, 0 ≤ x2 ≤ 1, zero Hessian in x1
        let qp = QpProblem::with_bounds(
            dmatrix![0.0, 0.0; 0.0, 1.0],
            dvector![1.0, -0.5],
            &dvector![1.0, 0.0],
            &dvector![f64::INFINITY, 1.0],
        );
        let s = solve_qp(&qp, &QpOptions::default()).unwrap();
        assert!((&s.x - dvector![1.0, 0.5]).amax() < 1e-10, "{}", s.x);
        assert!(s.kkt_residual < 1e-10);
    }
}
