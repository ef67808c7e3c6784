//! Iteration engines: the generalized fast gradient method, the generalized
//! fast dual gradient method, dual-function evaluation, an ADMM baseline and
//! the rate certificate.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::curvature;
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::numkern::{self, CholFactor, ShiftPolicy, SparseRows, SymMatrix};
use crate::problem::{ComposedProblem, GKind, HTerm, SoftCoupling};
use crate::prox::{self, ProxFn, SoftSide};

/// `t⁺ = (1 + √(1 + 4t²)) / 2`
pub fn momentum_next(t: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
}

// ---------------------------------------------------------------------------
// Inner minimization  x⋆(ν) = argmin f(x) + h(x) + νᵀCx

#[derive(Debug, Clone)]
enum InnerKind {
    Dense(CholFactor),
    Clip {
        hdiag: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    Soft {
        hdiag: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
        couplings: Vec<SoftCoupling>,
    },
    Equality {
        k11: DMatrix<f64>,
        k12: DMatrix<f64>,
        offset: DVector<f64>,
    },
}

/// Offline-factorized minimizer of `½xᵀHx + lᵀx + h(x)` for varying `l`.
#[derive(Debug, Clone)]
pub struct InnerMin {
    kind: InnerKind,
    factorizations: usize,
}

fn require_diagonal(p: &ComposedProblem) -> Result<DVector<f64>> {
    if !p.cost.h.is_diagonal() {
        return Err(Error::UnsupportedInner(format!(
            "{} h needs a diagonal H for the closed-form minimizer",
            p.h.kind_name()
        )));
    }
    let d = p.cost.h.diagonal();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::UnsupportedInner(format!(
            "diagonal of H is not positive at index {i}"
        )));
    }
    Ok(d)
}

impl InnerMin {
    pub fn new(p: &ComposedProblem) -> Result<Self> {
        let kind = match &p.h {
            HTerm::Zero => {
                InnerKind::Dense(numkern::chol_psd(&p.cost.h, ShiftPolicy::exact()).map_err(
                    |_| Error::UnsupportedInner("h = 0 needs a positive definite H".into()),
                )?)
            }
            HTerm::Box { lo, hi } => InnerKind::Clip {
                hdiag: require_diagonal(p)?,
                lo: lo.clone(),
                hi: hi.clone(),
            },
            HTerm::SoftBox { lo, hi, couplings } => InnerKind::Soft {
                hdiag: require_diagonal(p)?,
                lo: lo.clone(),
                hi: hi.clone(),
                couplings: couplings.clone(),
            },
            HTerm::Equality(e) => {
                let kkt = numkern::kkt_factor(&p.cost.h, &e.a)?;
                let (k11, k12) = kkt.inverse_blocks()?;
                let offset = &k12 * &e.b;
                InnerKind::Equality { k11, k12, offset }
            }
        };
        Ok(Self {
            kind,
            factorizations: 1,
        })
    }

    /// Pick up new online data (`b` of an equality-indicator `h`) without
    /// refactorizing.
    pub fn refresh(&mut self, p: &ComposedProblem) {
        if let (InnerKind::Equality { k12, offset, .. }, Some(e)) = (&mut self.kind, p.h_equality()) {
            offset.gemv(1.0, k12, &e.b, 0.0);
        }
    }

    /// Number of matrix factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    /// `out = argmin ½xᵀHx + linᵀx + h(x)`
    pub fn minimize(&self, lin: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.kind {
            InnerKind::Dense(ch) => {
                out.copy_from(&ch.solve(lin));
                out.neg_mut();
            }
            InnerKind::Clip { hdiag, lo, hi } => {
                for i in 0..out.len() {
                    out[i] = (-lin[i] / hdiag[i]).max(lo[i]).min(hi[i]);
                }
            }
            InnerKind::Soft {
                hdiag,
                lo,
                hi,
                couplings,
            } => {
                for i in 0..out.len() {
                    out[i] = (-lin[i] / hdiag[i]).max(lo[i]).min(hi[i]);
                }
                for c in couplings {
                    let side = |slack: Option<usize>, bound: f64| {
                        slack.map(|j| SoftSide {
                            bound,
                            qs: hdiag[j],
                            c: lin[j],
                        })
                    };
                    let (y, s_lo, s_hi) = prox::soft_box_inner_min(
                        hdiag[c.var],
                        lin[c.var],
                        side(c.slack_lo, c.lower),
                        side(c.slack_hi, c.upper),
                    )
                    .expect("curvature checked on construction");
                    out[c.var] = y;
                    if let Some(j) = c.slack_lo {
                        out[j] = s_lo;
                    }
                    if let Some(j) = c.slack_hi {
                        out[j] = s_hi;
                    }
                }
            }
            InnerKind::Equality { k11, offset, .. } => {
                out.gemv(-1.0, k11, lin, 0.0);
                *out += offset;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dual function

#[derive(Debug, Clone)]
pub struct DualEval {
    pub d: f64,
    pub x: DVector<f64>,
    pub grad: DVector<f64>,
}

/// `d(ν) = f(x⋆) + h(x⋆) + νᵀ(Cx⋆ − c)` and `∇d(ν) = Cx⋆ − c`.
pub fn eval_dual(p: &ComposedProblem, nu: &DVector<f64>) -> Result<DualEval> {
    eval_dual_with(p, &InnerMin::new(p)?, nu)
}

pub fn eval_dual_with(p: &ComposedProblem, inner: &InnerMin, nu: &DVector<f64>) -> Result<DualEval> {
    if nu.len() != p.dual_dim() {
        return Err(Error::Dimension {
            context: "dual variable".into(),
            expected: p.dual_dim(),
            got: nu.len(),
        });
    }
    let lin = &p.cost.zeta + p.c_matrix().tr_mul(nu);
    let mut x = DVector::zeros(p.n());
    inner.minimize(&lin, &mut x);
    let grad = p.c_matrix() * &x - p.c_vector();
    let d = p.cost.value(&x) + nu.dot(&grad);
    Ok(DualEval { d, x, grad })
}

/// `D(ν) = d(ν) − g⋆(μ)`.
pub fn dual_objective(p: &ComposedProblem, inner: &InnerMin, nu: &DVector<f64>) -> Result<f64> {
    let e = eval_dual_with(p, inner, nu)?;
    let mu = nu.rows(p.m(), p.p()).into_owned();
    Ok(e.d - p.g.conjugate(&mu))
}

// ---------------------------------------------------------------------------
// Stopping and logs

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eq: f64,
    pub ineq: f64,
    pub fp: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eq: 1e-6,
            ineq: 1e-6,
            fp: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopRule {
    /// Residual-based: equality, bound violation and fixed-point residual.
    Library(Tolerances),
    /// `‖y − y⋆‖₂ ≤ rel·‖y⋆‖₂`.
    Oracle { y_star: DVector<f64>, rel: f64 },
    /// Run the full iteration budget.
    Exhaust,
}

impl StopRule {
    /// The benchmark rule at 0.5% relative accuracy.
    pub fn benchmark(y_star: DVector<f64>) -> Self {
        StopRule::Oracle { y_star, rel: 0.005 }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_iter: usize,
    pub stop: StopRule,
    /// Record per-iteration residuals.
    pub record_log: bool,
    /// Also record `D` at `(λᵏ, μᵏ)` (one extra inner minimization).
    pub record_dual: bool,
    /// Reference primal for the `rel_err` column.
    pub reference: Option<DVector<f64>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            stop: StopRule::Library(Tolerances::default()),
            record_log: false,
            record_dual: false,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub k: usize,
    pub dual: Option<f64>,
    pub eq_res: f64,
    pub ineq_res: f64,
    pub fp_res: f64,
    pub rel_err: Option<f64>,
}

/// Append-only per-iteration record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveLog {
    entries: Vec<LogEntry>,
}

impl SolveLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(k, D(νᵏ))` pairs where the dual objective was recorded.
    pub fn dual_trace(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.dual.map(|d| (e.k, d)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DualOutcome {
    pub algorithm: &'static str,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub eq_res: f64,
    pub ineq_res: f64,
    pub log: SolveLog,
}

impl DualOutcome {
    /// Turn a run that exhausted its budget into [`Error::CapReached`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::CapReached {
                iterations: self.iterations,
            })
        }
    }

    pub fn nu(&self) -> DVector<f64> {
        stack(&self.lambda, &self.mu)
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

fn rel_err(y: &DVector<f64>, y_star: &DVector<f64>) -> f64 {
    let num = (y - y_star).norm();
    let den = y_star.norm();
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn oracle_met(y: &DVector<f64>, y_star: &DVector<f64>, rel: f64) -> bool {
    (y - y_star).norm() <= rel * y_star.norm()
}

/// Largest violation of `lo ≤ v ≤ hi`.
fn bound_violation(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..v.len() {
        worst = worst.max(lo[i] - v[i]).max(v[i] - hi[i]);
    }
    worst
}

// ---------------------------------------------------------------------------
// Algorithm 1

#[derive(Debug, Clone)]
pub struct FgmOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Generalized fast gradient method on `ℓ + ψ` with metric `L`.
///
/// `stop(k, xᵏ)` is called after every prox step.
pub fn fgm_run(
    mut grad: impl FnMut(&DVector<f64>) -> DVector<f64>,
    psi: &ProxFn,
    metric: &Metric,
    x0: &DVector<f64>,
    max_iter: usize,
    mut stop: impl FnMut(usize, &DVector<f64>) -> bool,
) -> Result<FgmOutcome> {
    let mut y = x0.clone();
    let mut x_prev = x0.clone();
    let mut t = 1.0;
    let diag = metric.l.is_diagonal().then(|| metric.l.diagonal());
    for k in 1..=max_iter {
        let step = &y - metric.apply_inv(&grad(&y));
        let x = match &diag {
            Some(d) => prox::prox_diag(psi, d, &step)?,
            None => prox::prox(psi, &metric.l, &step)?,
        };
        if stop(k, &x) {
            return Ok(FgmOutcome {
                x,
                iterations: k,
                converged: true,
            });
        }
        let t_next = momentum_next(t);
        y = &x + (&x - &x_prev) * ((t - 1.0) / t_next);
        x_prev = x;
        t = t_next;
    }
    Ok(FgmOutcome {
        x: x_prev,
        iterations: max_iter,
        converged: false,
    })
}

fn require_certified(p: &ComposedProblem, metric: &Metric) -> Result<()> {
    let cm = curvature::applicable_curvature(p)?;
    let margin = curvature::domination_margin(&metric.l, &cm)?;
    let tol = crate::metric::CERTIFICATE_TOL * cm.value.max_abs().max(f64::MIN_POSITIVE);
    if margin < -tol {
        return Err(Error::RefusedUncertifiedMetric { margin });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Algorithm 2

#[derive(Debug, Clone)]
enum LambdaInv {
    Diag(DVector<f64>),
    Dense(CholFactor),
}

impl LambdaInv {
    fn apply(&self, r: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            LambdaInv::Diag(d) => {
                for i in 0..out.len() {
                    out[i] = d[i] * r[i];
                }
            }
            LambdaInv::Dense(ch) => out.copy_from(&ch.solve(r)),
        }
    }
}

/// `blkdiag(L_λ, L_μ)` split of a dual metric with a diagonal `L_μ`.
#[derive(Debug, Clone)]
pub struct DualMetric {
    lam_inv: LambdaInv,
    mu_diag: DVector<f64>,
}

impl DualMetric {
    pub fn split(metric: &Metric, m: usize, p: usize) -> Result<Self> {
        if metric.dim() != m + p {
            return Err(Error::Dimension {
                context: "dual metric".into(),
                expected: m + p,
                got: metric.dim(),
            });
        }
        let l = metric.l.matrix();
        for i in 0..m + p {
            for j in 0..m + p {
                let cross = (i < m) != (j < m);
                let mu_off = i >= m && j >= m && i != j;
                if (cross || mu_off) && l[(i, j)] != 0.0 {
                    return Err(Error::UnsupportedProx(
                        "metric must be blkdiag(L_λ, L_μ) with diagonal L_μ".into(),
                    ));
                }
            }
        }
        let lam = l.view((0, 0), (m, m)).into_owned();
        let lam_inv = if numkern::is_diagonal(&lam) {
            LambdaInv::Diag(lam.diagonal().map(|v| 1.0 / v))
        } else {
            LambdaInv::Dense(numkern::chol_psd(&SymMatrix::symmetrized(lam), ShiftPolicy::exact())?)
        };
        Ok(Self {
            lam_inv,
            mu_diag: DVector::from_iterator(p, (m..m + p).map(|i| l[(i, i)])),
        })
    }
}

/// Reusable state for repeated solves of problems that differ only in
/// `ζ` and `b`.
#[derive(Debug, Clone)]
pub struct FdgmWorkspace {
    inner: InnerMin,
    a: SparseRows,
    b: SparseRows,
    metric: DualMetric,
    l_full: SymMatrix,
    m: usize,
    p: usize,
}

impl FdgmWorkspace {
    /// Factorize offline. The metric must dominate the applicable
    /// curvature unless `allow_uncertified` is set.
    pub fn new(p: &ComposedProblem, metric: &Metric, allow_uncertified: bool) -> Result<Self> {
        if !allow_uncertified {
            require_certified(p, metric)?;
        }
        Ok(Self {
            inner: InnerMin::new(p)?,
            a: SparseRows::from_dense(&p.eq.a),
            b: SparseRows::from_dense(&p.g.b),
            metric: DualMetric::split(metric, p.m(), p.p())?,
            l_full: metric.l.clone(),
            m: p.m(),
            p: p.p(),
        })
    }

    /// New online data; the factorizations are kept.
    pub fn refresh(&mut self, p: &ComposedProblem) {
        self.inner.refresh(p);
    }

    pub fn factorizations(&self) -> usize {
        self.inner.factorizations()
    }

    pub fn inner(&self) -> &InnerMin {
        &self.inner
    }

    pub fn metric_matrix(&self) -> &SymMatrix {
        &self.l_full
    }

    pub fn run(
        &self,
        prob: &ComposedProblem,
        nu0: Option<&DVector<f64>>,
        opts: &RunOptions,
    ) -> Result<DualOutcome> {
        let (m, p, n) = (self.m, self.p, prob.n());
        let nu0 = match nu0 {
            Some(v) if v.len() != m + p => {
                return Err(Error::Dimension {
                    context: "initial dual".into(),
                    expected: m + p,
                    got: v.len(),
                })
            }
            Some(v) => v.clone(),
            None => DVector::zeros(m + p),
        };
        let box_bounds = match &prob.g.kind {
            GKind::Box { lo, hi } => Some((lo, hi)),
            GKind::Zero => None,
        };
        let b_rhs = &prob.eq.b;

        let mut z = nu0.rows(0, m).into_owned();
        let mut v = nu0.rows(m, p).into_owned();
        let mut lam_prev = z.clone();
        let mut mu_prev = v.clone();
        let mut lam = DVector::zeros(m);
        let mut mu = DVector::zeros(p);
        let mut lin = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        let mut r = DVector::zeros(m);
        let mut step = DVector::zeros(m);
        let mut by = DVector::zeros(p);
        let mut t = 1.0;
        let mut log = SolveLog::default();

        for k in 1..=opts.max_iter {
            // y = argmin f + h + zᵀAy + vᵀBy
            lin.copy_from(&prob.cost.zeta);
            self.a.tr_mul_add_into(1.0, &z, &mut lin);
            self.b.tr_mul_add_into(1.0, &v, &mut lin);
            self.inner.minimize(&lin, &mut y);

            // λ = z + L_λ⁻¹(Ay − b)
            self.a.mul_into(&y, &mut r);
            r -= b_rhs;
            self.metric.lam_inv.apply(&r, &mut step);
            lam.copy_from(&z);
            lam += &step;

            // μ = prox_{g⋆}^{L_μ}(v + L_μ⁻¹By)
            self.b.mul_into(&y, &mut by);
            let ineq_res = match box_bounds {
                Some((lo, hi)) => {
                    prox::support_prox_box_into(lo, hi, &self.metric.mu_diag, &v, Some(&by), &mut mu);
                    bound_violation(&by, lo, hi)
                }
                None => {
                    mu.fill(0.0);
                    0.0
                }
            };

            let eq_res = if m > 0 { r.amax() } else { 0.0 };
            let fp_res = {
                let dl = if m > 0 { (&lam - &lam_prev).amax() } else { 0.0 };
                let dm = if p > 0 { (&mu - &mu_prev).amax() } else { 0.0 };
                dl.max(dm)
            };

            if opts.record_log {
                let dual = if opts.record_dual {
                    Some(dual_objective(prob, &self.inner, &stack(&lam, &mu))?)
                } else {
                    None
                };
                log.push(LogEntry {
                    k,
                    dual,
                    eq_res,
                    ineq_res,
                    fp_res,
                    rel_err: opts.reference.as_ref().map(|ys| rel_err(&y, ys)),
                });
            }

            let done = match &opts.stop {
                StopRule::Library(tol) => {
                    eq_res <= tol.eq && ineq_res <= tol.ineq && fp_res <= tol.fp
                }
                StopRule::Oracle { y_star, rel } => oracle_met(&y, y_star, *rel),
                StopRule::Exhaust => false,
            };
            if done || k == opts.max_iter {
                return Ok(DualOutcome {
                    algorithm: "fdgm",
                    y,
                    lambda: lam,
                    mu,
                    iterations: k,
                    converged: done,
                    eq_res,
                    ineq_res,
                    log,
                });
            }

            let t_next = momentum_next(t);
            let beta = (t - 1.0) / t_next;
            z.copy_from(&lam);
            z.axpy(-beta, &lam_prev, 1.0 + beta);
            v.copy_from(&mu);
            v.axpy(-beta, &mu_prev, 1.0 + beta);
            std::mem::swap(&mut lam_prev, &mut lam);
            std::mem::swap(&mut mu_prev, &mut mu);
            t = t_next;
        }
        // Only reached for max_iter == 0.
        Ok(DualOutcome {
            algorithm: "fdgm",
            y,
            lambda: nu0.rows(0, m).into_owned(),
            mu: nu0.rows(m, p).into_owned(),
            iterations: 0,
            converged: false,
            eq_res: f64::INFINITY,
            ineq_res: f64::INFINITY,
            log,
        })
    }
}

/// Generalized fast dual gradient method, one-shot form.
pub fn fdgm_run(
    p: &ComposedProblem,
    metric: &Metric,
    nu0: Option<&DVector<f64>>,
    opts: &RunOptions,
    allow_uncertified: bool,
) -> Result<DualOutcome> {
    FdgmWorkspace::new(p, metric, allow_uncertified)?.run(p, nu0, opts)
}

/// Algorithm 1 run directly on `−d + g⋆` with the generic prox of
/// `ψ(λ, μ) = σ_{{0}×D}(λ, μ)`. Same iterates as [`fdgm_run`] up to
/// rounding but with a dense prox; kept as a cross-check. Residuals are
/// taken at `x⋆(νᵏ)`.
pub fn fgm_dual_run(
    p: &ComposedProblem,
    metric: &Metric,
    opts: &RunOptions,
    allow_uncertified: bool,
) -> Result<DualOutcome> {
    if !allow_uncertified {
        require_certified(p, metric)?;
    }
    let (m, dim) = (p.m(), p.dual_dim());
    let inner = InnerMin::new(p)?;
    let (mut lo, mut hi) = (DVector::zeros(dim), DVector::zeros(dim));
    let g_box = match &p.g.kind {
        GKind::Box { lo: dl, hi: dh } => {
            lo.rows_mut(m, p.p()).copy_from(dl);
            hi.rows_mut(m, p.p()).copy_from(dh);
            Some((dl, dh))
        }
        // g = 0 has g⋆ = I_{0}: μ stays at the origin.
        GKind::Zero => None,
    };
    let psi = ProxFn::SupportOfBox { lo, hi };
    let grad = |nu: &DVector<f64>| -eval_dual_with(p, &inner, nu).map(|e| e.grad).unwrap_or_else(|_| DVector::zeros(dim));

    let mut log = SolveLog::default();
    let mut prev = DVector::zeros(dim);
    let mut last = (DVector::zeros(p.n()), f64::INFINITY, f64::INFINITY);
    let mut failure = None;
    let stop = |k: usize, nu: &DVector<f64>| -> bool {
        let e = match eval_dual_with(p, &inner, nu) {
            Ok(e) => e,
            Err(err) => {
                failure = Some(err);
                return true;
            }
        };
        let eq_res = if m > 0 { e.grad.rows(0, m).amax() } else { 0.0 };
        let ineq_res = g_box.map_or(0.0, |(dl, dh)| bound_violation(&(&p.g.b * &e.x), dl, dh));
        let fp_res = (nu - &prev).amax();
        prev.copy_from(nu);
        if opts.record_log {
            let dual = if opts.record_dual {
                dual_objective(p, &inner, nu).ok()
            } else {
                None
            };
            log.push(LogEntry {
                k,
                dual,
                eq_res,
                ineq_res,
                fp_res,
                rel_err: opts.reference.as_ref().map(|ys| rel_err(&e.x, ys)),
            });
        }
        let done = match &opts.stop {
            StopRule::Library(tol) => eq_res <= tol.eq && ineq_res <= tol.ineq && fp_res <= tol.fp,
            StopRule::Oracle { y_star, rel } => oracle_met(&e.x, y_star, *rel),
            StopRule::Exhaust => false,
        };
        last = (e.x, eq_res, ineq_res);
        done
    };
    let out = fgm_run(grad, &psi, metric, &DVector::zeros(dim), opts.max_iter, stop)?;
    if let Some(err) = failure {
        return Err(err);
    }
    let (y, eq_res, ineq_res) = last;
    Ok(DualOutcome {
        algorithm: "fgm",
        y,
        lambda: out.x.rows(0, m).into_owned(),
        mu: out.x.rows(m, p.p()).into_owned(),
        iterations: out.iterations,
        converged: out.converged,
        eq_res,
        ineq_res,
        log,
    })
}

// ---------------------------------------------------------------------------
// ADMM baseline

/// Scaled-form ADMM on `min f(y) + h(y) + g(v)` s.t. `By = v`, update order
/// y → v → w, unit relaxation. `μ = ρw` is reported as the multiplier.
#[derive(Debug, Clone)]
pub struct AdmmWorkspace {
    rho: f64,
    inner: InnerMin,
    b: SparseRows,
}

impl AdmmWorkspace {
    pub fn new(p: &ComposedProblem, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Validation(format!("ADMM penalty must be positive, got {rho}")));
        }
        if p.m() > 0 {
            return Err(Error::UnsupportedInner(
                "ADMM baseline expects the equality inside h".into(),
            ));
        }
        if !matches!(p.h, HTerm::Zero | HTerm::Equality(_)) {
            return Err(Error::UnsupportedInner(format!(
                "ADMM y-update has no closed form for {} h",
                p.h.kind_name()
            )));
        }
        let bt_b = p.g.b.transpose() * &p.g.b * rho;
        let h_rho = SymMatrix::symmetrized(p.cost.h.matrix() + bt_b);
        let mut shifted = p.clone();
        shifted.cost.h = h_rho;
        Ok(Self {
            rho,
            inner: InnerMin::new(&shifted)?,
            b: SparseRows::from_dense(&p.g.b),
        })
    }

    pub fn refresh(&mut self, p: &ComposedProblem) {
        self.inner.refresh(p);
    }

    pub fn factorizations(&self) -> usize {
        self.inner.factorizations()
    }

    pub fn run(&self, prob: &ComposedProblem, w0: Option<&DVector<f64>>, opts: &RunOptions) -> Result<DualOutcome> {
        let (n, p) = (prob.n(), prob.p());
        let rho = self.rho;
        let (lo, hi) = match &prob.g.kind {
            GKind::Box { lo, hi } => (lo.clone(), hi.clone()),
            GKind::Zero => (DVector::zeros(p), DVector::zeros(p)),
        };
        let mut w = w0.map_or_else(|| DVector::zeros(p), |m| m / rho);
        let mut v = DVector::zeros(p);
        let mut v_prev = DVector::zeros(p);
        let mut y = DVector::zeros(n);
        let mut by = DVector::zeros(p);
        let mut lin = DVector::zeros(n);
        let mut tmp = DVector::zeros(p);
        let mut log = SolveLog::default();
        let mut tdv = DVector::zeros(n);
        for k in 1..=opts.max_iter.max(1) {
            // y = argmin f + h + ρ/2‖By − v + w‖²
            tmp.copy_from(&w);
            tmp -= &v;
            lin.copy_from(&prob.cost.zeta);
            self.b.tr_mul_add_into(rho, &tmp, &mut lin);
            self.inner.minimize(&lin, &mut y);
            self.b.mul_into(&y, &mut by);
            std::mem::swap(&mut v, &mut v_prev);
            for i in 0..p {
                v[i] = (by[i] + w[i]).max(lo[i]).min(hi[i]);
            }
            for i in 0..p {
                w[i] += by[i] - v[i];
            }
            let primal = if p > 0 { (&by - &v).amax() } else { 0.0 };
            tmp.copy_from(&v);
            tmp -= &v_prev;
            self.b.tr_mul_into(&tmp, &mut tdv);
            let dual_res = rho * if n > 0 { tdv.amax() } else { 0.0 };
            let ineq_res = bound_violation(&by, &lo, &hi);

            if opts.record_log {
                log.push(LogEntry {
                    k,
                    dual: None,
                    eq_res: primal,
                    ineq_res,
                    fp_res: dual_res,
                    rel_err: opts.reference.as_ref().map(|ys| rel_err(&y, ys)),
                });
            }
            let done = match &opts.stop {
                StopRule::Library(tol) => primal <= tol.ineq && dual_res <= tol.eq,
                StopRule::Oracle { y_star, rel } => oracle_met(&y, y_star, *rel),
                StopRule::Exhaust => false,
            };
            if done || k >= opts.max_iter {
                return Ok(DualOutcome {
                    algorithm: "admm",
                    y,
                    lambda: DVector::zeros(0),
                    mu: &w * rho,
                    iterations: k,
                    converged: done,
                    eq_res: primal,
                    ineq_res,
                    log,
                });
            }
        }
        unreachable!("loop returns on its last iteration")
    }
}

pub fn admm_run(p: &ComposedProblem, rho: f64, opts: &RunOptions) -> Result<DualOutcome> {
    AdmmWorkspace::new(p, rho)?.run(p, None, opts)
}

// ---------------------------------------------------------------------------
// Rate certificate

#[derive(Debug, Clone)]
pub struct RateReport {
    /// Iterations where `D(ν⋆) − D(νᵏ)` exceeded the envelope.
    pub violations: Vec<usize>,
    pub checked: usize,
    /// `‖ν⋆ − ν⁰‖²_L`.
    pub radius_sq: f64,
}

impl RateReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `D(ν⋆) − D(νᵏ) ≤ 2‖ν⋆ − ν⁰‖²_L / (k + 1)²` on a dual trace.
pub fn certify_rate(
    trace: &[(usize, f64)],
    d_star: f64,
    metric: &Metric,
    nu_star: &DVector<f64>,
    nu0: &DVector<f64>,
) -> RateReport {
    let diff = nu_star - nu0;
    let radius_sq = metric.norm_sq(&diff);
    let slack = 1e-12 * (1.0 + d_star.abs());
    let violations = trace
        .iter()
        .filter(|&&(k, dk)| {
            let kk = (k + 1) as f64;
            d_star - dk > 2.0 * radius_sq / (kk * kk) * (1.0 + 1e-6) + slack
        })
        .map(|&(k, _)| k)
        .collect();
    RateReport {
        violations,
        checked: trace.len(),
        radius_sq,
    }
}

// ---------------------------------------------------------------------------
// Result files

/// `#key=value` header lines followed by `k,D,eq_res,ineq_res,rel_err_if_ref`.
pub fn result_csv(outcome: &DualOutcome, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "#converged={}", outcome.converged);
    let _ = writeln!(s, "#iterations={}", outcome.iterations);
    let _ = writeln!(s, "#algorithm={}", outcome.algorithm);
    let _ = writeln!(s, "#final_eq_res={:e}", outcome.eq_res);
    let _ = writeln!(s, "#final_ineq_res={:e}", outcome.ineq_res);
    for (k, v) in extra {
        let _ = writeln!(s, "#{k}={v}");
    }
    s.push_str("k,D,eq_res,ineq_res,rel_err_if_ref\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for e in outcome.log.entries() {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{}",
            e.k,
            opt(e.dual),
            e.eq_res,
            e.ineq_res,
            opt(e.rel_err)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{select_metric, scalar_metric, SelectOptions, StructurePattern};
    use crate::problem::{AffineEq, GTerm, QuadCost};
    use nalgebra::{dmatrix, dvector};

    fn one_d(box_lo: f64, box_hi: f64) -> ComposedProblem {
        ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(1), dvector![0.0]).unwrap(),
            HTerm::Box {
                lo: dvector![box_lo],
                hi: dvector![box_hi],
            },
            Some(AffineEq::new(dmatrix![1.0], dvector![1.0]).unwrap()),
            GTerm::none(1),
        )
        .unwrap()
    }

    #[test]
    fn momentum_lower_bound() {
        let mut t = 1.0;
        for k in 1..1000 {
            assert!(t >= (k as f64 + 1.0) / 2.0);
            t = momentum_next(t);
        }
    }

    #[test]
    fn dual_at_zero_unconstrained() {
        let p = one_d(f64::NEG_INFINITY, f64::INFINITY);
        let e = eval_dual(&p, &dvector![0.0]).unwrap();
        assert_eq!(e.x[0], 0.0);
        assert_eq!(e.d, 0.0);
    }

    #[test]
    fn dual_one_dimensional_calculus() {
        let p = one_d(f64::NEG_INFINITY, f64::INFINITY);
        for lam in [-2.0, 0.5, 3.0] {
            let e = eval_dual(&p, &dvector![lam]).unwrap();
            assert!((e.x[0] + lam).abs() < 1e-15);
            assert!((e.d - (-0.5 * lam * lam - lam)).abs() < 1e-14);
            assert!((e.grad[0] - (-lam - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_metric_newton_step() {
        let p = ComposedProblem::new(
            QuadCost::new(
                SymMatrix::new(dmatrix![2.0, 0.3, 0.0; 0.3, 1.0, 0.1; 0.0, 0.1, 4.0]).unwrap(),
                dvector![1.0, -2.0, 0.5],
            )
            .unwrap(),
            HTerm::Zero,
            Some(AffineEq::new(dmatrix![1.0, 1.0, 0.0; 0.0, 1.0, -1.0], dvector![1.0, 2.0]).unwrap()),
            GTerm::none(3),
        )
        .unwrap();
        let cm = curvature::curvature_general(&p).unwrap();
        let metric = select_metric(&cm, &StructurePattern::Full, &SelectOptions::default()).unwrap();
        let opts = RunOptions {
            max_iter: 1,
            stop: StopRule::Exhaust,
            ..RunOptions::default()
        };
        let out = fdgm_run(&p, &metric, None, &opts, false).unwrap();
        let e = eval_dual(&p, &out.lambda).unwrap();
        assert!(e.grad.amax() < 1e-8, "{}", e.grad);
    }

    #[test]
    fn uncertified_metric_refused() {
        let p = one_d(-10.0, 10.0);
        let cm = curvature::curvature_general(&p).unwrap();
        let half = Metric::unchecked(SymMatrix::from_diagonal(&dvector![0.5]), StructurePattern::Diagonal).unwrap();
        assert!(matches!(
            fdgm_run(&p, &half, None, &RunOptions::default(), false),
            Err(Error::RefusedUncertifiedMetric { .. })
        ));
        assert!(fdgm_run(&p, &half, None, &RunOptions::default(), true).is_ok());
        assert!(fdgm_run(&p, &scalar_metric(&cm).unwrap(), None, &RunOptions::default(), false).is_ok());
    }

    #[test]
    fn fgm_quadratic_with_exact_metric() {
        let hm = SymMatrix::new(dmatrix![3.0, 1.0; 1.0, 2.0]).unwrap();
        let target = dvector![1.0, -1.0];
        let metric = Metric::unchecked(hm.clone(), StructurePattern::Full).unwrap();
        let out = fgm_run(
            |x| hm.matrix() * (x - &target),
            &ProxFn::Zero,
            &metric,
            &dvector![10.0, 10.0],
            5,
            |_, x| (x - &target).amax() < 1e-12,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn fgm_projected_minimizer() {
        let metric = Metric::unchecked(SymMatrix::identity(1), StructurePattern::Diagonal).unwrap();
        let psi = ProxFn::BoxIndicator {
            lo: dvector![1.0],
            hi: dvector![2.0],
        };
        let out = fgm_run(|x| x.clone(), &psi, &metric, &dvector![5.0], 50, |_, x| x[0] == 1.0).unwrap();
        assert!(out.converged);
        assert_eq!(out.x[0], 1.0);
    }

    #[test]
    fn admm_without_coupling_is_one_step() {
        let p = ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(2), dvector![1.0, -2.0]).unwrap(),
            HTerm::Zero,
            None,
            GTerm::none(2),
        )
        .unwrap();
        let out = admm_run(&p, 3.0, &RunOptions::default()).unwrap();
        assert!(out.converged && out.iterations <= 5);
        assert!((out.y - dvector![-1.0, 2.0]).amax() < 1e-8);
    }

    #[test]
    fn admm_one_d_box() {
        let p = ComposedProblem::new(
            QuadCost::new(SymMatrix::identity(1), dvector![-3.0]).unwrap(),
            HTerm::Zero,
            None,
            GTerm {
                b: dmatrix![1.0],
                kind: GKind::Box {
                    lo: dvector![-1.0],
                    hi: dvector![1.0],
                },
            },
        )
        .unwrap();
        let out = admm_run(
            &p,
            1.0,
            &RunOptions {
                stop: StopRule::Library(Tolerances {
                    eq: 1e-12,
                    ineq: 1e-12,
                    fp: 1e-12,
                }),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.y[0] - 1.0).abs() < 1e-10);
        assert!((out.mu[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn csv_header() {
        let p = one_d(-10.0, 10.0);
        let cm = curvature::curvature_general(&p).unwrap();
        let out = fdgm_run(
            &p,
            &scalar_metric(&cm).unwrap(),
            None,
            &RunOptions {
                record_log: true,
                record_dual: true,
                ..RunOptions::default()
            },
            false,
        )
        .unwrap();
        let csv = result_csv(&out, &[("rho", "3".into())]);
        assert!(csv.starts_with("#converged=true\n"));
        assert!(csv.contains("#rho=3\n"));
        assert!(csv.contains("k,D,eq_res,ineq_res,rel_err_if_ref\n1,"));
    }
}
