//! Offline selection of a structured metric `L ⪰ C P Cᵀ`.
//!
//! The objective is the ratio `λ₁/λ_r` of the nonzero eigenvalues of the
//! preconditioned curvature `D C P Cᵀ Dᵀ` with `L = (DᵀD)⁻¹`. Three cases:
//!
//! - C1, `CPCᵀ ≻ 0`: minimize `t` s.t. `t·CPCᵀ ⪰ L ⪰ CPCᵀ`.
//! - C2, `QCᵀCQᵀ ≻ 0`: maximize `t` s.t. `tI ⪯ QCᵀMCQᵀ ⪯ I`, `L = M⁻¹`.
//! - C3, otherwise: as C2 with the lower bound taken on `ΦᵀQCᵀMCQᵀΦ`,
//!   `Φ` an orthonormal basis of `range(QCᵀ)`.
//!
//! The SDPs are solved by [`sdp_solve`], a small log-barrier method.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureMatrix, PSource};
use crate::error::{Error, Result};
use crate::numkern::{self, CholFactor, ShiftPolicy, SymMatrix, RANK_TOL};

// ---------------------------------------------------------------------------
// Patterns

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructurePattern {
    Diagonal,
    /// Consecutive dense diagonal blocks; a size-1 block is a diagonal entry.
    BlockDiagonal { blocks: Vec<usize> },
    Full,
}

impl StructurePattern {
    /// `blkdiag(L_λ, L_μ)` with a dense `L_λ` and diagonal `L_μ`.
    pub fn dual_split(m: usize, p: usize) -> Self {
        let mut blocks = Vec::with_capacity(1 + p);
        if m > 0 {
            blocks.push(m);
        }
        blocks.extend(std::iter::repeat_n(1, p));
        StructurePattern::BlockDiagonal { blocks }
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if let StructurePattern::BlockDiagonal { blocks } = self {
            let total: usize = blocks.iter().sum();
            if total != dim || blocks.contains(&0) {
                return Err(Error::Validation(format!(
                    "block sizes {blocks:?} do not partition dimension {dim}"
                )));
            }
        }
        Ok(())
    }

    /// Block id of every index.
    fn block_ids(&self, dim: usize) -> Vec<usize> {
        match self {
            StructurePattern::Diagonal => (0..dim).collect(),
            StructurePattern::Full => vec![0; dim],
            StructurePattern::BlockDiagonal { blocks } => blocks
                .iter()
                .enumerate()
                .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
                .collect(),
        }
    }

    /// Allowed entries `(i, j)` with `i ≤ j`.
    pub fn entries(&self, dim: usize) -> Vec<(usize, usize)> {
        let ids = self.block_ids(dim);
        let mut out = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                if ids[i] == ids[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Whether `m` vanishes outside the pattern, up to `tol·‖m‖_max`.
    pub fn fits(&self, m: &DMatrix<f64>, tol: f64) -> bool {
        let ids = self.block_ids(m.nrows());
        let lim = tol * numkern::max_abs(m);
        (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| ids[i] == ids[j] || m[(i, j)].abs() <= lim))
    }

    /// Zero every entry outside the pattern.
    pub fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let ids = self.block_ids(m.nrows());
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            if ids[i] == ids[j] {
                m[(i, j)]
            } else {
                0.0
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            StructurePattern::Diagonal => "diagonal".into(),
            StructurePattern::Full => "full".into(),
            StructurePattern::BlockDiagonal { blocks } => format!("block{blocks:?}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Cases

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    C1,
    C2,
    C3,
}

#[derive(Debug, Clone)]
pub struct CaseInfo {
    pub case: Case,
    /// `rank(CPCᵀ) = rank(QCᵀ)`.
    pub rank: usize,
    pub dim: usize,
    pub q: usize,
}

pub fn classify_case(cm: &CurvatureMatrix) -> CaseInfo {
    let w = cm.cq();
    let rank = numkern::range_basis(&w, RANK_TOL).rank;
    let (dim, q) = (cm.dim(), cm.q());
    let case = if rank == dim {
        Case::C1
    } else if rank == q {
        Case::C2
    } else {
        Case::C3
    };
    CaseInfo { case, rank, dim, q }
}

// ---------------------------------------------------------------------------
// Metric

#[derive(Debug, Clone)]
pub struct Metric {
    pub l: SymMatrix,
    chol: CholFactor,
    pub pattern: StructurePattern,
    pub achieved_ratio: f64,
    /// `min eig(L − CPCᵀ)`.
    pub certificate_margin: f64,
    pub case: Option<Case>,
    pub source: Option<PSource>,
    pub warnings: Vec<String>,
}

/// Relative tolerance on the certificate `L ⪰ CPCᵀ`.
pub const CERTIFICATE_TOL: f64 = 1e-8;

impl Metric {
    /// Wrap an explicit `L`, computing ratio and certificate against `cm`.
    pub fn from_matrix(l: SymMatrix, cm: &CurvatureMatrix, pattern: StructurePattern) -> Result<Self> {
        pattern.check(l.n())?;
        if l.n() != cm.dim() {
            return Err(Error::Dimension {
                context: "metric vs curvature".into(),
                expected: cm.dim(),
                got: l.n(),
            });
        }
        if !pattern.fits(l.matrix(), 0.0) {
            return Err(Error::Validation(format!(
                "metric has entries outside the {} pattern",
                pattern.label()
            )));
        }
        let chol = numkern::chol_psd(&l, ShiftPolicy::exact()).map_err(|_| {
            Error::Validation("metric is not positive definite".into())
        })?;
        let achieved_ratio = preconditioned_ratio(&chol, cm)?;
        let certificate_margin = crate::curvature::domination_margin(&l, cm)?;
        Ok(Self {
            l,
            chol,
            pattern,
            achieved_ratio,
            certificate_margin,
            case: None,
            source: Some(cm.source),
            warnings: Vec::new(),
        })
    }

    /// Wrap `L` without a curvature reference (ratio and margin unknown).
    pub fn unchecked(l: SymMatrix, pattern: StructurePattern) -> Result<Self> {
        pattern.check(l.n())?;
        let chol = numkern::chol_psd(&l, ShiftPolicy::exact())
            .map_err(|_| Error::Validation("metric is not positive definite".into()))?;
        Ok(Self {
            l,
            chol,
            pattern,
            achieved_ratio: f64::NAN,
            certificate_margin: f64::NAN,
            case: None,
            source: None,
            warnings: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.l.n()
    }

    pub fn is_certified(&self, cm: &CurvatureMatrix) -> bool {
        self.certificate_margin >= -CERTIFICATE_TOL * cm.value.max_abs().max(f64::MIN_POSITIVE)
    }

    /// `L⁻¹ x`.
    pub fn apply_inv(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(x)
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    /// `‖x‖²_L`.
    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        self.l.quad(x)
    }
}

/// `λ₁/λ_r` of `R⁻¹ CPCᵀ R⁻ᵀ` where `L = RRᵀ` and `r = rank(CPCᵀ)`.
fn preconditioned_ratio(chol: &CholFactor, cm: &CurvatureMatrix) -> Result<f64> {
    let r = numkern::range_basis(&cm.cq(), RANK_TOL).rank;
    if r == 0 {
        return Ok(1.0);
    }
    let rl = chol.l();
    let lower = rl
        .solve_lower_triangular(&cm.value)
        .ok_or_else(|| Error::Validation("singular metric factor".into()))?;
    let pre = rl
        .solve_lower_triangular(&lower.transpose())
        .ok_or_else(|| Error::Validation("singular metric factor".into()))?;
    let eig = numkern::sym_eig(&SymMatrix::symmetrized(pre))?;
    let d = eig.values.len();
    Ok(eig.values[d - 1] / eig.values[d - r])
}

/// `L = ‖CPCᵀ‖₂·I`.
pub fn scalar_metric(cm: &CurvatureMatrix) -> Result<Metric> {
    let top = numkern::max_eig(&cm.value)?;
    let top = if top > 0.0 { top } else { 1.0 };
    let l = SymMatrix::from_diagonal(&DVector::from_element(cm.dim(), top));
    let mut m = Metric::from_matrix(l, cm, StructurePattern::Diagonal)?;
    // Exact by construction; the eigen route only adds rounding noise.
    m.certificate_margin = m.certificate_margin.max(0.0);
    m.case = Some(classify_case(cm).case);
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub sdp: SdpOptions,
    /// Multiplicative inflation of the returned `L`.
    pub inflation: f64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            sdp: SdpOptions::default(),
            inflation: 1.0 + 1e-9,
        }
    }
}

pub fn select_metric(
    cm: &CurvatureMatrix,
    pattern: &StructurePattern,
    opts: &SelectOptions,
) -> Result<Metric> {
    let dim = cm.dim();
    pattern.check(dim)?;
    let info = classify_case(cm);
    if dim == 0 {
        return Err(Error::Validation("empty dual space".into()));
    }
    if info.rank == 0 {
        // Zero curvature: any PD L certifies; the identity is as good as any.
        let mut m = Metric::from_matrix(SymMatrix::identity(dim), cm, pattern.clone())?;
        m.case = Some(info.case);
        return Ok(m);
    }

    let (l_raw, mut warnings) = match info.case {
        Case::C1 if pattern.fits(cm.value.matrix(), 1e-14) => {
            (pattern.project(cm.value.matrix()), Vec::new())
        }
        Case::C1 => solve_c1(cm, pattern, &opts.sdp)?,
        Case::C2 | Case::C3 => solve_c23(cm, pattern, &info, &opts.sdp)?,
    };
    let l = SymMatrix::symmetrized(l_raw * opts.inflation);
    let mut metric = Metric::from_matrix(l, cm, pattern.clone())?;
    metric.case = Some(info.case);

    let scalar = scalar_metric(cm)?;
    if !metric.is_certified(cm) || !(metric.achieved_ratio <= scalar.achieved_ratio * (1.0 + 1e-9))
    {
        warnings.push(format!(
            "selected metric (ratio {:.6e}, margin {:.3e}) no better than scalar (ratio {:.6e}); \
             falling back to the scalar metric",
            metric.achieved_ratio, metric.certificate_margin, scalar.achieved_ratio
        ));
        let mut s = scalar;
        s.warnings = warnings;
        return Ok(s);
    }
    metric.warnings = warnings;
    Ok(metric)
}

fn sym_basis(dim: usize, i: usize, j: usize) -> SymTerm {
    if i == j {
        let mut u = DMatrix::zeros(dim, 1);
        u[(i, 0)] = 1.0;
        SymTerm::new(u, DMatrix::from_element(1, 1, 1.0))
    } else {
        let mut u = DMatrix::zeros(dim, 2);
        u[(i, 0)] = 1.0;
        u[(j, 1)] = 1.0;
        SymTerm::new(u, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
    }
}

fn fill_from(entries: &[(usize, usize)], x: &DVector<f64>, dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for (k, &(i, j)) in entries.iter().enumerate() {
        m[(i, j)] = x[k];
        m[(j, i)] = x[k];
    }
    m
}

type Solved = (DMatrix<f64>, Vec<String>);

fn solve_c1(cm: &CurvatureMatrix, pattern: &StructurePattern, opts: &SdpOptions) -> Result<Solved> {
    let dim = cm.dim();
    // Jacobi scaling leaves the pattern and the ratio unchanged.
    let sc = DVector::from_iterator(dim, (0..dim).map(|i| 1.0 / cm.value[(i, i)].sqrt()));
    let a = DMatrix::from_fn(dim, dim, |i, j| sc[i] * cm.value[(i, j)] * sc[j]);
    let a = SymMatrix::symmetrized(a);
    let eig = numkern::sym_eig(&a)?;
    let entries = pattern.entries(dim);
    let nv = entries.len() + 1;
    let t_idx = entries.len();

    // F1 = t·A − L ⪰ 0,  F2 = L − A ⪰ 0
    let mut f1 = Lmi::new(DMatrix::zeros(dim, dim));
    let mut f2 = Lmi::new(-a.matrix().clone());
    for (k, &(i, j)) in entries.iter().enumerate() {
        let b = sym_basis(dim, i, j);
        f1.terms.push((k, b.clone().scaled(-1.0)));
        f2.terms.push((k, b));
    }
    f1.terms.push((t_idx, SymTerm::new(DMatrix::identity(dim, dim), a.matrix().clone())));
    let mut c = DVector::zeros(nv);
    c[t_idx] = 1.0;
    let prob = SdpProblem {
        n_vars: nv,
        objective: c,
        lmis: vec![f1, f2],
    };

    let beta = 1.1 * eig.max();
    let mut x0 = DVector::zeros(nv);
    for (k, &(i, j)) in entries.iter().enumerate() {
        if i == j {
            x0[k] = beta;
        }
    }
    x0[t_idx] = 2.0 * beta / eig.min();
    let sol = sdp_solve(&prob, Some(&x0), opts)?;
    let lh = fill_from(&entries, &sol.x, dim);
    let l = DMatrix::from_fn(dim, dim, |i, j| lh[(i, j)] / (sc[i] * sc[j]));
    Ok((l, sol.warnings))
}

/// Fraction of the optimal `t` traded for a well-centred `M` in C2/C3.
pub const CENTER_SLACK: f64 = 1e-2;

fn solve_c23(
    cm: &CurvatureMatrix,
    pattern: &StructurePattern,
    info: &CaseInfo,
    opts: &SdpOptions,
) -> Result<Solved> {
    let dim = cm.dim();
    let w = cm.cq().transpose(); // q × dim, columns w_i = Q c_iᵀ
    let q = w.nrows();
    let norms: Vec<f64> = (0..dim).map(|i| w.column(i).norm()).collect();
    let wmax = norms.iter().copied().fold(0.0, f64::max);
    let live: Vec<bool> = norms.iter().map(|&v| v > RANK_TOL * wmax).collect();
    let ws = DMatrix::from_fn(q, dim, |r, i| if live[i] { w[(r, i)] / norms[i] } else { 0.0 });

    // Restriction for the lower LMI: identity in C2, Φ in C3.
    let phi = match info.case {
        Case::C2 => DMatrix::identity(q, q),
        _ => numkern::range_basis(&ws, RANK_TOL).basis,
    };
    let r = phi.ncols();
    let wphi = phi.transpose() * &ws; // r × dim

    let all_entries = pattern.entries(dim);
    let entries: Vec<(usize, usize)> = all_entries
        .iter()
        .copied()
        .filter(|&(i, j)| live[i] && live[j])
        .collect();
    let nv = entries.len() + 1;
    let t_idx = entries.len();

    // G1 = I − W M Wᵀ ⪰ 0,  G2 = Φᵀ W M Wᵀ Φ − tI ⪰ 0
    let mut g1 = Lmi::new(DMatrix::identity(q, q));
    let mut g2 = Lmi::new(DMatrix::zeros(r, r));
    for (k, &(i, j)) in entries.iter().enumerate() {
        let (u1, u2, s) = if i == j {
            (
                ws.columns(i, 1).into_owned(),
                wphi.columns(i, 1).into_owned(),
                DMatrix::from_element(1, 1, 1.0),
            )
        } else {
            let mut u1 = DMatrix::zeros(q, 2);
            u1.set_column(0, &ws.column(i));
            u1.set_column(1, &ws.column(j));
            let mut u2 = DMatrix::zeros(r, 2);
            u2.set_column(0, &wphi.column(i));
            u2.set_column(1, &wphi.column(j));
            (u1, u2, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
        };
        g1.terms.push((k, SymTerm::new(u1, -&s)));
        g2.terms.push((k, SymTerm::new(u2, s)));
    }
    g2.terms.push((t_idx, SymTerm::new(DMatrix::identity(r, r), -DMatrix::identity(r, r))));
    // G3 = M ⪰ 0 on the live rows; M = L⁻¹ has to stay positive definite.
    let compact: Vec<usize> = (0..dim)
        .scan(0, |next, i| {
            let k = *next;
            *next += usize::from(live[i]);
            Some(k)
        })
        .collect();
    let n_live = live.iter().filter(|&&v| v).count();
    let mut g3 = Lmi::new(DMatrix::zeros(n_live, n_live));
    for (k, &(i, j)) in entries.iter().enumerate() {
        g3.terms.push((k, sym_basis(n_live, compact[i], compact[j])));
    }
    let mut c = DVector::zeros(nv);
    c[t_idx] = -1.0;
    let prob = SdpProblem {
        n_vars: nv,
        objective: c,
        lmis: vec![g1, g2, g3],
    };

    let gram = SymMatrix::symmetrized(&ws * ws.transpose());
    let alpha = 0.5 / numkern::max_eig(&gram)?;
    let restricted = SymMatrix::symmetrized(&wphi * wphi.transpose());
    let mut x0 = DVector::zeros(nv);
    for (k, &(i, j)) in entries.iter().enumerate() {
        if i == j {
            x0[k] = alpha;
        }
    }
    x0[t_idx] = 0.5 * alpha * numkern::min_eig(&restricted)?;
    let mut sol = sdp_solve(&prob, Some(&x0), opts)?;

    // The optimum may sit where M is singular. Give up a sliver of t and
    // take the analytic center of what is left instead.
    let t_star = sol.x[t_idx];
    if t_star > 0.0 {
        let floor = (1.0 - CENTER_SLACK) * t_star;
        let mut keep = Lmi::new(DMatrix::from_element(1, 1, -floor));
        keep.terms.push((t_idx, SymTerm::dense(DMatrix::from_element(1, 1, 1.0))));
        let mut centred = prob.clone();
        centred.objective = DVector::zeros(nv);
        centred.lmis.push(keep);
        let mut x = sol.x.clone();
        x[t_idx] = (1.0 - 0.5 * CENTER_SLACK) * t_star;
        if factor_all(&centred, &x).is_some() {
            match centering(&centred, &mut x, 0.0, opts.max_newton, &|_| false) {
                Ok(_) => sol.x = x,
                Err(e) => sol.warnings.push(format!("analytic centering skipped: {e}")),
            }
        }
    }

    // Undo the column scaling, M = N⁻¹ M̂ N⁻¹, and give dead rows a unit entry.
    let mh = fill_from(&entries, &sol.x, dim);
    let mut m = DMatrix::from_fn(dim, dim, |i, j| {
        if live[i] && live[j] {
            mh[(i, j)] / (norms[i] * norms[j])
        } else {
            0.0
        }
    });
    for i in 0..dim {
        if !live[i] {
            m[(i, i)] = 1.0;
        }
    }
    let m = SymMatrix::symmetrized(m);
    let chol = numkern::chol_psd(&m, ShiftPolicy::exact())?;
    let mut l = chol.inverse();
    // Rows with no curvature accept any positive entry; reuse the largest.
    let fill = (0..dim)
        .filter(|&i| live[i])
        .map(|i| l[(i, i)])
        .fold(0.0_f64, f64::max);
    for i in 0..dim {
        if !live[i] {
            l[(i, i)] = if fill > 0.0 { fill } else { 1.0 };
        }
    }
    Ok((pattern.project(&l), sol.warnings))
}

// ---------------------------------------------------------------------------
// Small SDP solver

/// Symmetric coefficient `U S Uᵀ` kept in factored form.
#[derive(Debug, Clone)]
pub struct SymTerm {
    pub u: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl SymTerm {
    pub fn new(u: DMatrix<f64>, s: DMatrix<f64>) -> Self {
        debug_assert_eq!(u.ncols(), s.nrows());
        Self { u, s }
    }

    /// A dense symmetric coefficient.
    pub fn dense(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        Self::new(DMatrix::identity(n, n), m)
    }

    fn scaled(mut self, a: f64) -> Self {
        self.s *= a;
        self
    }

    fn add_to(&self, f: &mut DMatrix<f64>, x: f64) {
        if x != 0.0 {
            *f += &self.u * (&self.s * x) * self.u.transpose();
        }
    }
}

/// `F(x) = F₀ + Σ_k x_k·U_k S_k U_kᵀ ⪰ 0`.
#[derive(Debug, Clone)]
pub struct Lmi {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, SymTerm)>,
}

impl Lmi {
    pub fn new(constant: DMatrix<f64>) -> Self {
        Self {
            constant,
            terms: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.constant.clone();
        for (k, t) in &self.terms {
            t.add_to(&mut f, x[*k]);
        }
        f
    }
}

/// Minimize `cᵀx` subject to a list of LMIs.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub objective: DVector<f64>,
    pub lmis: Vec<Lmi>,
}

#[derive(Debug, Clone)]
pub struct SdpOptions {
    /// Stop when `(Σ LMI sizes)/τ ≤ gap_tol·max(|cᵀx|, gap_floor)`.
    pub gap_tol: f64,
    pub gap_floor: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    pub var_cap: usize,
    /// Barrier weight growth per outer step.
    pub growth: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            gap_floor: 1e-12,
            max_outer: 80,
            max_newton: 100,
            var_cap: 512,
            growth: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub converged: bool,
    pub newton_steps: usize,
    pub warnings: Vec<String>,
}

/// Cholesky of every LMI at `x`, or `None` if any is not positive definite.
fn factor_all(p: &SdpProblem, x: &DVector<f64>) -> Option<Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>> {
    p.lmis.iter().map(|l| l.eval(x).cholesky()).collect()
}

fn log_det(ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn barrier_value(p: &SdpProblem, x: &DVector<f64>, tau: f64) -> Option<f64> {
    let chols = factor_all(p, x)?;
    Some(tau * p.objective.dot(x) - chols.iter().map(log_det).sum::<f64>())
}

/// Gradient and Hessian of `−Σ log det F_j(x)`.
fn barrier_derivs(
    p: &SdpProblem,
    chols: &[nalgebra::Cholesky<f64, nalgebra::Dyn>],
) -> (DVector<f64>, DMatrix<f64>) {
    let nv = p.n_vars;
    let mut g = DVector::zeros(nv);
    let mut h = DMatrix::zeros(nv, nv);
    for (lmi, ch) in p.lmis.iter().zip(chols) {
        // V_k = F⁻¹ U_k
        let v: Vec<DMatrix<f64>> = lmi.terms.iter().map(|(_, t)| ch.solve(&t.u)).collect();
        for (a, (ka, ta)) in lmi.terms.iter().enumerate() {
            let xaa = ta.u.transpose() * &v[a];
            g[*ka] -= (&ta.s * &xaa).trace();
            for (b, (kb, tb)) in lmi.terms.iter().enumerate().skip(a) {
                // tr(S_a X_ab S_b X_ba), X_ab = U_aᵀ F⁻¹ U_b
                let xab = ta.u.transpose() * &v[b];
                let sa_xab = &ta.s * &xab;
                let sb_xba = &tb.s * xab.transpose();
                let val = (sa_xab * sb_xba).trace();
                h[(*ka, *kb)] += val;
                if a != b {
                    h[(*kb, *ka)] += val;
                }
            }
        }
    }
    (g, h)
}

fn newton_direction(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut reg = 1e-12 * scale;
    for _ in 0..8 {
        let hr = h + DMatrix::identity(h.nrows(), h.ncols()) * reg;
        if let Some(ch) = hr.cholesky() {
            return Some(ch.solve(rhs));
        }
        reg *= 100.0;
    }
    None
}

/// Minimize `τ cᵀx − Σ log det F_j(x)` from a strictly feasible `x`.
/// Returns the number of Newton steps taken.
fn centering(
    p: &SdpProblem,
    x: &mut DVector<f64>,
    tau: f64,
    max_newton: usize,
    done: &dyn Fn(&DVector<f64>) -> bool,
) -> Result<usize> {
    for step in 0..max_newton {
        if done(x) {
            return Ok(step);
        }
        let chols = factor_all(p, x).ok_or_else(|| Error::SdpNonConvergence {
            reason: "iterate left the feasible region".into(),
        })?;
        let (gb, h) = barrier_derivs(p, &chols);
        let g = &p.objective * tau + gb;
        let Some(dx) = newton_direction(&h, &(-&g)) else {
            return Err(Error::SdpNonConvergence {
                reason: "singular Newton system".into(),
            });
        };
        let dec = -g.dot(&dx);
        if dec <= 1e-10 {
            return Ok(step);
        }
        let f0 = tau * p.objective.dot(x) - chols.iter().map(log_det).sum::<f64>();
        let mut alpha = 1.0;
        loop {
            let trial = &*x + &dx * alpha;
            if let Some(f) = barrier_value(p, &trial, tau) {
                if f <= f0 - 0.25 * alpha * dec {
                    *x = trial;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                return Ok(step);
            }
        }
        if x.amax() > 1e15 {
            return Err(Error::SdpNonConvergence {
                reason: "objective appears unbounded".into(),
            });
        }
    }
    Ok(max_newton)
}

/// Phase I: find `x` with every `F_j(x) ≻ 0`, or report infeasibility.
fn phase_one(p: &SdpProblem, x0: &DVector<f64>, opts: &SdpOptions) -> Result<DVector<f64>> {
    let nv = p.n_vars;
    let s_idx = nv;
    let worst = p
        .lmis
        .iter()
        .map(|l| {
            let f = SymMatrix::symmetrized(l.eval(x0));
            numkern::min_eig(&f)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let mut lmis: Vec<Lmi> = p
        .lmis
        .iter()
        .map(|l| {
            let mut l2 = l.clone();
            let n = l.size();
            l2.terms.push((s_idx, SymTerm::dense(DMatrix::identity(n, n))));
            l2
        })
        .collect();
    // s ≥ −1 keeps the auxiliary problem bounded.
    let mut bound = Lmi::new(DMatrix::from_element(1, 1, 1.0));
    bound.terms.push((s_idx, SymTerm::dense(DMatrix::from_element(1, 1, 1.0))));
    lmis.push(bound);
    let mut c = DVector::zeros(nv + 1);
    c[s_idx] = 1.0;
    let aux = SdpProblem {
        n_vars: nv + 1,
        objective: c,
        lmis,
    };
    let mut x = DVector::zeros(nv + 1);
    x.rows_mut(0, nv).copy_from(x0);
    x[s_idx] = (-worst).max(0.0) + 1.0;
    let total: usize = aux.lmis.iter().map(Lmi::size).sum();
    let mut tau = 1.0;
    for _ in 0..opts.max_outer {
        // The auxiliary problem may be unbounded in x, so stop at the first
        // strictly feasible point instead of centering fully.
        let found = |x: &DVector<f64>| {
            x[s_idx] < 0.0 && factor_all(p, &x.rows(0, nv).into_owned()).is_some()
        };
        centering(&aux, &mut x, tau, opts.max_newton, &found)?;
        if found(&x) {
            return Ok(x.rows(0, nv).into_owned());
        }
        if total as f64 / tau <= 1e-10 {
            break;
        }
        tau *= opts.growth;
    }
    Err(Error::Infeasible(format!(
        "no strictly feasible point; best auxiliary shift {:.3e}",
        x[s_idx]
    )))
}

pub fn sdp_solve(p: &SdpProblem, x0: Option<&DVector<f64>>, opts: &SdpOptions) -> Result<SdpSolution> {
    if p.n_vars > opts.var_cap {
        return Err(Error::SdpTooLarge {
            vars: p.n_vars,
            cap: opts.var_cap,
        });
    }
    let start = x0.cloned().unwrap_or_else(|| DVector::zeros(p.n_vars));
    let mut x = if factor_all(p, &start).is_some() {
        start
    } else {
        phase_one(p, &start, opts)?
    };
    let total: usize = p.lmis.iter().map(Lmi::size).sum();
    let mut warnings = Vec::new();
    let mut newton_steps = 0;

    // Initial τ balancing the objective against the barrier gradient.
    let chols = factor_all(p, &x).expect("strictly feasible");
    let (gb, _) = barrier_derivs(p, &chols);
    let cn = p.objective.norm();
    let mut tau = if cn > 0.0 { (gb.norm() / cn).clamp(1e-6, 1e6) } else { 1.0 };

    let mut converged = false;
    for _ in 0..opts.max_outer {
        match centering(p, &mut x, tau, opts.max_newton, &|_| false) {
            Ok(s) => newton_steps += s,
            Err(e) => {
                warnings.push(format!("stopped early: {e}"));
                break;
            }
        }
        let obj = p.objective.dot(&x);
        if total as f64 / tau <= opts.gap_tol * obj.abs().max(opts.gap_floor) {
            converged = true;
            break;
        }
        tau *= opts.growth;
    }
    if !converged && warnings.is_empty() {
        warnings.push("barrier iteration cap reached; returning best feasible iterate".into());
    }
    Ok(SdpSolution {
        objective: p.objective.dot(&x),
        x,
        converged,
        newton_steps,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Metric files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricFile {
    pub pattern: StructurePattern,
    pub dim: usize,
    /// Dense row-major `L`.
    #[serde(rename = "L")]
    pub l: Vec<f64>,
    pub achieved_ratio: f64,
    pub certificate_margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<Case>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PSource>,
}

impl MetricFile {
    pub fn from_metric(m: &Metric) -> Self {
        let d = m.dim();
        let mut l = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                l.push(m.l[(i, j)]);
            }
        }
        Self {
            pattern: m.pattern.clone(),
            dim: d,
            l,
            achieved_ratio: m.achieved_ratio,
            certificate_margin: m.certificate_margin,
            case: m.case,
            source: m.source,
        }
    }

    /// Rebuild the metric; ratio and certificate are recomputed when a
    /// curvature is supplied, otherwise taken from the file.
    pub fn into_metric(self, cm: Option<&CurvatureMatrix>) -> Result<Metric> {
        if self.l.len() != self.dim * self.dim {
            return Err(Error::Validation(format!(
                "field `L` has {} entries, expected {}",
                self.l.len(),
                self.dim * self.dim
            )));
        }
        let l = SymMatrix::new(DMatrix::from_row_slice(self.dim, self.dim, &self.l))?;
        let mut m = match cm {
            Some(cm) => Metric::from_matrix(l, cm, self.pattern)?,
            None => {
                let mut m = Metric::unchecked(l, self.pattern)?;
                m.achieved_ratio = self.achieved_ratio;
                m.certificate_margin = self.certificate_margin;
                m.source = self.source;
                m
            }
        };
        m.case = self.case;
        Ok(m)
    }
}

pub fn metric_to_json(m: &Metric) -> String {
    serde_json::to_string_pretty(&MetricFile::from_metric(m)).expect("metric serializes")
}

pub fn metric_from_json(text: &str, cm: Option<&CurvatureMatrix>) -> Result<Metric> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: MetricFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    file.into_metric(cm)
}

pub fn save_metric(m: &Metric, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, metric_to_json(m))?;
    Ok(())
}

pub fn load_metric(path: impl AsRef<Path>, cm: Option<&CurvatureMatrix>) -> Result<Metric> {
    metric_from_json(&std::fs::read_to_string(path)?, cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::psd_factor;
    use nalgebra::{dmatrix, dvector};

    /// Curvature with `C = I` and the given `P`.
    fn cm_of(p: DMatrix<f64>) -> CurvatureMatrix {
        cm_with(DMatrix::identity(p.nrows(), p.nrows()), p)
    }

    fn cm_with(c: DMatrix<f64>, p: DMatrix<f64>) -> CurvatureMatrix {
        let p = SymMatrix::new(p).unwrap();
        let q = psd_factor(&p).unwrap();
        CurvatureMatrix {
            value: p.congruence(&c),
            source: PSource::InverseH,
            p,
            q_factor: q,
            k11: None,
            c,
        }
    }

    #[test]
    fn cases() {
        assert_eq!(classify_case(&cm_of(DMatrix::identity(2, 2))).case, Case::C1);
        let c2 = cm_with(dmatrix![1.0; 1.0], dmatrix![1.0]);
        assert_eq!(classify_case(&c2).case, Case::C2);
        // two identical rows of C over a rank-two P: rank 1 < min(2, 2)
        let c3 = cm_with(dmatrix![1.0, 0.0; 1.0, 0.0], DMatrix::identity(2, 2));
        let info = classify_case(&c3);
        assert_eq!((info.case, info.rank, info.q), (Case::C3, 1, 2));
    }

    #[test]
    fn full_pattern_c1_is_exact() {
        let cm = cm_of(dmatrix![4.0, 1.0; 1.0, 3.0]);
        let m = select_metric(&cm, &StructurePattern::Full, &SelectOptions::default()).unwrap();
        assert!((m.achieved_ratio - 1.0).abs() < 1e-9);
        assert!(m.certificate_margin >= 0.0);
    }

    #[test]
    fn diagonal_target_is_kept() {
        let cm = cm_of(dmatrix![1.0, 0.0; 0.0, 100.0]);
        let m = select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default()).unwrap();
        assert!((m.achieved_ratio - 1.0).abs() < 1e-9);
        let s = scalar_metric(&cm).unwrap();
        assert_eq!(s.l.matrix(), &(DMatrix::identity(2, 2) * 100.0));
        assert!((s.achieved_ratio - 100.0).abs() < 1e-9);
        assert_eq!(s.certificate_margin, 0.0);
    }

    #[test]
    fn diagonal_sdp_on_symmetric_coupling() {
        let cm = cm_of(dmatrix![2.0, 1.0; 1.0, 2.0]);
        let m = select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default()).unwrap();
        assert!(m.achieved_ratio <= 3.0 * (1.0 + 1e-6), "{}", m.achieved_ratio);
        assert!(m.is_certified(&cm));
    }

    #[test]
    fn diagonal_sdp_improves_badly_scaled() {
        let s = dvector![1.0, 30.0, 0.2];
        let base = dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, 0.3; 0.1, 0.3, 1.5];
        let a = DMatrix::from_fn(3, 3, |i, j| s[i] * base[(i, j)] * s[j]);
        let cm = cm_of(a);
        let m = select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default()).unwrap();
        let sc = scalar_metric(&cm).unwrap();
        assert!(m.is_certified(&cm));
        assert!(m.achieved_ratio < 5.0 && sc.achieved_ratio > 1000.0);
    }

    #[test]
    fn c2_diagonal() {
        // C = (1; 2), P = 1: CPCᵀ = [[1,2],[2,4]] is rank one
        let cm = cm_with(dmatrix![1.0; 2.0], dmatrix![1.0]);
        let m = select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default()).unwrap();
        assert!(m.is_certified(&cm), "{}", m.certificate_margin);
        assert!((m.achieved_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sdp_one_variable() {
        // variables (m, t): 4t − m ≥ 0, m − 4 ≥ 0; minimize t
        let mut f1 = Lmi::new(DMatrix::zeros(1, 1));
        f1.terms.push((0, SymTerm::dense(dmatrix![-1.0])));
        f1.terms.push((1, SymTerm::dense(dmatrix![4.0])));
        let mut f2 = Lmi::new(dmatrix![-4.0]);
        f2.terms.push((0, SymTerm::dense(dmatrix![1.0])));
        let p = SdpProblem {
            n_vars: 2,
            objective: dvector![0.0, 1.0],
            lmis: vec![f1, f2],
        };
        let s = sdp_solve(&p, None, &SdpOptions::default()).unwrap();
        assert!(s.converged);
        assert!((s.x[0] - 4.0).abs() < 1e-6 && (s.x[1] - 1.0).abs() < 1e-6, "{}", s.x);
    }

    #[test]
    fn sdp_detects_contradictory_ordering() {
        // diag(l) ⪰ A and diag(l) ⪯ 0.5·A with A ≻ 0
        let a = dmatrix![2.0, 0.5; 0.5, 1.0];
        let mut lo = Lmi::new(-a.clone());
        let mut hi = Lmi::new(a.clone() * 0.5);
        for i in 0..2 {
            let b = sym_basis(2, i, i);
            lo.terms.push((i, b.clone()));
            hi.terms.push((i, b.scaled(-1.0)));
        }
        let p = SdpProblem {
            n_vars: 2,
            objective: dvector![1.0, 1.0],
            lmis: vec![lo, hi],
        };
        assert!(matches!(
            sdp_solve(&p, None, &SdpOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn sdp_variable_cap() {
        let p = SdpProblem {
            n_vars: 600,
            objective: DVector::zeros(600),
            lmis: vec![],
        };
        assert!(matches!(
            sdp_solve(&p, None, &SdpOptions::default()),
            Err(Error::SdpTooLarge { .. })
        ));
    }

    #[test]
    fn pattern_entries() {
        let p = StructurePattern::dual_split(2, 2);
        assert_eq!(p.entries(4), vec![(0, 0), (0, 1), (1, 1), (2, 2), (3, 3)]);
        assert!(StructurePattern::Diagonal.entries(3).len() == 3);
        assert!(StructurePattern::BlockDiagonal { blocks: vec![1, 1] }.check(3).is_err());
    }

    #[test]
    fn metric_file_round_trip() {
        let cm = cm_of(dmatrix![2.0, 1.0; 1.0, 2.0]);
        let m = select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default()).unwrap();
        let back = metric_from_json(&metric_to_json(&m), Some(&cm)).unwrap();
        assert_eq!(back.l, m.l);
        assert!((back.achieved_ratio - m.achieved_ratio).abs() < 1e-12);
    }
}
