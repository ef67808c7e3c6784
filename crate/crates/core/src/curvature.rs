//! Dual curvature matrices `C P Cᵀ` and scalar Lipschitz baselines.
//!
//! Three choices of `P` are covered: `H⁻¹` when the cost is positive
//! definite, the projected inverse `H^{-1/2}(I − M)H^{-1/2}` when `h` is the
//! indicator of `{Ax = b}`, and the upper-left block `K₁₁` of the inverse KKT
//! matrix, which only needs `H` positive definite on `null(A)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{self, kkt_factor, ShiftPolicy, SymMatrix, PD_TOL, PSD_TOL, RANK_TOL};
use crate::problem::ComposedProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSource {
    InverseH,
    ProjectedInverseH,
    KktBlock,
}

impl PSource {
    pub fn label(self) -> &'static str {
        match self {
            PSource::InverseH => "inverse_h",
            PSource::ProjectedInverseH => "projected_inverse_h",
            PSource::KktBlock => "kkt_block",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurvatureMatrix {
    /// `C P Cᵀ`, of size `m + p`.
    pub value: SymMatrix,
    pub source: PSource,
    /// `P` itself (`n × n`).
    pub p: SymMatrix,
    /// `Q` with `P = QᵀQ`; `q × n` with `q = rank(P)` on the projected and
    /// KKT paths.
    pub q_factor: DMatrix<f64>,
    pub k11: Option<SymMatrix>,
    /// The operator `C` the curvature was formed with.
    pub c: DMatrix<f64>,
}

impl CurvatureMatrix {
    pub fn dim(&self) -> usize {
        self.value.n()
    }

    pub fn q(&self) -> usize {
        self.q_factor.nrows()
    }

    /// `C Qᵀ`, so that `C P Cᵀ = (CQᵀ)(CQᵀ)ᵀ`.
    pub fn cq(&self) -> DMatrix<f64> {
        &self.c * self.q_factor.transpose()
    }

    /// Build from an explicit `C` and PSD `P` with a known factor.
    fn assemble(
        c: &DMatrix<f64>,
        p: SymMatrix,
        q_factor: DMatrix<f64>,
        source: PSource,
        k11: Option<SymMatrix>,
    ) -> Self {
        let value = p.congruence(c);
        Self {
            value,
            source,
            p,
            q_factor,
            k11,
            c: c.clone(),
        }
    }
}

fn require_pd_h(p: &ComposedProblem) -> Result<()> {
    let h = &p.cost.h;
    let sigma = numkern::min_eig(h)?;
    if sigma <= PD_TOL * h.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Curvature(format!(
            "H is not positive definite (min eigenvalue {sigma:e}); \
             use the K11 path with an equality-indicator h"
        )));
    }
    Ok(())
}

/// `H^{-1/2}` through the eigendecomposition.
fn inv_sqrt(h: &SymMatrix) -> Result<SymMatrix> {
    Ok(numkern::sym_eig(h)?.map(|v| 1.0 / v.sqrt()))
}

/// `H⁻¹` through Cholesky, which is more accurate than the eigen route on
/// badly conditioned costs.
fn inverse_h(h: &SymMatrix) -> Result<SymMatrix> {
    let chol = numkern::chol_psd(h, ShiftPolicy::exact())?;
    Ok(SymMatrix::symmetrized(chol.inverse()))
}

/// `C H⁻¹ Cᵀ` with `Q = H^{-1/2}`.
pub fn curvature_general(p: &ComposedProblem) -> Result<CurvatureMatrix> {
    curvature_general_with(p, p.c_matrix())
}

/// As [`curvature_general`] for an explicit operator `C`.
pub fn curvature_general_with(p: &ComposedProblem, c: &DMatrix<f64>) -> Result<CurvatureMatrix> {
    require_pd_h(p)?;
    let h = &p.cost.h;
    let q = inv_sqrt(h)?.into_inner();
    Ok(CurvatureMatrix::assemble(
        c,
        inverse_h(h)?,
        q,
        PSource::InverseH,
        None,
    ))
}

fn equality_of(p: &ComposedProblem) -> Result<&DMatrix<f64>> {
    p.h_equality()
        .map(|e| &e.a)
        .ok_or_else(|| Error::Curvature("h is not an equality indicator".into()))
}

fn require_full_row_rank(a: &DMatrix<f64>) -> Result<()> {
    let rank = numkern::range_basis(a, RANK_TOL).rank;
    if rank < a.nrows() {
        return Err(Error::Curvature(format!(
            "A has rank {rank} < {} rows",
            a.nrows()
        )));
    }
    Ok(())
}

/// `C H^{-1/2}(I − M)H^{-1/2} Cᵀ` with `M` the orthogonal projector onto
/// `range(H^{-1/2}Aᵀ)`.
pub fn curvature_projected(p: &ComposedProblem) -> Result<CurvatureMatrix> {
    require_pd_h(p)?;
    let a = equality_of(p)?;
    require_full_row_rank(a)?;
    let his = inv_sqrt(&p.cost.h)?;
    let w = his.matrix() * a.transpose();
    // I − M projects onto null(Wᵀ); with an orthonormal basis U of that
    // space, Q = Uᵀ H^{-1/2} has full row rank.
    let (u, _) = numkern::null_space_basis(&w.transpose(), RANK_TOL);
    let q = u.transpose() * his.matrix();
    let pm = SymMatrix::symmetrized(q.transpose() * &q);
    Ok(CurvatureMatrix::assemble(
        p.c_matrix(),
        pm,
        q,
        PSource::ProjectedInverseH,
        None,
    ))
}

/// `K₁₁` of `[H Aᵀ; A 0]⁻¹`.
pub fn k11_block(h: &SymMatrix, a: &DMatrix<f64>) -> Result<SymMatrix> {
    let kkt = kkt_factor(h, a)?;
    let (k11, _) = kkt.inverse_blocks()?;
    Ok(SymMatrix::symmetrized(k11))
}

/// Rank-revealing factor `Q` with `QᵀQ = P` for a PSD `P`.
pub fn psd_factor(pm: &SymMatrix) -> Result<DMatrix<f64>> {
    let n = pm.n();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = numkern::sym_eig(pm)?;
    let top = eig.max().max(0.0);
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.values[i] > RANK_TOL * top)
        .collect();
    let mut q = DMatrix::zeros(keep.len(), n);
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.values[i].sqrt();
        for j in 0..n {
            q[(row, j)] = s * eig.vectors[(j, i)];
        }
    }
    Ok(q)
}

/// `C K₁₁ Cᵀ`.
pub fn curvature_kkt(p: &ComposedProblem) -> Result<CurvatureMatrix> {
    let a = equality_of(p)?;
    let k11 = k11_block(&p.cost.h, a)?;
    let q = psd_factor(&k11)?;
    Ok(CurvatureMatrix::assemble(
        p.c_matrix(),
        k11.clone(),
        q,
        PSource::KktBlock,
        Some(k11),
    ))
}

/// The tightest curvature the problem structure supports: `K₁₁` for an
/// equality-indicator `h`, `H⁻¹` otherwise.
pub fn applicable_curvature(p: &ComposedProblem) -> Result<CurvatureMatrix> {
    if p.h_equality().is_some() {
        curvature_kkt(p)
    } else {
        curvature_general(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarVariant {
    /// `‖C‖₂² / σ`
    NormOverSigma,
    /// `‖C H⁻¹ Cᵀ‖₂`
    QuadTight,
    /// `‖C K₁₁ Cᵀ‖₂`
    KktTight,
}

pub fn scalar_lipschitz(p: &ComposedProblem, variant: ScalarVariant) -> Result<f64> {
    match variant {
        ScalarVariant::NormOverSigma => {
            let sigma = p.cost.sigma()?;
            if sigma <= PD_TOL * p.cost.h.max_abs() {
                return Err(Error::Curvature(
                    "strong convexity modulus is zero; ‖C‖²/σ is undefined".into(),
                ));
            }
            let nc = numkern::spectral_norm(p.c_matrix());
            Ok(nc * nc / sigma)
        }
        ScalarVariant::QuadTight => numkern::max_eig(&curvature_general(p)?.value),
        ScalarVariant::KktTight => numkern::max_eig(&curvature_kkt(p)?.value),
    }
}

/// True when `min eig(L − CPCᵀ) ≥ −PSD_TOL·‖CPCᵀ‖`.
pub fn dominates(l: &SymMatrix, cm: &CurvatureMatrix) -> Result<bool> {
    Ok(domination_margin(l, cm)? >= -PSD_TOL * cm.value.max_abs().max(1.0))
}

/// `min eig(L − CPCᵀ)`.
pub fn domination_margin(l: &SymMatrix, cm: &CurvatureMatrix) -> Result<f64> {
    let diff = SymMatrix::symmetrized(l.matrix() - cm.value.matrix());
    numkern::min_eig(&diff)
}
