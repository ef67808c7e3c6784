//! Dense symmetric linear-algebra kernels.
//!
//! Everything here is desk-scale dense storage on top of `nalgebra`. The
//! contracts that other modules rely on are the accuracy bounds, not the
//! particular factorizations.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU, SVD};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymMatrix::new`] before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Rank threshold relative to the largest singular value.
pub const RANK_TOL: f64 = 1e-9;
/// Uniform PSD tolerance on the minimum eigenvalue, relative to the norm.
pub const PSD_TOL: f64 = 1e-9;
/// Definiteness threshold used for `H` and its null-space restriction.
pub const PD_TOL: f64 = 1e-13;

/// A dense symmetric matrix. Symmetry is checked and enforced on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension {
                context: "symmetric matrix must be square".into(),
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "symmetric matrix",
            });
        }
        let scale = max_abs(&m).max(f64::MIN_POSITIVE);
        let asym = max_abs(&(&m - m.transpose()));
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric {
                asymmetry: asym,
                limit: SYMMETRY_TOL * scale,
            });
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrize as `(M + Mᵀ)/2` without the asymmetry check. Used for
    /// products that are symmetric in exact arithmetic.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &DVector<f64>) -> Self {
        SymMatrix(DMatrix::from_diagonal(d))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Max-abs entry.
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.0)
    }

    pub fn is_diagonal(&self) -> bool {
        is_diagonal(&self.0)
    }

    /// `x ↦ sqrt(xᵀ M x)`, clamped at zero for slightly indefinite inputs.
    pub fn norm_of(&self, x: &DVector<f64>) -> f64 {
        self.quad(x).max(0.0).sqrt()
    }

    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }

    /// `T M Tᵀ` for a rectangular `T`.
    pub fn congruence(&self, t: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrized(t * &self.0 * t.transpose())
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let (r, c) = m.shape();
    (0..r).all(|i| (0..c).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Eigenvalues in ascending order with matching orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    /// `V f(Λ) Vᵀ` for a scalar map applied to each eigenvalue.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.values.map(f);
        SymMatrix::symmetrized(&self.vectors * DMatrix::from_diagonal(&d) * self.vectors.transpose())
    }
}

const EIG_MAX_SWEEPS: usize = 10_000;

pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomp> {
    let n = m.n();
    if n == 0 {
        return Ok(EigenDecomp {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(m.matrix().clone(), f64::EPSILON, EIG_MAX_SWEEPS).ok_or(
        Error::EigenNonConvergence {
            n,
            max_iter: EIG_MAX_SWEEPS,
        },
    )?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomp { values, vectors })
}

pub fn min_eig(m: &SymMatrix) -> Result<f64> {
    Ok(if m.n() == 0 { 0.0 } else { sym_eig(m)?.min() })
}

pub fn max_eig(m: &SymMatrix) -> Result<f64> {
    Ok(if m.n() == 0 { 0.0 } else { sym_eig(m)?.max() })
}

/// Largest singular value of a rectangular matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let svd = checked_svd(m);
    svd.singular_values.iter().copied().fold(0.0, f64::max)
}

/// SVD with `U` and `Vᵀ`, verified by recomposition.
///
/// nalgebra's 2×2 bidiagonal step occasionally returns a wrong factorization
/// for symmetric rank-deficient input. A column rotation changes neither
/// `U` nor the singular values, so a failed attempt is retried on `M G`.
fn checked_svd(m: &DMatrix<f64>) -> SVD<f64, Dyn, Dyn> {
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let cols = m.ncols();
    let mut first = None;
    for angle in [0.0_f64, 0.4142, 1.1071, 2.2361] {
        let mut g = DMatrix::identity(cols, cols);
        if cols >= 2 && angle != 0.0 {
            let (s, c) = angle.sin_cos();
            g[(0, 0)] = c;
            g[(1, 1)] = c;
            g[(0, 1)] = -s;
            g[(1, 0)] = s;
        }
        let mg = m * &g;
        let svd = SVD::new(mg.clone(), true, true);
        let ok = svd
            .clone()
            .recompose()
            .map(|r| max_abs(&(r - &mg)) <= 1e-10 * scale)
            .unwrap_or(false);
        if ok || cols < 2 {
            return svd;
        }
        first.get_or_insert(svd);
    }
    first.expect("at least one attempt")
}

/// Diagonal regularization allowed by [`chol_psd`], relative to `‖M‖_max`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftPolicy {
    pub max_rel_shift: f64,
}

impl Default for ShiftPolicy {
    fn default() -> Self {
        Self {
            max_rel_shift: 1e-8,
        }
    }
}

impl ShiftPolicy {
    pub fn exact() -> Self {
        Self { max_rel_shift: 0.0 }
    }
}

/// Lower-triangular factor with `L Lᵀ = M + shift·I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    pub shift: f64,
}

impl CholFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

pub fn chol_psd(m: &SymMatrix, policy: ShiftPolicy) -> Result<CholFactor> {
    if let Some(chol) = Cholesky::new(m.matrix().clone()) {
        return Ok(CholFactor { chol, shift: 0.0 });
    }
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let cap = policy.max_rel_shift * scale;
    let mut shift = 1e-14 * scale;
    while shift <= cap {
        let shifted = m.matrix() + DMatrix::identity(m.n(), m.n()) * shift;
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(CholFactor { chol, shift });
        }
        shift *= 10.0;
    }
    Err(Error::NotPositiveSemidefinite { shift, cap })
}

/// Orthonormal basis of the column space of `M` and its numerical rank.
#[derive(Debug, Clone)]
pub struct RangeBasis {
    pub basis: DMatrix<f64>,
    pub rank: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

pub fn range_basis(m: &DMatrix<f64>, tol: f64) -> RangeBasis {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return RangeBasis {
            basis: DMatrix::zeros(rows, 0),
            rank: 0,
            singular_values: Vec::new(),
        };
    }
    let svd = checked_svd(m);
    let u = svd.u.expect("U requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax <= 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > tol * smax).count()
    };
    let mut basis = DMatrix::zeros(rows, rank);
    for (dst, &src) in order.iter().take(rank).enumerate() {
        basis.set_column(dst, &u.column(src));
    }
    RangeBasis {
        basis,
        rank,
        singular_values: sv,
    }
}

/// Orthonormal basis of `null(A)` (columns), with the rank of `A`.
pub fn null_space_basis(a: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let n = a.ncols();
    if a.nrows() == 0 {
        return (DMatrix::identity(n, n), 0);
    }
    // range(Aᵀ) ⊕ null(A) = ℝⁿ; complete the row-space basis with a QR of
    // the projector onto its complement.
    let rb = range_basis(&a.transpose(), tol);
    let r = rb.rank;
    if r == n {
        return (DMatrix::zeros(n, 0), r);
    }
    let proj = DMatrix::identity(n, n) - &rb.basis * rb.basis.transpose();
    let nb = range_basis(&proj, 1e-6);
    (nb.basis.columns(0, n - r).into_owned(), r)
}

/// Cached factorization of `[[H, Aᵀ], [A, 0]]`.
#[derive(Debug, Clone)]
pub struct KktFactor {
    n: usize,
    m: usize,
    kkt: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

/// Relative residual bound checked on every KKT solve.
pub const KKT_RESIDUAL_TOL: f64 = 1e-9;

pub fn kkt_factor(h: &SymMatrix, a: &DMatrix<f64>) -> Result<KktFactor> {
    let n = h.n();
    let m = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            context: "KKT constraint matrix columns".into(),
            expected: n,
            got: a.ncols(),
        });
    }
    let (z, a_rank) = null_space_basis(a, RANK_TOL);
    let restricted = h.congruence(&z.transpose());
    let null_min = if restricted.n() == 0 {
        f64::INFINITY
    } else {
        min_eig(&restricted)?
    };
    if a_rank < m || null_min <= PD_TOL * h.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::SingularKkt {
            a_rank,
            m,
            null_space_min_eig: null_min,
        });
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h.matrix());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let lu = LU::new(kkt.clone());
    Ok(KktFactor { n, m, kkt, lu })
}

impl KktFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.kkt
    }

    /// Solve `K sol = rhs` with one step of iterative refinement and a
    /// residual check.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let mut sol = self.lu.solve(rhs).ok_or(Error::SingularKkt {
            a_rank: self.m,
            m: self.m,
            null_space_min_eig: 0.0,
        })?;
        let r = rhs - &self.kkt * &sol;
        if let Some(corr) = self.lu.solve(&r) {
            sol += corr;
        }
        let residual = (rhs - &self.kkt * &sol).norm();
        let limit = KKT_RESIDUAL_TOL * rhs.norm();
        if residual > limit && residual > f64::MIN_POSITIVE {
            return Err(Error::KktResidual { residual, limit });
        }
        Ok(sol)
    }

    /// Solve with `rhs = (top, bottom)`, returning `(x, λ)`.
    pub fn solve_parts(
        &self,
        top: &DVector<f64>,
        bottom: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut rhs = DVector::zeros(self.n + self.m);
        rhs.rows_mut(0, self.n).copy_from(top);
        rhs.rows_mut(self.n, self.m).copy_from(bottom);
        let sol = self.solve(&rhs)?;
        Ok((
            sol.rows(0, self.n).into_owned(),
            sol.rows(self.n, self.m).into_owned(),
        ))
    }

    /// The blocks `K₁₁` (n×n) and `K₁₂` (n×m) of the inverse KKT matrix.
    pub fn inverse_blocks(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, m) = (self.n, self.m);
        let mut k11 = DMatrix::zeros(n, n);
        let mut k12 = DMatrix::zeros(n, m);
        for j in 0..n + m {
            let mut e = DVector::zeros(n + m);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            // The inverse is symmetric: column j restricted to the first n
            // rows is row j of the [K₁₁ K₁₂] block row, transposed.
            if j < n {
                k11.set_column(j, &col.rows(0, n));
            } else {
                k12.set_column(j - n, &col.rows(0, n));
            }
        }
        Ok((k11, k12))
    }
}

/// Row-compressed copy of a dense matrix for the hot loops of the solvers.
#[derive(Debug, Clone)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    row_start: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for i in 0..rows {
            for j in 0..cols {
                let v = m[(i, j)];
                if v != 0.0 {
                    col_idx.push(j);
                    vals.push(v);
                }
            }
            row_start.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_start,
            col_idx,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    /// `out = M x`
    pub fn mul_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_start[i]..self.row_start[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            out[i] = acc;
        }
    }

    /// `out = Mᵀ y`
    pub fn tr_mul_into(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        for i in 0..self.rows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for k in self.row_start[i]..self.row_start[i + 1] {
                out[self.col_idx[k]] += self.vals[k] * yi;
            }
        }
    }

    /// `out += a·Mᵀ y`
    pub fn tr_mul_add_into(&self, a: f64, y: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.rows {
            let yi = a * y[i];
            if yi == 0.0 {
                continue;
            }
            for k in self.row_start[i]..self.row_start[i + 1] {
                out[self.col_idx[k]] += self.vals[k] * yi;
            }
        }
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        self.mul_into(x, &mut out);
        out
    }

    pub fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.cols);
        self.tr_mul_into(y, &mut out);
        out
    }
}
