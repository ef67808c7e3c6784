//! Problem model: minimize `f(x) + h(x) + g(Bx)` subject to `Ax = b`, with
//! `f(x) = ½xᵀHx + ζᵀx`.
//!
//! The dual variables are `ν = (λ, μ)` with `λ` for the dualized equality
//! `Ax = b` and `μ` for `Bx = v`; the stacked operator is `C = [A; B]` and
//! `c = (b, 0)`. When `h` is the indicator of an affine set, that equality is
//! *not* dualized and lives inside `h`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{self, SymMatrix, PD_TOL, RANK_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub h: SymMatrix,
    pub zeta: DVector<f64>,
}

impl QuadCost {
    pub fn new(h: SymMatrix, zeta: DVector<f64>) -> Result<Self> {
        if zeta.len() != h.n() {
            return Err(Error::Dimension {
                context: "linear cost term".into(),
                expected: h.n(),
                got: zeta.len(),
            });
        }
        Ok(Self { h, zeta })
    }

    /// Strong convexity modulus `σ = λ_min(H)`, clamped at zero.
    pub fn sigma(&self) -> Result<f64> {
        Ok(numkern::min_eig(&self.h)?.max(0.0))
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.h.quad(x) + self.zeta.dot(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineEq {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineEq {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension {
                context: "equality right-hand side".into(),
                expected: a.nrows(),
                got: b.len(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }
}

/// Soft bound `lower - s_lo ≤ x[var] ≤ upper + s_hi` with nonnegative slacks
/// that are themselves primal variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCoupling {
    pub var: usize,
    pub slack_lo: Option<usize>,
    pub slack_hi: Option<usize>,
    #[serde(with = "fnum::scalar")]
    pub lower: f64,
    #[serde(with = "fnum::scalar")]
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HTerm {
    Zero,
    Box {
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    Equality(AffineEq),
    /// Box bounds on every variable plus slack-coupled soft bounds. Coupled
    /// variables carry `(-∞, ∞)` in the box and slacks carry `[0, ∞)`.
    SoftBox {
        lo: DVector<f64>,
        hi: DVector<f64>,
        couplings: Vec<SoftCoupling>,
    },
}

impl HTerm {
    pub fn kind_name(&self) -> &'static str {
        match self {
            HTerm::Zero => "zero",
            HTerm::Box { .. } => "box",
            HTerm::Equality(_) => "equality",
            HTerm::SoftBox { .. } => "soft_box",
        }
    }

    /// `h(x)` as 0 or ∞, with `tol` slack on the constraints.
    pub fn value(&self, x: &DVector<f64>, tol: f64) -> f64 {
        if self.violation(x) <= tol {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// Max constraint violation of `x` with respect to the set defining `h`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        match self {
            HTerm::Zero => 0.0,
            HTerm::Box { lo, hi } => box_violation(x, lo, hi),
            HTerm::Equality(eq) => (&eq.a * x - &eq.b).amax(),
            HTerm::SoftBox { lo, hi, couplings } => {
                let mut v = box_violation(x, lo, hi);
                for c in couplings {
                    let s_lo = c.slack_lo.map_or(0.0, |i| x[i]);
                    let s_hi = c.slack_hi.map_or(0.0, |i| x[i]);
                    v = v.max(c.lower - s_lo - x[c.var]);
                    v = v.max(x[c.var] - c.upper - s_hi);
                }
                v.max(0.0)
            }
        }
    }
}

pub(crate) fn box_violation(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    x.iter()
        .zip(lo.iter().zip(hi.iter()))
        .fold(0.0_f64, |acc, (&v, (&l, &h))| acc.max(l - v).max(v - h))
}

#[derive(Debug, Clone, PartialEq)]
pub enum GKind {
    Zero,
    Box { lo: DVector<f64>, hi: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GTerm {
    pub b: DMatrix<f64>,
    pub kind: GKind,
}

impl GTerm {
    pub fn none(n: usize) -> Self {
        Self {
            b: DMatrix::zeros(0, n),
            kind: GKind::Zero,
        }
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    /// Conjugate `g⋆(μ)`: the support function of the box, or the indicator
    /// of `{0}` for `g = 0`.
    pub fn conjugate(&self, mu: &DVector<f64>) -> f64 {
        match &self.kind {
            GKind::Zero => {
                if mu.iter().all(|&v| v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            GKind::Box { lo, hi } => mu
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .map(|(&m, (&l, &h))| {
                    if m > 0.0 {
                        m * h
                    } else if m < 0.0 {
                        m * l
                    } else {
                        0.0
                    }
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedProblem {
    pub cost: QuadCost,
    pub h: HTerm,
    /// Dualized equality; empty (zero rows) when absent.
    pub eq: AffineEq,
    pub g: GTerm,
    c: DMatrix<f64>,
    c_vec: DVector<f64>,
}

impl ComposedProblem {
    pub fn new(cost: QuadCost, h: HTerm, eq: Option<AffineEq>, g: GTerm) -> Result<Self> {
        let n = cost.h.n();
        let eq = eq.unwrap_or_else(|| AffineEq::empty(n));
        check_dims(n, &h, &eq, &g)?;
        let (c, c_vec) = stack(&eq, &g);
        Ok(Self {
            cost,
            h,
            eq,
            g,
            c,
            c_vec,
        })
    }

    pub fn n(&self) -> usize {
        self.cost.h.n()
    }

    /// Rows of the dualized equality.
    pub fn m(&self) -> usize {
        self.eq.m()
    }

    pub fn p(&self) -> usize {
        self.g.p()
    }

    pub fn dual_dim(&self) -> usize {
        self.m() + self.p()
    }

    /// `C = [A; B]`
    pub fn c_matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// `c = (b, 0)`
    pub fn c_vector(&self) -> &DVector<f64> {
        &self.c_vec
    }

    /// The equality held by `h = I_{Ax=b}`, if any.
    pub fn h_equality(&self) -> Option<&AffineEq> {
        match &self.h {
            HTerm::Equality(e) => Some(e),
            _ => None,
        }
    }

    /// Replace the linear cost term (online data in MPC).
    pub fn set_zeta(&mut self, zeta: DVector<f64>) -> Result<()> {
        if zeta.len() != self.n() {
            return Err(Error::Dimension {
                context: "linear cost term".into(),
                expected: self.n(),
                got: zeta.len(),
            });
        }
        self.cost.zeta = zeta;
        Ok(())
    }

    /// Replace the right-hand side of whichever equality carries the
    /// problem's constraint data: `h`'s affine set, or the dualized one.
    pub fn set_equality_rhs(&mut self, b: DVector<f64>) -> Result<()> {
        let target = match &mut self.h {
            HTerm::Equality(e) => e,
            _ => &mut self.eq,
        };
        if b.len() != target.m() {
            return Err(Error::Dimension {
                context: "equality right-hand side".into(),
                expected: target.m(),
                got: b.len(),
            });
        }
        target.b = b;
        let (c, c_vec) = stack(&self.eq, &self.g);
        self.c = c;
        self.c_vec = c_vec;
        Ok(())
    }

    /// Primal objective `f(x) + h(x) + g(Bx)`, with `tol` slack on the sets.
    pub fn primal_objective(&self, x: &DVector<f64>, tol: f64) -> f64 {
        let mut v = self.cost.value(x) + self.h.value(x, tol);
        if let GKind::Box { lo, hi } = &self.g.kind {
            if box_violation(&(&self.g.b * x), lo, hi) > tol {
                v = f64::INFINITY;
            }
        }
        v
    }
}

fn stack(eq: &AffineEq, g: &GTerm) -> (DMatrix<f64>, DVector<f64>) {
    let n = eq.a.ncols();
    let (m, p) = (eq.m(), g.p());
    let mut c = DMatrix::zeros(m + p, n);
    c.view_mut((0, 0), (m, n)).copy_from(&eq.a);
    c.view_mut((m, 0), (p, n)).copy_from(&g.b);
    let mut cv = DVector::zeros(m + p);
    cv.rows_mut(0, m).copy_from(&eq.b);
    (c, cv)
}

fn check_bounds(what: &str, lo: &DVector<f64>, hi: &DVector<f64>, len: usize) -> Result<()> {
    if lo.len() != len || hi.len() != len {
        return Err(Error::Dimension {
            context: format!("{what} bounds"),
            expected: len,
            got: lo.len().min(hi.len()),
        });
    }
    for i in 0..len {
        if lo[i].is_nan() || hi[i].is_nan() {
            return Err(Error::Validation(format!("{what} bound at index {i} is NaN")));
        }
        if lo[i] > hi[i] {
            return Err(Error::Validation(format!(
                "{what} lower bound exceeds upper bound at index {i} ({} > {})",
                lo[i], hi[i]
            )));
        }
    }
    Ok(())
}

fn check_dims(n: usize, h: &HTerm, eq: &AffineEq, g: &GTerm) -> Result<()> {
    let dim = |context: &str, expected: usize, got: usize| -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension {
                context: context.into(),
                expected,
                got,
            })
        }
    };
    dim("columns of A", n, eq.a.ncols())?;
    dim("columns of B", n, g.b.ncols())?;
    if let GKind::Box { lo, hi } = &g.kind {
        check_bounds("d", lo, hi, g.p())?;
    }
    match h {
        HTerm::Zero => {}
        HTerm::Box { lo, hi } => check_bounds("y", lo, hi, n)?,
        HTerm::Equality(e) => {
            dim("columns of A in h", n, e.a.ncols())?;
            dim("rows of b in h", e.m(), e.b.len())?;
        }
        HTerm::SoftBox { lo, hi, couplings } => {
            check_bounds("y", lo, hi, n)?;
            let mut coupled = vec![false; n];
            let mut slack = vec![false; n];
            for c in couplings {
                for idx in [Some(c.var), c.slack_lo, c.slack_hi].into_iter().flatten() {
                    if idx >= n {
                        return Err(Error::Validation(format!(
                            "soft coupling index {idx} out of range (n = {n})"
                        )));
                    }
                }
                if c.lower > c.upper {
                    return Err(Error::Validation(format!(
                        "soft bound on variable {} has lower {} > upper {}",
                        c.var, c.lower, c.upper
                    )));
                }
                if c.lower.is_finite() != c.slack_lo.is_some()
                    || c.upper.is_finite() != c.slack_hi.is_some()
                {
                    return Err(Error::Validation(format!(
                        "soft bound on variable {} needs a slack exactly for each finite side",
                        c.var
                    )));
                }
                if coupled[c.var] || slack[c.var] {
                    return Err(Error::Validation(format!(
                        "variable {} appears in more than one soft coupling",
                        c.var
                    )));
                }
                coupled[c.var] = true;
                if lo[c.var] != f64::NEG_INFINITY || hi[c.var] != f64::INFINITY {
                    return Err(Error::Validation(format!(
                        "soft-coupled variable {} must not carry hard bounds",
                        c.var
                    )));
                }
                for s in [c.slack_lo, c.slack_hi].into_iter().flatten() {
                    if coupled[s] || slack[s] {
                        return Err(Error::Validation(format!(
                            "slack index {s} overlaps another coupling"
                        )));
                    }
                    slack[s] = true;
                    if lo[s] != 0.0 || hi[s] != f64::INFINITY {
                        return Err(Error::Validation(format!(
                            "slack variable {s} must have bounds [0, inf)"
                        )));
                    }
                }
            }
            if let Some(i) = (0..n).find(|&i| coupled[i] && slack[i]) {
                return Err(Error::Validation(format!(
                    "index {i} is both a coupled variable and a slack"
                )));
            }
        }
    }
    Ok(())
}

/// Which dual-curvature results apply to a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurvaturePath {
    /// `L ⪰ C H⁻¹ Cᵀ` (needs `H ≻ 0`).
    General,
    /// `L ⪰ C K₁₁ Cᵀ` (needs `h = I_{Ax=b}` and `H ≻ 0` on `null(A)`).
    Kkt,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub sigma: f64,
    pub h_positive_definite: bool,
    /// Rank check of the equality relevant to the problem (h's or the dualized one).
    pub equality_rank: Option<usize>,
    pub equality_rows: usize,
    pub a_full_row_rank: bool,
    /// `H ≻ 0` on `null(A)` for the same equality.
    pub h_pd_on_null_space: Option<bool>,
    pub paths: Vec<CurvaturePath>,
    pub diagnostics: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.paths.is_empty()
    }

    pub fn has_path(&self, path: CurvaturePath) -> bool {
        self.paths.contains(&path)
    }
}

pub fn validate(p: &ComposedProblem) -> Result<ValidationReport> {
    let h = &p.cost.h;
    let scale = h.max_abs().max(f64::MIN_POSITIVE);
    let sigma_raw = numkern::min_eig(h)?;
    let h_pd = sigma_raw > PD_TOL * scale;
    let mut diagnostics = Vec::new();
    if !h_pd {
        diagnostics.push(format!(
            "H is not positive definite (min eigenvalue {sigma_raw:e})"
        ));
    }

    let mut a_full_row_rank = true;
    let mut equality_rank = None;
    let mut equality_rows = 0;
    let mut check_rank = |a: &DMatrix<f64>, label: &str| -> usize {
        let rank = numkern::range_basis(a, RANK_TOL).rank;
        if rank < a.nrows() {
            a_full_row_rank = false;
            diagnostics.push(format!(
                "{label} has rank {rank} < {} rows; remove the redundant equality rows",
                a.nrows()
            ));
        }
        rank
    };
    if p.m() > 0 {
        equality_rank = Some(check_rank(&p.eq.a, "dualized A"));
        equality_rows = p.m();
    }
    let mut h_pd_on_null_space = None;
    if let Some(e) = p.h_equality() {
        equality_rank = Some(check_rank(&e.a, "A in h"));
        equality_rows = e.m();
        let (z, _) = numkern::null_space_basis(&e.a, RANK_TOL);
        let restricted = h.congruence(&z.transpose());
        let ok = restricted.n() == 0
            || numkern::min_eig(&restricted)? > PD_TOL * scale;
        if !ok {
            diagnostics.push("H is not positive definite on null(A)".into());
        }
        h_pd_on_null_space = Some(ok);
    } else if p.m() > 0 {
        let (z, _) = numkern::null_space_basis(&p.eq.a, RANK_TOL);
        let restricted = h.congruence(&z.transpose());
        h_pd_on_null_space = Some(
            restricted.n() == 0 || numkern::min_eig(&restricted)? > PD_TOL * scale,
        );
    }

    let mut paths = Vec::new();
    if h_pd && a_full_row_rank {
        paths.push(CurvaturePath::General);
    }
    if p.h_equality().is_some() && a_full_row_rank && h_pd_on_null_space == Some(true) {
        paths.push(CurvaturePath::Kkt);
    }
    Ok(ValidationReport {
        sigma: sigma_raw.max(0.0),
        h_positive_definite: h_pd,
        equality_rank,
        equality_rows,
        a_full_row_rank,
        h_pd_on_null_space,
        paths,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Problem files

/// Serde helpers writing non-finite floats as the strings `"inf"`/`"-inf"`.
pub(crate) mod fnum {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else if v < 0.0 {
            Repr::Text("-inf".into())
        } else {
            Repr::Text("nan".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid number `{other}`"))),
            },
        }
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            to_repr(*v).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            from_repr(Repr::deserialize(d)?)
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let r: Vec<Repr> = v.iter().map(|&x| to_repr(x)).collect();
            r.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let r = Vec::<Repr>::deserialize(d)?;
            r.into_iter().map(from_repr).collect()
        }
    }

    pub mod opt_vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::vec::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<Vec<f64>>, D::Error> {
            let r = Option::<Vec<Repr>>::deserialize(d)?;
            r.map(|v| v.into_iter().map(from_repr::<D::Error>).collect())
                .transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKindTag {
    Zero,
    Box,
    Equality,
    SoftBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKindTag {
    Zero,
    Box,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftDescriptor {
    pub couplings: Vec<SoftCoupling>,
}

/// On-disk layout. Matrices are dense row-major; `A`/`b` belong to `h` when
/// `h_kind` is `equality` and are dualized otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "H", with = "fnum::vec")]
    pub h: Vec<f64>,
    #[serde(with = "fnum::vec")]
    pub zeta: Vec<f64>,
    #[serde(rename = "A", with = "fnum::vec")]
    pub a: Vec<f64>,
    #[serde(with = "fnum::vec")]
    pub b: Vec<f64>,
    #[serde(rename = "B", with = "fnum::vec")]
    pub b_mat: Vec<f64>,
    #[serde(with = "fnum::vec")]
    pub d_lo: Vec<f64>,
    #[serde(with = "fnum::vec")]
    pub d_hi: Vec<f64>,
    pub h_kind: HKindTag,
    pub g_kind: GKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "fnum::opt_vec")]
    pub y_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "fnum::opt_vec")]
    pub y_max: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<SoftDescriptor>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_row_major(field: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Validation(format!(
            "field `{field}` has {} entries, expected {rows}×{cols} = {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn vector(field: &str, len: usize, data: &[f64]) -> Result<DVector<f64>> {
    if data.len() != len {
        return Err(Error::Validation(format!(
            "field `{field}` has {} entries, expected {len}",
            data.len()
        )));
    }
    Ok(DVector::from_column_slice(data))
}

impl ProblemFile {
    pub fn from_problem(p: &ComposedProblem) -> Self {
        let n = p.n();
        let (a, b) = match &p.h {
            HTerm::Equality(e) => (row_major(&e.a), e.b.as_slice().to_vec()),
            _ => (row_major(&p.eq.a), p.eq.b.as_slice().to_vec()),
        };
        let m = b.len();
        let (d_lo, d_hi, g_kind) = match &p.g.kind {
            GKind::Zero => (Vec::new(), Vec::new(), GKindTag::Zero),
            GKind::Box { lo, hi } => (
                lo.as_slice().to_vec(),
                hi.as_slice().to_vec(),
                GKindTag::Box,
            ),
        };
        let (h_kind, y_min, y_max, soft) = match &p.h {
            HTerm::Zero => (HKindTag::Zero, None, None, None),
            HTerm::Equality(_) => (HKindTag::Equality, None, None, None),
            HTerm::Box { lo, hi } => (
                HKindTag::Box,
                Some(lo.as_slice().to_vec()),
                Some(hi.as_slice().to_vec()),
                None,
            ),
            HTerm::SoftBox { lo, hi, couplings } => (
                HKindTag::SoftBox,
                Some(lo.as_slice().to_vec()),
                Some(hi.as_slice().to_vec()),
                Some(SoftDescriptor {
                    couplings: couplings.clone(),
                }),
            ),
        };
        ProblemFile {
            n,
            m,
            p: p.p(),
            h: row_major(p.cost.h.matrix()),
            zeta: p.cost.zeta.as_slice().to_vec(),
            a,
            b,
            b_mat: row_major(&p.g.b),
            d_lo,
            d_hi,
            h_kind,
            g_kind,
            y_min,
            y_max,
            soft,
        }
    }

    pub fn into_problem(self) -> Result<ComposedProblem> {
        let n = self.n;
        let h = SymMatrix::new(from_row_major("H", n, n, &self.h)?)?;
        let cost = QuadCost::new(h, vector("zeta", n, &self.zeta)?)?;
        let eq = AffineEq::new(
            from_row_major("A", self.m, n, &self.a)?,
            vector("b", self.m, &self.b)?,
        )?;
        let b_mat = from_row_major("B", self.p, n, &self.b_mat)?;
        let g = match self.g_kind {
            GKindTag::Zero => GTerm {
                b: b_mat,
                kind: GKind::Zero,
            },
            GKindTag::Box => GTerm {
                b: b_mat,
                kind: GKind::Box {
                    lo: vector("d_lo", self.p, &self.d_lo)?,
                    hi: vector("d_hi", self.p, &self.d_hi)?,
                },
            },
        };
        let bounds = |f: &ProblemFile| -> Result<(DVector<f64>, DVector<f64>)> {
            let lo = f
                .y_min
                .as_ref()
                .ok_or_else(|| Error::Validation("field `y_min` is required".into()))?;
            let hi = f
                .y_max
                .as_ref()
                .ok_or_else(|| Error::Validation("field `y_max` is required".into()))?;
            Ok((vector("y_min", n, lo)?, vector("y_max", n, hi)?))
        };
        let (h_term, dual_eq) = match self.h_kind {
            HKindTag::Zero => (HTerm::Zero, Some(eq)),
            HKindTag::Equality => (HTerm::Equality(eq), None),
            HKindTag::Box => {
                let (lo, hi) = bounds(&self)?;
                (HTerm::Box { lo, hi }, Some(eq))
            }
            HKindTag::SoftBox => {
                let (lo, hi) = bounds(&self)?;
                let couplings = self
                    .soft
                    .clone()
                    .ok_or_else(|| Error::Validation("field `soft` is required".into()))?
                    .couplings;
                (HTerm::SoftBox { lo, hi, couplings }, Some(eq))
            }
        };
        ComposedProblem::new(cost, h_term, dual_eq, g)
    }
}

pub fn problem_from_json(text: &str) -> Result<ComposedProblem> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ProblemFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    file.into_problem()
}

pub fn problem_to_json(p: &ComposedProblem) -> String {
    serde_json::to_string_pretty(&ProblemFile::from_problem(p)).expect("problem serializes")
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<ComposedProblem> {
    problem_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_problem(p: &ComposedProblem, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, problem_to_json(p))?;
    Ok(())
}
