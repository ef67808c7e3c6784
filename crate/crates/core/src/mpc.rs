//! MPC front-end: horizon condensation into [`ComposedProblem`] for the
//! equality-dual and inequality-dual formulations, the AFTI-16 instance and
//! a batch closed-loop runner.
//!
//! Stacked layout shared by both formulations:
//! `y = (x₀, …, x_N, u₀, …, u_{N−1}, s₁, …, s_N)` where `s_t` holds the
//! output slacks of stage `t`, lower before upper, output by output.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::{self, CurvatureMatrix};
use crate::error::{Error, Result};
use crate::metric::{self, Metric, SelectOptions, StructurePattern};
use crate::numkern::SymMatrix;
use crate::problem::{AffineEq, ComposedProblem, GKind, GTerm, HTerm, QuadCost, SoftCoupling};
use crate::solver::{AdmmWorkspace, DualOutcome, FdgmWorkspace, RunOptions, StopRule, Tolerances};

pub use crate::qp::{reference_solution, ReferenceSolution};

/// `x⁺ = Φx + Γu`, `y = Cx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub c_out: DMatrix<f64>,
}

impl Plant {
    pub fn new(phi: DMatrix<f64>, gamma: DMatrix<f64>, c_out: DMatrix<f64>) -> Result<Self> {
        let nx = phi.nrows();
        if phi.ncols() != nx {
            return Err(Error::Dimension {
                context: "dynamics matrix columns".into(),
                expected: nx,
                got: phi.ncols(),
            });
        }
        if gamma.nrows() != nx {
            return Err(Error::Dimension {
                context: "input map rows".into(),
                expected: nx,
                got: gamma.nrows(),
            });
        }
        if c_out.ncols() != nx {
            return Err(Error::Dimension {
                context: "output map columns".into(),
                expected: nx,
                got: c_out.ncols(),
            });
        }
        Ok(Self { phi, gamma, c_out })
    }

    pub fn nx(&self) -> usize {
        self.phi.nrows()
    }

    pub fn nu(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c_out.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.phi * x + &self.gamma * u
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c_out * x
    }

    /// Least-norm state with `C x_r = y_r`.
    pub fn state_target(&self, y_r: &DVector<f64>) -> Result<DVector<f64>> {
        let pinv = self
            .c_out
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Validation(format!("output map pseudo-inverse: {e}")))?;
        Ok(pinv * y_r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcWeights {
    pub q: SymMatrix,
    pub r: SymMatrix,
    pub q_f: SymMatrix,
    /// One weight per slack slot `(lo₁, hi₁, lo₂, hi₂, …)`.
    pub s: DVector<f64>,
}

impl MpcWeights {
    /// `Q = CᵀQ_yC + Q_x`, terminal weight `Q`.
    pub fn from_output(
        c_out: &DMatrix<f64>,
        q_y: &SymMatrix,
        q_x: &SymMatrix,
        r: SymMatrix,
        s: DVector<f64>,
    ) -> Result<Self> {
        let q = SymMatrix::symmetrized(c_out.transpose() * q_y.matrix() * c_out + q_x.matrix());
        Ok(Self {
            q_f: q.clone(),
            q,
            r,
            s,
        })
    }
}

/// Soft output band `lower − s_lo ≤ y ≤ upper + s_hi`; infinite sides carry
/// no slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftBound {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcInstance {
    pub plant: Plant,
    pub weights: MpcWeights,
    pub horizon: usize,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    /// Hard state box on `x₁..x_N`.
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    /// Soft output bounds on `y₁..y_N`, one per output.
    pub y_soft: Vec<SoftBound>,
    pub x0: DVector<f64>,
    /// Output reference, constant over the horizon.
    pub y_ref: DVector<f64>,
}

/// Index map of the stacked decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub slacks_per_stage: usize,
}

impl Layout {
    pub fn x(&self, t: usize) -> usize {
        t * self.nx
    }

    pub fn u(&self, t: usize) -> usize {
        (self.horizon + 1) * self.nx + t * self.nu
    }

    /// Start of the slack block of stage `t ≥ 1`.
    pub fn s(&self, t: usize) -> usize {
        (self.horizon + 1) * self.nx + self.horizon * self.nu + (t - 1) * self.slacks_per_stage
    }

    pub fn n(&self) -> usize {
        (self.horizon + 1) * self.nx + self.horizon * (self.nu + self.slacks_per_stage)
    }

    pub fn n_eq(&self) -> usize {
        (self.horizon + 1) * self.nx
    }
}

/// Which slack slots exist: `(output, is_upper)` in storage order.
fn slack_slots(y_soft: &[SoftBound]) -> Vec<(usize, bool)> {
    let mut v = Vec::new();
    for (j, b) in y_soft.iter().enumerate() {
        if b.lower.is_finite() {
            v.push((j, false));
        }
        if b.upper.is_finite() {
            v.push((j, true));
        }
    }
    v
}

fn slot_weight(s: &DVector<f64>, j: usize, upper: bool) -> f64 {
    s[2 * j + usize::from(upper)]
}

fn sym_check(name: &str, m: &SymMatrix, n: usize) -> Result<()> {
    if m.n() != n {
        return Err(Error::Dimension {
            context: name.into(),
            expected: n,
            got: m.n(),
        });
    }
    Ok(())
}

fn vec_check(name: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension {
            context: name.into(),
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

impl MpcInstance {
    pub fn validate(&self) -> Result<()> {
        let (nx, nu, ny) = (self.plant.nx(), self.plant.nu(), self.plant.ny());
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        sym_check("state weight", &self.weights.q, nx)?;
        sym_check("terminal weight", &self.weights.q_f, nx)?;
        sym_check("input weight", &self.weights.r, nu)?;
        vec_check("slack weights", &self.weights.s, 2 * ny)?;
        vec_check("input lower bound", &self.u_lo, nu)?;
        vec_check("input upper bound", &self.u_hi, nu)?;
        vec_check("state lower bound", &self.x_lo, nx)?;
        vec_check("state upper bound", &self.x_hi, nx)?;
        vec_check("initial state", &self.x0, nx)?;
        vec_check("output reference", &self.y_ref, ny)?;
        if self.y_soft.len() != ny {
            return Err(Error::Dimension {
                context: "soft output bounds".into(),
                expected: ny,
                got: self.y_soft.len(),
            });
        }
        for i in 0..nu {
            if !(self.u_lo[i].is_finite() && self.u_hi[i].is_finite()) {
                return Err(Error::Validation(format!("input bound at index {i} is not finite")));
            }
            if self.u_lo[i] > self.u_hi[i] {
                return Err(Error::Validation(format!("input bounds cross at index {i}")));
            }
        }
        for (j, b) in self.y_soft.iter().enumerate() {
            if b.lower > b.upper {
                return Err(Error::Validation(format!("soft output bounds cross at index {j}")));
            }
            for (side, upper) in [(b.lower, false), (b.upper, true)] {
                if side.is_finite() && !(slot_weight(&self.weights.s, j, upper) > 0.0) {
                    return Err(Error::Validation(format!(
                        "slack weight for output {j} must be positive"
                    )));
                }
            }
        }
        let r_min = crate::numkern::min_eig(&self.weights.r)?;
        if !(r_min > 0.0) {
            return Err(Error::Validation("input weight R must be positive definite".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            nx: self.plant.nx(),
            nu: self.plant.nu(),
            horizon: self.horizon,
            slacks_per_stage: slack_slots(&self.y_soft).len(),
        }
    }

    /// `A y = b` encoding `x₀ = x̄` and the dynamics.
    pub fn dynamics(&self) -> AffineEq {
        let lay = self.layout();
        let (nx, nu, n) = (lay.nx, lay.nu, lay.n());
        let mut a = DMatrix::zeros(lay.n_eq(), n);
        for i in 0..nx {
            a[(i, i)] = 1.0;
        }
        for t in 0..self.horizon {
            let r0 = (t + 1) * nx;
            for i in 0..nx {
                a[(r0 + i, lay.x(t + 1) + i)] = 1.0;
                for j in 0..nx {
                    a[(r0 + i, lay.x(t) + j)] = -self.plant.phi[(i, j)];
                }
                for j in 0..nu {
                    a[(r0 + i, lay.u(t) + j)] = -self.plant.gamma[(i, j)];
                }
            }
        }
        AffineEq {
            a,
            b: self.rhs(&self.x0),
        }
    }

    /// `b x̄`
    pub fn rhs(&self, x_bar: &DVector<f64>) -> DVector<f64> {
        let mut b = DVector::zeros(self.layout().n_eq());
        b.rows_mut(0, x_bar.len()).copy_from(x_bar);
        b
    }

    /// Stacked `H = blkdiag(Q, …, Q, Q_f, R, …, R, S, …, S)`.
    pub fn stacked_hessian(&self) -> SymMatrix {
        let lay = self.layout();
        let (nx, nu) = (lay.nx, lay.nu);
        let mut h = DMatrix::zeros(lay.n(), lay.n());
        for t in 0..=self.horizon {
            let w = if t == self.horizon {
                &self.weights.q_f
            } else {
                &self.weights.q
            };
            h.view_mut((lay.x(t), lay.x(t)), (nx, nx)).copy_from(w.matrix());
        }
        for t in 0..self.horizon {
            h.view_mut((lay.u(t), lay.u(t)), (nu, nu))
                .copy_from(self.weights.r.matrix());
        }
        let slots = slack_slots(&self.y_soft);
        for t in 1..=self.horizon {
            for (k, &(j, upper)) in slots.iter().enumerate() {
                let i = lay.s(t) + k;
                h[(i, i)] = slot_weight(&self.weights.s, j, upper);
            }
        }
        SymMatrix::symmetrized(h)
    }

    /// Linear term of the tracking cost for output reference `y_r`.
    pub fn linear_term(&self, y_r: &DVector<f64>) -> Result<DVector<f64>> {
        let lay = self.layout();
        let x_r = self.plant.state_target(y_r)?;
        let qx = self.weights.q.matrix() * &x_r;
        let qfx = self.weights.q_f.matrix() * &x_r;
        let mut z = DVector::zeros(lay.n());
        for t in 0..=self.horizon {
            let v = if t == self.horizon { &qfx } else { &qx };
            z.rows_mut(lay.x(t), lay.nx).copy_from(&(-v));
        }
        Ok(z)
    }

    /// Constant dropped from the stacked cost.
    pub fn cost_constant(&self, y_r: &DVector<f64>) -> Result<f64> {
        let x_r = self.plant.state_target(y_r)?;
        Ok(self.horizon as f64 * 0.5 * self.weights.q.quad(&x_r) + 0.5 * self.weights.q_f.quad(&x_r))
    }

    /// `Σ ℓ(x_t, u_t, s_t) + ½(x_N − x_r)ᵀQ_f(x_N − x_r)` evaluated on a
    /// stacked vector, directly from the stage definitions.
    pub fn stage_cost_sum(&self, y: &DVector<f64>, y_r: &DVector<f64>) -> Result<f64> {
        let lay = self.layout();
        let x_r = self.plant.state_target(y_r)?;
        let mut total = 0.0;
        for t in 0..=self.horizon {
            let dx = y.rows(lay.x(t), lay.nx) - &x_r;
            let w = if t == self.horizon {
                &self.weights.q_f
            } else {
                &self.weights.q
            };
            total += 0.5 * w.quad(&dx);
        }
        for t in 0..self.horizon {
            total += 0.5 * self.weights.r.quad(&y.rows(lay.u(t), lay.nu).into_owned());
        }
        let slots = slack_slots(&self.y_soft);
        for t in 1..=self.horizon {
            for (k, &(j, upper)) in slots.iter().enumerate() {
                let s = y[lay.s(t) + k];
                total += 0.5 * slot_weight(&self.weights.s, j, upper) * s * s;
            }
        }
        Ok(total)
    }

    fn cost(&self) -> Result<QuadCost> {
        QuadCost::new(self.stacked_hessian(), self.linear_term(&self.y_ref)?)
    }

    /// Equality-dual condensation: `h` carries input/state boxes and the
    /// slack-coupled output bands, the dynamics are dualized, `g = 0`.
    ///
    /// Needs a diagonal stacked `H` and an output map whose softly
    /// bounded rows select single states.
    pub fn condense_eqdual(&self) -> Result<ComposedProblem> {
        self.validate()?;
        let lay = self.layout();
        let n = lay.n();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for t in 1..=self.horizon {
            lo.rows_mut(lay.x(t), lay.nx).copy_from(&self.x_lo);
            hi.rows_mut(lay.x(t), lay.nx).copy_from(&self.x_hi);
        }
        for t in 0..self.horizon {
            lo.rows_mut(lay.u(t), lay.nu).copy_from(&self.u_lo);
            hi.rows_mut(lay.u(t), lay.nu).copy_from(&self.u_hi);
        }
        let slots = slack_slots(&self.y_soft);
        let mut couplings = Vec::new();
        for t in 1..=self.horizon {
            for k in 0..lay.slacks_per_stage {
                lo[lay.s(t) + k] = 0.0;
            }
            for (j, b) in self.y_soft.iter().enumerate() {
                if !b.lower.is_finite() && !b.upper.is_finite() {
                    continue;
                }
                let state = self.selected_state(j)?;
                let var = lay.x(t) + state;
                if lo[var].is_finite() || hi[var].is_finite() {
                    return Err(Error::UnsupportedInner(format!(
                        "state {state} carries both a hard box and a soft output band"
                    )));
                }
                let slot = |upper: bool| {
                    slots
                        .iter()
                        .position(|&s| s == (j, upper))
                        .map(|k| lay.s(t) + k)
                };
                couplings.push(SoftCoupling {
                    var,
                    slack_lo: slot(false),
                    slack_hi: slot(true),
                    lower: b.lower,
                    upper: b.upper,
                });
            }
        }
        let h = if couplings.is_empty() {
            HTerm::Box { lo, hi }
        } else {
            HTerm::SoftBox { lo, hi, couplings }
        };
        ComposedProblem::new(self.cost()?, h, Some(self.dynamics()), GTerm::none(n))
    }

    fn selected_state(&self, j: usize) -> Result<usize> {
        let row = self.plant.c_out.row(j);
        let nz: Vec<usize> = (0..row.len()).filter(|&i| row[i] != 0.0).collect();
        match nz.as_slice() {
            [i] if row[*i] == 1.0 => Ok(*i),
            _ => Err(Error::UnsupportedInner(format!(
                "soft output {j} is not a single-state selection"
            ))),
        }
    }

    /// Inequality-dual condensation: `h = I_{Ay = bx̄}`, every inequality
    /// goes through `g = I_[d̲, d̄](By)`.
    pub fn condense_ineqdual(&self) -> Result<ComposedProblem> {
        self.validate()?;
        let lay = self.layout();
        let n = lay.n();
        let slots = slack_slots(&self.y_soft);
        let mut rows: Vec<(Vec<(usize, f64)>, f64, f64)> = Vec::new();
        for t in 1..=self.horizon {
            for i in 0..lay.nx {
                if self.x_lo[i].is_finite() || self.x_hi[i].is_finite() {
                    rows.push((vec![(lay.x(t) + i, 1.0)], self.x_lo[i], self.x_hi[i]));
                }
            }
            for (k, &(j, upper)) in slots.iter().enumerate() {
                let mut entries: Vec<(usize, f64)> = (0..lay.nx)
                    .filter(|&i| self.plant.c_out[(j, i)] != 0.0)
                    .map(|i| (lay.x(t) + i, self.plant.c_out[(j, i)]))
                    .collect();
                let b = self.y_soft[j];
                if upper {
                    entries.push((lay.s(t) + k, -1.0));
                    rows.push((entries, f64::NEG_INFINITY, b.upper));
                } else {
                    entries.push((lay.s(t) + k, 1.0));
                    rows.push((entries, b.lower, f64::INFINITY));
                }
            }
        }
        for t in 0..self.horizon {
            for i in 0..lay.nu {
                rows.push((vec![(lay.u(t) + i, 1.0)], self.u_lo[i], self.u_hi[i]));
            }
        }
        for t in 1..=self.horizon {
            for k in 0..lay.slacks_per_stage {
                rows.push((vec![(lay.s(t) + k, 1.0)], 0.0, f64::INFINITY));
            }
        }
        let p = rows.len();
        let mut bm = DMatrix::zeros(p, n);
        let mut d_lo = DVector::zeros(p);
        let mut d_hi = DVector::zeros(p);
        for (r, (entries, lo, hi)) in rows.into_iter().enumerate() {
            for (c, v) in entries {
                bm[(r, c)] = v;
            }
            d_lo[r] = lo;
            d_hi[r] = hi;
        }
        ComposedProblem::new(
            self.cost()?,
            HTerm::Equality(self.dynamics()),
            None,
            GTerm {
                b: bm,
                kind: GKind::Box { lo: d_lo, hi: d_hi },
            },
        )
    }

    pub fn condense(&self, f: Formulation) -> Result<ComposedProblem> {
        match f {
            Formulation::EqDual => self.condense_eqdual(),
            Formulation::IneqDual => self.condense_ineqdual(),
        }
    }
}

/// Point a condensed problem at a new initial state and output reference.
pub fn update_online(
    inst: &MpcInstance,
    p: &mut ComposedProblem,
    x_bar: &DVector<f64>,
    y_r: &DVector<f64>,
) -> Result<()> {
    p.set_equality_rhs(inst.rhs(x_bar))?;
    p.set_zeta(inst.linear_term(y_r)?)
}

/// The AFTI-16 pitch-control instance with `N = 10`.
pub fn afti16_model() -> MpcInstance {
    #[rustfmt::skip]
    let phi = DMatrix::from_row_slice(4, 4, &[
         0.999, -3.008, -0.113, -1.608,
        -0.000,  0.986,  0.048,  0.000,
         0.000,  2.083,  1.009, -0.000,
         0.000,  0.053,  0.050,  1.000,
    ]);
    #[rustfmt::skip]
    let gamma = DMatrix::from_row_slice(4, 2, &[
        -0.080, -0.635,
        -0.029, -0.014,
        -0.868, -0.092,
        -0.022, -0.002,
    ]);
    #[rustfmt::skip]
    let c_out = DMatrix::from_row_slice(2, 4, &[
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    let plant = Plant::new(phi, gamma, c_out).expect("static dimensions");
    let q_y = SymMatrix::from_diagonal(&DVector::from_element(2, 1e2));
    let q_x = SymMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 0.0, 1e-3, 0.0]));
    let r = SymMatrix::from_diagonal(&DVector::from_element(2, 1e-2));
    let weights = MpcWeights::from_output(&plant.c_out, &q_y, &q_x, r, DVector::from_element(4, 1e6))
        .expect("static dimensions");
    MpcInstance {
        plant,
        weights,
        horizon: 10,
        u_lo: DVector::from_element(2, -25.0),
        u_hi: DVector::from_element(2, 25.0),
        x_lo: DVector::from_element(4, f64::NEG_INFINITY),
        x_hi: DVector::from_element(4, f64::INFINITY),
        y_soft: vec![
            SoftBound {
                lower: -0.5,
                upper: 0.5,
            },
            SoftBound {
                lower: -100.0,
                upper: 100.0,
            },
        ],
        x0: DVector::zeros(4),
        y_ref: DVector::zeros(2),
    }
}

// ---------------------------------------------------------------------------
// Controller

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Dynamics dualized, boxes and soft bands in `h`.
    EqDual,
    /// Dynamics in `h`, all inequalities dualized through `g`.
    IneqDual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureChoice {
    InverseH,
    Kkt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    /// `CPCᵀ` itself for the equality-dual form, an SDP-selected diagonal
    /// `L_μ` for the inequality-dual form.
    Selected,
    /// `‖CPCᵀ‖₂·I`.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Fdgm {
        metric: MetricChoice,
        curvature: CurvatureChoice,
    },
    Admm {
        rho: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopMode {
    /// Relative distance to the reference solution.
    Oracle(f64),
    Library(Tolerances),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub formulation: Formulation,
    pub method: Method,
    pub warm_start: bool,
    pub max_iter: usize,
    pub stop: StopMode,
}

impl SolverConfig {
    pub fn fdgm(formulation: Formulation, metric: MetricChoice, curvature: CurvatureChoice) -> Self {
        Self {
            formulation,
            method: Method::Fdgm { metric, curvature },
            warm_start: false,
            max_iter: 100_000,
            stop: StopMode::Oracle(0.005),
        }
    }

    pub fn admm(rho: f64) -> Self {
        Self {
            formulation: Formulation::IneqDual,
            method: Method::Admm { rho },
            warm_start: false,
            max_iter: 100_000,
            stop: StopMode::Oracle(0.005),
        }
    }

    pub fn label(&self) -> String {
        let form = match self.formulation {
            Formulation::EqDual => "eqdual",
            Formulation::IneqDual => "ineqdual",
        };
        match self.method {
            Method::Fdgm { metric, curvature } => {
                let m = match metric {
                    MetricChoice::Selected => "selected",
                    MetricChoice::Scalar => "scalar",
                };
                let c = match curvature {
                    CurvatureChoice::InverseH => "Hinv",
                    CurvatureChoice::Kkt => "K11",
                };
                format!("fdgm-{form}-{m}-{c}")
            }
            Method::Admm { rho } => format!("admm-rho{rho}"),
        }
    }
}

#[derive(Debug)]
enum Engine {
    Fdgm(Box<FdgmWorkspace>),
    Admm(Box<AdmmWorkspace>),
}

/// Offline-prepared solver for one formulation of an instance.
#[derive(Debug)]
pub struct MpcController {
    pub inst: MpcInstance,
    pub config: SolverConfig,
    pub problem: ComposedProblem,
    pub metric: Option<Metric>,
    engine: Engine,
    warm: Option<DVector<f64>>,
}

/// Curvature used for metric selection under a configuration.
pub fn choose_curvature(p: &ComposedProblem, c: CurvatureChoice) -> Result<CurvatureMatrix> {
    match c {
        CurvatureChoice::InverseH => curvature::curvature_general(p),
        CurvatureChoice::Kkt => curvature::curvature_kkt(p),
    }
}

impl MpcController {
    pub fn new(inst: &MpcInstance, config: SolverConfig) -> Result<Self> {
        let problem = inst.condense(config.formulation)?;
        let (engine, metric) = match config.method {
            Method::Fdgm { metric, curvature } => {
                let cm = choose_curvature(&problem, curvature)?;
                let m = match (metric, config.formulation) {
                    (MetricChoice::Scalar, _) => metric::scalar_metric(&cm)?,
                    (MetricChoice::Selected, Formulation::EqDual) => {
                        metric::select_metric(&cm, &StructurePattern::Full, &SelectOptions::default())?
                    }
                    (MetricChoice::Selected, Formulation::IneqDual) => {
                        metric::select_metric(&cm, &StructurePattern::Diagonal, &SelectOptions::default())?
                    }
                };
                let ws = FdgmWorkspace::new(&problem, &m, false)?;
                (Engine::Fdgm(Box::new(ws)), Some(m))
            }
            Method::Admm { rho } => {
                if config.formulation != Formulation::IneqDual {
                    return Err(Error::Validation("ADMM runs on the inequality-dual form".into()));
                }
                (Engine::Admm(Box::new(AdmmWorkspace::new(&problem, rho)?)), None)
            }
        };
        Ok(Self {
            inst: inst.clone(),
            config,
            problem,
            metric,
            engine,
            warm: None,
        })
    }

    /// Factorizations performed by the engine since construction.
    pub fn factorizations(&self) -> usize {
        match &self.engine {
            Engine::Fdgm(w) => w.factorizations(),
            Engine::Admm(w) => w.factorizations(),
        }
    }

    /// Load online data and run. `y_star` is required by the oracle rule.
    pub fn solve(
        &mut self,
        x_bar: &DVector<f64>,
        y_r: &DVector<f64>,
        y_star: Option<&DVector<f64>>,
    ) -> Result<DualOutcome> {
        update_online(&self.inst, &mut self.problem, x_bar, y_r)?;
        let stop = match (&self.config.stop, y_star) {
            (StopMode::Oracle(rel), Some(ys)) => StopRule::Oracle {
                y_star: ys.clone(),
                rel: *rel,
            },
            (StopMode::Oracle(_), None) => {
                return Err(Error::Validation("oracle stop rule needs a reference solution".into()))
            }
            (StopMode::Library(t), _) => StopRule::Library(*t),
        };
        let opts = RunOptions {
            max_iter: self.config.max_iter,
            stop,
            ..RunOptions::default()
        };
        let warm = if self.config.warm_start {
            self.warm.as_ref()
        } else {
            None
        };
        let out = match &mut self.engine {
            Engine::Fdgm(w) => {
                w.refresh(&self.problem);
                w.run(&self.problem, warm, &opts)?
            }
            Engine::Admm(w) => {
                w.refresh(&self.problem);
                w.run(&self.problem, warm, &opts)?
            }
        };
        if self.config.warm_start {
            self.warm = Some(match self.engine {
                Engine::Fdgm(_) => out.nu(),
                Engine::Admm(_) => out.mu.clone(),
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Scenarios and closed loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub samples: usize,
    pub y_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl Scenario {
    /// Pitch 0° → 10° for 30 samples, then back to 0° for 30.
    pub fn afti16_default() -> Self {
        Self {
            x0: vec![0.0; 4],
            segments: vec![
                Segment {
                    samples: 30,
                    y_ref: vec![0.0, 10.0],
                },
                Segment {
                    samples: 30,
                    y_ref: vec![0.0, 0.0],
                },
            ],
        }
    }

    pub fn samples(&self) -> usize {
        self.segments.iter().map(|s| s.samples).sum()
    }

    /// Output reference at each sample.
    pub fn references(&self) -> Vec<DVector<f64>> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(DVector::from_vec(s.y_ref.clone()), s.samples))
            .collect()
    }

    pub fn check(&self, inst: &MpcInstance) -> Result<()> {
        vec_check("scenario initial state", &DVector::from_vec(self.x0.clone()), inst.plant.nx())?;
        for s in &self.segments {
            vec_check("scenario reference", &DVector::from_vec(s.y_ref.clone()), inst.plant.ny())?;
        }
        Ok(())
    }
}

pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    scenario_from_json(&std::fs::read_to_string(path)?)
}

/// One closed-loop sample driven by the reference solution.
#[derive(Debug, Clone)]
pub struct ReferenceSample {
    pub x_bar: DVector<f64>,
    pub y_ref: DVector<f64>,
    pub y_star: DVector<f64>,
}

/// Simulate the loop with the reference solver choosing inputs, so every
/// algorithm later sees the same sequence of problems.
pub fn reference_trajectory(inst: &MpcInstance, scenario: &Scenario) -> Result<Vec<ReferenceSample>> {
    scenario.check(inst)?;
    let mut p = inst.condense_ineqdual()?;
    let lay = inst.layout();
    let mut x = DVector::from_vec(scenario.x0.clone());
    let mut out = Vec::with_capacity(scenario.samples());
    for y_r in scenario.references() {
        update_online(inst, &mut p, &x, &y_r)?;
        let y_star = reference_solution(&p)?.y;
        let u0 = y_star.rows(lay.u(0), lay.nu).into_owned();
        let next = inst.plant.step(&x, &u0);
        out.push(ReferenceSample {
            x_bar: x,
            y_ref: y_r,
            y_star,
        });
        x = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub slack_max: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub label: String,
    pub records: Vec<SampleRecord>,
    /// First sample where the solver hit its cap, if any.
    pub capped_at: Option<usize>,
}

impl ClosedLoopRun {
    pub fn require_complete(self) -> Result<Self> {
        match self.capped_at {
            None => Ok(self),
            Some(t) => Err(Error::CapReached {
                iterations: self.records[t].iterations,
            }),
        }
    }

    pub fn iteration_stats(&self) -> (f64, usize) {
        let n = self.records.len().max(1) as f64;
        let sum: usize = self.records.iter().map(|r| r.iterations).sum();
        let max = self.records.iter().map(|r| r.iterations).max().unwrap_or(0);
        (sum as f64 / n, max)
    }

    pub fn time_stats(&self) -> (f64, f64) {
        let n = self.records.len().max(1) as f64;
        let sum: f64 = self.records.iter().map(|r| r.seconds).sum();
        let max = self.records.iter().map(|r| r.seconds).fold(0.0, f64::max);
        (sum / n, max)
    }

    /// `t, x1.., u1.., y1.., slack_max, iterations`
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(r) = self.records.first() {
            let mut head = vec!["t".to_string()];
            head.extend((1..=r.x.len()).map(|i| format!("x{i}")));
            head.extend((1..=r.u.len()).map(|i| format!("u{i}")));
            head.extend((1..=r.y.len()).map(|i| format!("y{i}")));
            head.push("slack_max".into());
            head.push("iterations".into());
            s.push_str(&head.join(","));
            s.push('\n');
        }
        for r in &self.records {
            let mut cols = vec![r.t.to_string()];
            cols.extend(r.x.iter().map(|v| format!("{v}")));
            cols.extend(r.u.iter().map(|v| format!("{v}")));
            cols.extend(r.y.iter().map(|v| format!("{v}")));
            cols.push(format!("{}", r.slack_max));
            cols.push(r.iterations.to_string());
            let _ = writeln!(s, "{}", cols.join(","));
        }
        s
    }
}

/// Run a controller over precomputed reference samples. With
/// `abort_on_cap` the run stops at the first capped sample.
pub fn run_on_samples(
    ctrl: &mut MpcController,
    samples: &[ReferenceSample],
    abort_on_cap: bool,
) -> Result<ClosedLoopRun> {
    let lay = ctrl.inst.layout();
    let mut records = Vec::with_capacity(samples.len());
    let mut capped_at = None;
    for (t, s) in samples.iter().enumerate() {
        let start = Instant::now();
        let out = ctrl.solve(&s.x_bar, &s.y_ref, Some(&s.y_star))?;
        let seconds = start.elapsed().as_secs_f64();
        let slack_max = if lay.slacks_per_stage > 0 {
            out.y.rows(lay.s(1), lay.slacks_per_stage).max().max(0.0)
        } else {
            0.0
        };
        records.push(SampleRecord {
            t,
            x: s.x_bar.clone(),
            u: s.y_star.rows(lay.u(0), lay.nu).into_owned(),
            y: ctrl.inst.plant.output(&s.x_bar),
            slack_max,
            iterations: out.iterations,
            converged: out.converged,
            seconds,
        });
        if !out.converged && capped_at.is_none() {
            capped_at = Some(t);
            if abort_on_cap {
                break;
            }
        }
    }
    Ok(ClosedLoopRun {
        label: ctrl.config.label(),
        records,
        capped_at,
    })
}

/// Closed loop for one solver configuration. Aborts at the first capped
/// sample; the partial record is kept in the returned run.
pub fn closed_loop_run(inst: &MpcInstance, config: SolverConfig, scenario: &Scenario) -> Result<ClosedLoopRun> {
    let samples = reference_trajectory(inst, scenario)?;
    let mut ctrl = MpcController::new(inst, config)?;
    run_on_samples(&mut ctrl, &samples, true)
}
