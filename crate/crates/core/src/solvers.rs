//! Local-step solvers: advance the parameters along the gradient flow of a
//! single minibatch for a time `h`.
//!
//! Every local flow keeps the component of `θ` orthogonal to `range(Q_i)`
//! fixed, so the work happens in the `k`-dimensional coordinates `η = Q_iᵀθ`
//! and is lifted back as `θ(h) = θ₀ + Q_i (η(h) − η(0))`. The `p × p`
//! projector `I − Q_iQ_iᵀ` is never formed.

use ndarray::{ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SymEigen, Vector};
use crate::ode::{self, IntegratorConfig, OdeError};
use crate::problems::{self, BatchFactorization, Params, Problem, ProblemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("batch factor R is singular: {0}")]
    SingularR(LinalgError),
    #[error("sample row is zero")]
    ZeroRow,
    #[error("step length must be nonnegative, got {0}")]
    NegativeStep(f64),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMethod {
    ClosedForm,
    Rk45,
    Euler,
    KaczmarzLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalStepReport {
    pub theta_next: Params,
    pub method: StepMethod,
    pub rhs_evals: usize,
    pub batch_loss_before: f64,
    pub batch_loss_after: f64,
}

fn check_step(h: f64) -> Result<(), SolverError> {
    if h >= 0.0 {
        Ok(())
    } else {
        Err(SolverError::NegativeStep(h))
    }
}

/// Exact local flow of a least-squares batch,
/// `θ(h) = Q e^{−RRᵀh/n} (Qᵀθ₀ − η*) + Qη* + (I − QQᵀ)θ₀`,
/// with the batch's stationary point `η* = R^{−T} y` precomputed.
#[derive(Debug, Clone)]
pub struct LlsLocalFlow {
    q: Matrix,
    gram: SymEigen,
    eta_star: Matrix,
    n: usize,
}

impl LlsLocalFlow {
    pub fn new(bf: &BatchFactorization, n: usize) -> Result<Self, SolverError> {
        let r = bf.r();
        let gram = SymEigen::new(r.dot(&r.t()).view());
        let eta_star = if r.is_square() {
            linalg::solve_upper_transposed(r.view(), bf.y.view()).map_err(SolverError::SingularR)?
        } else {
            // More rows than features: the batch has no exact solution and the
            // flow settles at the normal-equations point (RRᵀ)⁻¹ R y.
            if gram.min() <= 0.0 {
                return Err(SolverError::SingularR(LinalgError::RankDeficient {
                    index: 0,
                    value: gram.min(),
                    threshold: 0.0,
                }));
            }
            gram.map(|l| 1.0 / l).dot(&r.dot(&bf.y))
        };
        Ok(LlsLocalFlow {
            q: bf.q().clone(),
            gram,
            eta_star,
            n,
        })
    }

    pub fn eta_star(&self) -> &Matrix {
        &self.eta_star
    }

    pub fn step(&self, theta0: &Params, h: f64) -> Result<Params, SolverError> {
        check_step(h)?;
        if theta0.nrows() != self.q.nrows() || theta0.ncols() != self.eta_star.ncols() {
            return Err(ProblemError::DimensionMismatch(format!(
                "parameters {}x{} do not fit batch factors",
                theta0.nrows(),
                theta0.ncols()
            ))
            .into());
        }
        if h == 0.0 {
            return Ok(theta0.clone());
        }
        let eta0 = self.q.t().dot(theta0);
        let decay = self.gram.exp(-h / self.n as f64);
        let eta_h = decay.dot(&(&eta0 - &self.eta_star)) + &self.eta_star;
        Ok(theta0 + &self.q.dot(&(eta_h - eta0)))
    }
}

/// Closed-form local least-squares step (full-rank batch).
pub fn lls_local_exact(bf: &BatchFactorization, theta0: &Params, h: f64, n: usize) -> Result<Params, SolverError> {
    LlsLocalFlow::new(bf, n)?.step(theta0, h)
}

fn row_norm_sq(x: ArrayView1<f64>) -> Result<f64, SolverError> {
    let norm_sq = x.dot(&x);
    if norm_sq > 0.0 {
        Ok(norm_sq)
    } else {
        Err(SolverError::ZeroRow)
    }
}

/// Unit-batch closed form:
/// `θ(h) = θ₀ + (y − xᵀθ₀)/‖x‖² · (1 − e^{−‖x‖²h/n}) · x`.
pub fn lls_local_unit(x: ArrayView1<f64>, y: f64, theta0: ArrayView1<f64>, h: f64, n: usize) -> Result<Vector, SolverError> {
    check_step(h)?;
    let norm_sq = row_norm_sq(x)?;
    let weight = (y - x.dot(&theta0)) / norm_sq * -(-norm_sq * h / n as f64).exp_m1();
    Ok(&theta0 + &(&x * weight))
}

/// Projection of `θ₀` onto the hyperplane `xᵀθ = y`; the `h → ∞` limit of
/// [`lls_local_unit`].
pub fn kaczmarz_step(x: ArrayView1<f64>, y: f64, theta0: ArrayView1<f64>) -> Result<Vector, SolverError> {
    let norm_sq = row_norm_sq(x)?;
    let weight = (y - x.dot(&theta0)) / norm_sq;
    Ok(&theta0 + &(&x * weight))
}

/// Integrates the reduced local flow with Dormand–Prince and lifts the result back.
pub fn local_step_rk(
    pb: &Problem,
    bf: &BatchFactorization,
    theta0: &Params,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<LocalStepReport, SolverError> {
    check_step(h)?;
    pb.check_params(theta0)?;
    let before = problems::batch_loss(pb, bf, theta0)?;
    let eta0 = bf.project(theta0);
    let shape = eta0.dim();
    let flat0 = Vector::from_iter(eta0.iter().copied());
    let solution = ode::rk45_integrate(
        |state: &Vector| {
            let eta = state
                .view()
                .into_shape_with_order(shape)
                .expect("reduced state keeps its shape");
            let rhs = problems::reduced_rhs(pb, bf, eta).expect("reduced state keeps its shape");
            Vector::from_iter(rhs.iter().copied())
        },
        &flat0,
        (0.0, h),
        cfg,
    )?;
    let eta_h = solution
        .y_end
        .into_shape_with_order(shape)
        .expect("reduced state keeps its shape");
    let theta_next = theta0 + &bf.q().dot(&(eta_h - eta0));
    let after = problems::batch_loss(pb, bf, &theta_next)?;
    Ok(LocalStepReport {
        theta_next,
        method: StepMethod::Rk45,
        rhs_evals: solution.rhs_evals,
        batch_loss_before: before,
        batch_loss_after: after,
    })
}

/// Vanilla minibatch SGD: `θ₀ − α ∇f_i(θ₀)`.
pub fn euler_step(pb: &Problem, bf: &BatchFactorization, theta0: &Params, alpha: f64) -> Result<Params, SolverError> {
    let grad = problems::batch_gradient(pb, bf, theta0)?;
    Ok(theta0 - &(grad * alpha))
}

/// One explicit Euler step of length `h` on the local flow,
/// `θ₀ − (h/n) X_iᵀ(link(X_iθ₀) − Y_i)`.
pub fn euler_local_step(pb: &Problem, bf: &BatchFactorization, theta0: &Params, h: f64) -> Result<Params, SolverError> {
    check_step(h)?;
    let rhs = problems::local_rhs(pb, bf, theta0)?;
    Ok(theta0 + &(rhs * h))
}

/// Closed-form step wrapped in a report, for uniform bookkeeping with [`local_step_rk`].
pub fn lls_step_report(
    pb: &Problem,
    bf: &BatchFactorization,
    flow: &LlsLocalFlow,
    theta0: &Params,
    h: f64,
) -> Result<LocalStepReport, SolverError> {
    let before = problems::batch_loss(pb, bf, theta0)?;
    let theta_next = flow.step(theta0, h)?;
    let after = problems::batch_loss(pb, bf, &theta_next)?;
    Ok(LocalStepReport {
        theta_next,
        method: StepMethod::ClosedForm,
        rhs_evals: 0,
        batch_loss_before: before,
        batch_loss_after: after,
    })
}

/// Column view of a `p × 1` parameter matrix.
pub fn as_column(theta: &Params) -> ArrayView1<'_, f64> {
    theta.column(0)
}

/// `p × 1` parameter matrix from a vector.
pub fn from_column(v: Vector) -> Params {
    v.insert_axis(Axis(1))
}
