//! Objective families: linear least squares, binary logistic regression and
//! softmax regression.
//!
//! All three share one shape convention. The design matrix `x` is `n × p`,
//! targets are `n × K` (`K = 1` for least squares and logistic, one-hot rows
//! for softmax) and parameters are `p × K`. Each model is `link(X Θ)`, and
//! every gradient has the form `Xᵀ (link(X Θ) − Y) / count`.
//!
//! The least-squares loss is `‖Xθ − y‖² / (2n)`, the normalization under
//! which `Xᵀ(Xθ − y)/n` is its exact gradient.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, ThinQr, Vector};

/// Parameters: `p × K`, a column vector when `K = 1`.
pub type Params = Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("{0} is not defined for {1:?} problems")]
    Unsupported(&'static str, ProblemKind),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    LeastSquares,
    Logistic,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub kind: ProblemKind,
    pub x: Matrix,
    pub targets: Matrix,
    /// Known solution (hidden θ* or phantom), when the generator has one.
    pub reference: Option<Params>,
}

impl Problem {
    pub fn new(kind: ProblemKind, x: Matrix, targets: Matrix) -> Result<Self, ProblemError> {
        let (n, p) = x.dim();
        if n == 0 || p == 0 {
            return Err(ProblemError::DimensionMismatch(format!("empty design matrix {n}x{p}")));
        }
        if targets.nrows() != n {
            return Err(ProblemError::DimensionMismatch(format!(
                "{n} samples but {} target rows",
                targets.nrows()
            )));
        }
        if x.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(ProblemError::InvalidTargets("non-finite data".into()));
        }
        match kind {
            ProblemKind::LeastSquares => {
                if targets.ncols() != 1 {
                    return Err(ProblemError::InvalidTargets("least squares needs one target column".into()));
                }
            }
            ProblemKind::Logistic => {
                if targets.ncols() != 1 || targets.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(ProblemError::InvalidTargets("logistic targets must be a single 0/1 column".into()));
                }
            }
            ProblemKind::Softmax => {
                if targets.ncols() < 2 {
                    return Err(ProblemError::InvalidTargets("softmax needs at least two classes".into()));
                }
                for row in targets.rows() {
                    let ones = row.iter().filter(|&&v| v == 1.0).count();
                    let zeros = row.iter().filter(|&&v| v == 0.0).count();
                    if ones != 1 || ones + zeros != row.len() {
                        return Err(ProblemError::InvalidTargets("softmax targets must be one-hot rows".into()));
                    }
                }
            }
        }
        Ok(Problem {
            kind,
            x,
            targets,
            reference: None,
        })
    }

    pub fn least_squares(x: Matrix, y: Vector) -> Result<Self, ProblemError> {
        Self::new(ProblemKind::LeastSquares, x, y.insert_axis(Axis(1)))
    }

    pub fn logistic(x: Matrix, labels: Vector) -> Result<Self, ProblemError> {
        Self::new(ProblemKind::Logistic, x, labels.insert_axis(Axis(1)))
    }

    pub fn softmax(x: Matrix, labels: &[usize], classes: usize) -> Result<Self, ProblemError> {
        let mut targets = Matrix::zeros((labels.len(), classes));
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(ProblemError::InvalidTargets(format!("label {label} out of range for {classes} classes")));
            }
            targets[[i, label]] = 1.0;
        }
        Self::new(ProblemKind::Softmax, x, targets)
    }

    pub fn with_reference(mut self, reference: Params) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn classes(&self) -> usize {
        self.targets.ncols()
    }

    pub fn zero_params(&self) -> Params {
        Params::zeros((self.p(), self.classes()))
    }

    /// Rows of `x` and `targets` selected by `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> (Matrix, Matrix) {
        (self.x.select(Axis(0), rows), self.targets.select(Axis(0), rows))
    }

    pub fn check_params(&self, theta: &Params) -> Result<(), ProblemError> {
        if theta.dim() != (self.p(), self.classes()) {
            return Err(ProblemError::DimensionMismatch(format!(
                "parameters are {}x{}, expected {}x{}",
                theta.nrows(),
                theta.ncols(),
                self.p(),
                self.classes()
            )));
        }
        Ok(())
    }
}

/// A fixed minibatch with the thin QR factors of `X_iᵀ`, computed once.
#[derive(Debug, Clone)]
pub struct BatchFactorization {
    /// Ordinal of the batch within its partition, starting at 0.
    pub index: usize,
    /// Sample indices of the batch, in the problem's row numbering.
    pub rows: Vec<usize>,
    pub x: Matrix,
    pub y: Matrix,
    /// `X_iᵀ = Q R` with `Q: p × k`, `R: k × b`, `k = min(p, b)`.
    pub qr: ThinQr,
}

impl BatchFactorization {
    pub fn new(pb: &Problem, index: usize, rows: Vec<usize>) -> Result<Self, ProblemError> {
        if rows.is_empty() {
            return Err(ProblemError::DimensionMismatch("empty batch".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= pb.n()) {
            return Err(ProblemError::DimensionMismatch(format!("row {bad} out of range")));
        }
        let (x, y) = pb.select_rows(&rows);
        let qr = linalg::thin_qr(x.t())?;
        Ok(BatchFactorization { index, rows, x, y, qr })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// `Q` (`p × k`).
    pub fn q(&self) -> &Matrix {
        &self.qr.q
    }

    /// `R` (`k × b`).
    pub fn r(&self) -> &Matrix {
        &self.qr.r
    }

    /// `η = Qᵀ θ`.
    pub fn project(&self, theta: &Params) -> Matrix {
        self.qr.q.t().dot(theta)
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Column-wise softmax of a `K × b` matrix.
pub fn softmax_cols(m: ArrayView2<f64>) -> Matrix {
    let mut out = m.to_owned();
    for mut col in out.columns_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let total: f64 = col.sum();
        col.mapv_inplace(|v| v / total);
    }
    out
}

fn softmax_rows(m: ArrayView2<f64>) -> Matrix {
    softmax_cols(m.t()).reversed_axes()
}

/// `link(scores)` row-wise for the given model.
fn link(kind: ProblemKind, scores: Matrix) -> Matrix {
    match kind {
        ProblemKind::LeastSquares => scores,
        ProblemKind::Logistic => scores.mapv(sigmoid),
        ProblemKind::Softmax => softmax_rows(scores.view()),
    }
}

/// `link(scores) − targets`; the common factor of every gradient.
fn residual_from_scores(kind: ProblemKind, scores: Matrix, targets: ArrayView2<f64>) -> Matrix {
    link(kind, scores) - &targets
}

fn mean_loss_from_scores(kind: ProblemKind, scores: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    let count = scores.nrows() as f64;
    let total: f64 = match kind {
        ProblemKind::LeastSquares => {
            scores.iter().zip(targets.iter()).map(|(z, y)| (z - y).powi(2)).sum::<f64>() * 0.5
        }
        ProblemKind::Logistic => scores
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum(),
        ProblemKind::Softmax => scores
            .rows()
            .into_iter()
            .zip(targets.rows())
            .map(|(z, y)| log_sum_exp(z.iter().copied()) - z.dot(&y))
            .sum(),
    };
    total / count
}

fn check_rows(x: ArrayView2<f64>, y: ArrayView2<f64>, theta: &Params) -> Result<(), ProblemError> {
    if x.ncols() != theta.nrows() || y.ncols() != theta.ncols() || x.nrows() != y.nrows() {
        return Err(ProblemError::DimensionMismatch(format!(
            "data {}x{} / targets {}x{} incompatible with parameters {}x{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols(),
            theta.nrows(),
            theta.ncols()
        )));
    }
    Ok(())
}

/// Mean loss over an arbitrary set of rows.
pub fn rows_loss(kind: ProblemKind, x: ArrayView2<f64>, y: ArrayView2<f64>, theta: &Params) -> Result<f64, ProblemError> {
    check_rows(x, y, theta)?;
    Ok(mean_loss_from_scores(kind, x.dot(theta).view(), y))
}

/// `Xᵀ(link(XΘ) − Y) / rows` over an arbitrary set of rows.
pub fn rows_gradient(kind: ProblemKind, x: ArrayView2<f64>, y: ArrayView2<f64>, theta: &Params) -> Result<Params, ProblemError> {
    check_rows(x, y, theta)?;
    let resid = residual_from_scores(kind, x.dot(theta), y);
    Ok(x.t().dot(&resid) / x.nrows() as f64)
}

pub fn loss(pb: &Problem, theta: &Params) -> Result<f64, ProblemError> {
    rows_loss(pb.kind, pb.x.view(), pb.targets.view(), theta)
}

/// Mean loss over one batch (the objective the local flow descends, up to the factor `b/n`).
pub fn batch_loss(pb: &Problem, bf: &BatchFactorization, theta: &Params) -> Result<f64, ProblemError> {
    rows_loss(pb.kind, bf.x.view(), bf.y.view(), theta)
}

pub fn batch_gradient(pb: &Problem, bf: &BatchFactorization, theta: &Params) -> Result<Params, ProblemError> {
    rows_gradient(pb.kind, bf.x.view(), bf.y.view(), theta)
}

pub fn full_gradient(pb: &Problem, theta: &Params) -> Result<Params, ProblemError> {
    rows_gradient(pb.kind, pb.x.view(), pb.targets.view(), theta)
}

/// Right-hand side of the local gradient flow in parameter space:
/// `−(1/n) X_iᵀ (link(X_i Θ) − Y_i)`.
pub fn local_rhs(pb: &Problem, bf: &BatchFactorization, theta: &Params) -> Result<Params, ProblemError> {
    let grad = batch_gradient(pb, bf, theta)?;
    Ok(grad * (-(bf.size() as f64) / pb.n() as f64))
}

/// Right-hand side of the QR-reduced local flow: `−(1/n) R (link(Rᵀ η) − Y_i)`,
/// with `η = Qᵀ Θ` of shape `k × K`.
pub fn reduced_rhs(pb: &Problem, bf: &BatchFactorization, eta: ArrayView2<f64>) -> Result<Matrix, ProblemError> {
    let r = bf.r();
    if eta.nrows() != r.nrows() || eta.ncols() != pb.classes() {
        return Err(ProblemError::DimensionMismatch(format!(
            "reduced state is {}x{}, expected {}x{}",
            eta.nrows(),
            eta.ncols(),
            r.nrows(),
            pb.classes()
        )));
    }
    let scores = r.t().dot(&eta);
    let resid = residual_from_scores(pb.kind, scores, bf.y.view());
    Ok(r.dot(&resid) * (-1.0 / pb.n() as f64))
}

/// Predicted class per row: `z ≥ 0` for logistic, first maximal score for softmax.
pub fn predict(pb_kind: ProblemKind, x: ArrayView2<f64>, theta: &Params) -> Result<Vec<usize>, ProblemError> {
    let scores = x.dot(theta);
    match pb_kind {
        ProblemKind::LeastSquares => Err(ProblemError::Unsupported("classification", pb_kind)),
        ProblemKind::Logistic => Ok(scores.column(0).iter().map(|&z| usize::from(z >= 0.0)).collect()),
        ProblemKind::Softmax => Ok(scores.rows().into_iter().map(|row| argmax(row.iter().copied())).collect()),
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Class label per row of a problem's targets.
pub fn labels(pb: &Problem) -> Result<Vec<usize>, ProblemError> {
    match pb.kind {
        ProblemKind::LeastSquares => Err(ProblemError::Unsupported("labels", pb.kind)),
        ProblemKind::Logistic => Ok(pb.targets.column(0).iter().map(|&v| v as usize).collect()),
        ProblemKind::Softmax => Ok(pb.targets.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()),
    }
}

/// Misclassification rate of `theta` on `holdout`.
pub fn test_error(pb: &Problem, theta: &Params, holdout: &Problem) -> Result<f64, ProblemError> {
    if holdout.kind != pb.kind || holdout.p() != pb.p() || holdout.classes() != pb.classes() {
        return Err(ProblemError::DimensionMismatch("holdout does not match the training problem".into()));
    }
    holdout.check_params(theta)?;
    let predicted = predict(holdout.kind, holdout.x.view(), theta)?;
    let truth = labels(holdout)?;
    let wrong = predicted.iter().zip(&truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// `‖XΘ − Y‖_F / ‖Y‖_F`.
pub fn relative_residual(pb: &Problem, theta: &Params) -> Result<f64, ProblemError> {
    pb.check_params(theta)?;
    let resid = pb.x.dot(theta) - &pb.targets;
    let denom = linalg::frobenius(pb.targets.view());
    let num = linalg::frobenius(resid.view());
    Ok(if denom > 0.0 { num / denom } else { num })
}

/// `‖Θ − Θ*‖_F / ‖Θ*‖_F`, when the problem carries a reference solution.
pub fn solution_distance(pb: &Problem, theta: &Params) -> Option<f64> {
    let reference = pb.reference.as_ref()?;
    if reference.dim() != theta.dim() {
        return None;
    }
    let denom = linalg::frobenius(reference.view());
    let num = linalg::frobenius((theta - reference).view());
    Some(if denom > 0.0 { num / denom } else { num })
}
