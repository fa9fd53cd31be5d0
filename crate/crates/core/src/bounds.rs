//! Global error of first-order splitting for the linear flow `θ' = Aθ` with
//! `A = Σ A_i`, `A_i = −X_iᵀX_i` taken from a row partition of `X`.
//!
//! Each `A_i` has the low-rank form `Q_i B_i Q_iᵀ` with `X_iᵀ = Q_i R_i` and
//! `B_i = −R_i R_iᵀ`, so `e^{A_i t} = Π_i + Q_i e^{B_i t} Q_iᵀ` with the
//! projector complement `Π_i = I − Q_iQ_iᵀ`. As `t → ∞` every exponential
//! term decays and `‖e^{A_k t}···e^{A_1 t} − e^{At}‖` tends to `‖Π_k···Π_1‖`.
//!
//! Products are taken with the first part rightmost (applied first).

use std::io::Write;

use ndarray::{s, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SymEigen};

/// `A` counts as full rank when `λ_max(A) < −FULL_RANK_TOL · ‖A‖₂`.
pub const FULL_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("split operator is rank deficient: {0}")]
    RankDeficient(String),
    #[error("invalid split: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SplitPart {
    /// Orthonormal basis of `range(X_iᵀ)`, `N × r_i`.
    pub q: Matrix,
    /// `B_i = −R_i R_iᵀ`, `r_i × r_i`.
    pub b: Matrix,
    b_eig: SymEigen,
}

impl SplitPart {
    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    /// `A_i = Q_i B_i Q_iᵀ`.
    pub fn dense(&self) -> Matrix {
        self.q.dot(&self.b).dot(&self.q.t())
    }

    /// `μ(B_i)`.
    pub fn log_norm(&self) -> f64 {
        self.b_eig.max()
    }

    /// `M ← e^{A_i t} M`, via the low-rank identity.
    fn apply_exp(&self, t: f64, m: &mut Matrix) {
        let inner = self.b_eig.map(|l| (t * l).exp_m1());
        let update = self.q.dot(&inner.dot(&self.q.t().dot(&*m)));
        *m += &update;
    }

    /// `M ← Π_i M`.
    fn apply_complement(&self, m: &mut Matrix) {
        let update = self.q.dot(&self.q.t().dot(&*m));
        *m -= &update;
    }
}

#[derive(Debug, Clone)]
pub struct SplitOperators {
    pub parts: Vec<SplitPart>,
    /// `A = −XᵀX`.
    pub a_full: Matrix,
    a_eig: SymEigen,
}

/// Standard normal `n × n` matrix.
pub fn random_square(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_simple_fn((n, n), || StandardNormal.sample(&mut rng))
}

/// Splits the rows of `x` into `blocks` near-equal contiguous groups (the
/// first `rows mod blocks` groups get one extra row).
pub fn build_split(x: ArrayView2<f64>, blocks: usize) -> Result<SplitOperators, BoundsError> {
    let (rows, cols) = x.dim();
    if blocks == 0 || blocks > rows {
        return Err(BoundsError::InvalidInput(format!("cannot split {rows} rows into {blocks} blocks")));
    }
    let base = rows / blocks;
    let extra = rows % blocks;
    let mut parts = Vec::with_capacity(blocks);
    let mut start = 0;
    for i in 0..blocks {
        let len = base + usize::from(i < extra);
        let block = x.slice(s![start..start + len, ..]);
        start += len;
        let qr = linalg::thin_qr(block.t()).map_err(|e| BoundsError::RankDeficient(format!("block {i}: {e}")))?;
        let b = -qr.r.dot(&qr.r.t());
        let b_eig = SymEigen::new(b.view());
        parts.push(SplitPart { q: qr.q, b, b_eig });
    }
    let a_full = -x.t().dot(&x);
    let a_eig = SymEigen::new(a_full.view());
    let scale = a_eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if cols == 0 || a_eig.max() >= -FULL_RANK_TOL * scale {
        return Err(BoundsError::RankDeficient(format!(
            "A = -XᵀX is singular (largest eigenvalue {:e}, scale {scale:e})",
            a_eig.max()
        )));
    }
    Ok(SplitOperators { parts, a_full, a_eig })
}

impl SplitOperators {
    pub fn dim(&self) -> usize {
        self.a_full.nrows()
    }

    /// `Σ A_i`, reassembled from the low-rank factors.
    pub fn sum_of_parts(&self) -> Matrix {
        let n = self.dim();
        self.parts.iter().fold(Matrix::zeros((n, n)), |acc, p| acc + p.dense())
    }

    /// `e^{A_k t} ··· e^{A_1 t}`.
    pub fn split_propagator(&self, t: f64) -> Matrix {
        let mut m = Matrix::eye(self.dim());
        for part in &self.parts {
            part.apply_exp(t, &mut m);
        }
        m
    }

    /// `e^{At}`.
    pub fn exact_propagator(&self, t: f64) -> Matrix {
        self.a_eig.exp(t)
    }

    /// Largest logarithmic norm among the `B_i` and `A`; every exponential in
    /// the error decays at least like `e^{t μ_max}`.
    pub fn decay_rate(&self) -> f64 {
        self.parts
            .iter()
            .map(SplitPart::log_norm)
            .fold(self.a_eig.max(), f64::max)
    }

    /// Reversed copy: last part applied first.
    pub fn reversed(&self) -> SplitOperators {
        let mut out = self.clone();
        out.parts.reverse();
        out
    }
}

/// `‖e^{A_k t} ··· e^{A_1 t} − e^{At}‖₂`.
pub fn splitting_error(ops: &SplitOperators, t: f64) -> f64 {
    let diff = ops.split_propagator(t) - ops.exact_propagator(t);
    linalg::spectral_norm(diff.view())
}

/// `‖Π_k ··· Π_1‖₂`.
pub fn error_limit(ops: &SplitOperators) -> f64 {
    let mut m = Matrix::eye(ops.dim());
    for part in &ops.parts {
        part.apply_complement(&mut m);
    }
    linalg::spectral_norm(m.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub error: f64,
    pub limit: f64,
}

pub fn error_sweep(ops: &SplitOperators, t_grid: &[f64]) -> Result<Vec<SweepRow>, BoundsError> {
    if t_grid.iter().any(|&t| !(t >= 0.0)) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(BoundsError::InvalidInput("time grid must be nonnegative and ascending".into()));
    }
    let limit = error_limit(ops);
    Ok(t_grid
        .par_iter()
        .map(|&t| SweepRow {
            t,
            error: splitting_error(ops, t),
            limit,
        })
        .collect())
}

/// `points` evenly spaced times on `[0, t_max]`.
pub fn linear_grid(t_max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| t_max * i as f64 / (points - 1) as f64).collect(),
    }
}

/// Writes the sweep as CSV with header `t,error,limit`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), BoundsError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["t", "error", "limit"]).map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([row.t.to_string(), row.error.to_string(), row.limit.to_string()])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> BoundsError {
    BoundsError::Io(std::io::Error::other(e))
}
