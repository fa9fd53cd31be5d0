#![allow(dead_code)]

use flowsplit::linalg::{self, Matrix};
use flowsplit::ode::IntegratorConfig;
use flowsplit::problems::{self, BatchFactorization, Problem, ProblemKind};
use flowsplit::solvers;
use ndarray::{s, Array2};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn random_problem(kind: ProblemKind, n: usize, p: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(n, p, &mut rng);
    match kind {
        ProblemKind::LeastSquares => Problem::least_squares(x, normal(n, 1, &mut rng).column(0).to_owned()).unwrap(),
        ProblemKind::Logistic => {
            let labels = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            Problem::logistic(x, labels).unwrap()
        }
        ProblemKind::Softmax => {
            let classes = 3;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Problem::softmax(x, &labels, classes).unwrap()
        }
    }
}

pub fn kind_strategy() -> impl Strategy<Value = ProblemKind> {
    prop_oneof![
        Just(ProblemKind::LeastSquares),
        Just(ProblemKind::Logistic),
        Just(ProblemKind::Softmax)
    ]
}

fn first_batch(pb: &Problem, b: usize) -> BatchFactorization {
    BatchFactorization::new(pb, 0, (0..b).collect()).unwrap()
}

fn theta_for(pb: &Problem, rng: &mut ChaCha8Rng, scale: f64) -> Matrix {
    normal(pb.p(), pb.classes(), rng) * scale
}

pub fn qr_orthogonality(rows: usize, cols: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = normal(rows, cols, &mut rng);
    let qr = linalg::thin_qr(m.view()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let defect = linalg::orthonormality_defect(qr.q.view());
    prop_assert!(defect < 1e-12, "QᵀQ − I = {defect:e}");
    let rebuilt = qr.q.dot(&qr.r);
    let rel = linalg::frobenius((&rebuilt - &m).view()) / linalg::frobenius(m.view());
    prop_assert!(rel < 1e-12, "reconstruction {rel:e}");
    for i in 0..qr.r.nrows() {
        prop_assert!(qr.r[[i, i]] >= 0.0);
        for j in 0..i.min(qr.r.ncols()) {
            prop_assert!(qr.r[[i, j]] == 0.0);
        }
    }
    Ok(())
}

pub fn gradient_matches_finite_differences(kind: ProblemKind, n: usize, p: usize, seed: u64) -> Result<(), TestCaseError> {
    let pb = random_problem(kind, n, p, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let theta = theta_for(&pb, &mut rng, 0.5);
    let g = problems::full_gradient(&pb, &theta).unwrap();
    let eps = 1e-6;
    let mut fd = Matrix::zeros(theta.raw_dim());
    for idx in 0..theta.len() {
        let (i, j) = (idx / theta.ncols(), idx % theta.ncols());
        let mut plus = theta.clone();
        plus[[i, j]] += eps;
        let mut minus = theta.clone();
        minus[[i, j]] -= eps;
        fd[[i, j]] = (problems::loss(&pb, &plus).unwrap() - problems::loss(&pb, &minus).unwrap()) / (2.0 * eps);
    }
    let rel = linalg::frobenius((&g - &fd).view()) / linalg::frobenius(g.view()).max(1e-8);
    prop_assert!(rel < 1e-5, "{kind:?}: relative gradient error {rel:e}");
    Ok(())
}

/// Local steps only move θ inside `range(Q)`.
pub fn complement_conserved(kind: ProblemKind, b: usize, p: usize, h: f64, seed: u64) -> Result<(), TestCaseError> {
    let n = b + 5;
    let pb = random_problem(kind, n, p, seed);
    let bf = first_batch(&pb, b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let theta0 = theta_for(&pb, &mut rng, 1.0);
    let next = match kind {
        ProblemKind::LeastSquares => solvers::lls_local_exact(&bf, &theta0, h, n).unwrap(),
        _ => solvers::local_step_rk(&pb, &bf, &theta0, h, &IntegratorConfig::with_tolerances(1e-8, 1e-10))
            .unwrap()
            .theta_next,
    };
    let delta = &next - &theta0;
    let q = bf.q();
    let off = &delta - &q.dot(&q.t().dot(&delta));
    let scale = 1.0 + linalg::frobenius(theta0.view());
    let dev = linalg::frobenius(off.view()) / scale;
    prop_assert!(dev < 1e-10, "{kind:?}: complement moved by {dev:e}");
    Ok(())
}

/// The local flow is a gradient flow of the batch loss, so the batch loss
/// cannot increase along it.
pub fn batch_loss_monotone(kind: ProblemKind, b: usize, p: usize, h: f64, seed: u64) -> Result<(), TestCaseError> {
    let n = b + 5;
    let pb = random_problem(kind, n, p, seed);
    let bf = first_batch(&pb, b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5678);
    let theta0 = theta_for(&pb, &mut rng, 1.0);
    let before = problems::batch_loss(&pb, &bf, &theta0).unwrap();
    let next = match kind {
        ProblemKind::LeastSquares => solvers::lls_local_exact(&bf, &theta0, h, n).unwrap(),
        _ => solvers::local_step_rk(&pb, &bf, &theta0, h, &IntegratorConfig::with_tolerances(1e-8, 1e-10))
            .unwrap()
            .theta_next,
    };
    let after = problems::batch_loss(&pb, &bf, &next).unwrap();
    prop_assert!(after <= before * (1.0 + 1e-10) + 1e-12, "{kind:?}: {before} -> {after}");
    Ok(())
}

pub fn softmax_columns_normalized(rows: usize, cols: usize, scale: f64, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = normal(rows, cols, &mut rng) * scale;
    let out = problems::softmax_cols(m.view());
    for j in 0..cols {
        let col = out.slice(s![.., j]);
        prop_assert!(col.iter().all(|v| v.is_finite() && *v >= 0.0));
        let total: f64 = col.sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "column {j} sums to {total}");
    }
    Ok(())
}
