//! Dense kernels: Householder thin QR, symmetric (Jacobi) eigendecomposition,
//! matrix exponentials of symmetric and low-rank operators, and the spectral
//! and logarithmic norms.
//!
//! Everything here is a pure function of its inputs. Matrices are plain
//! `ndarray` arrays; no BLAS backend is required.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// A diagonal entry of `R` below `RANK_TOL * ‖M‖_F` marks the input as rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Maximum elementwise asymmetry accepted by [`expm_sym`], relative to `max(1, ‖S‖_max)`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Maximum `‖QᵀQ − I‖_max` accepted by [`expm_lowrank`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is rank deficient: |r[{index},{index}]| = {value:e} below threshold {threshold:e}")]
    RankDeficient {
        index: usize,
        value: f64,
        threshold: f64,
    },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("columns are not orthonormal (max |QᵀQ - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Thin QR factors `M = Q R` of a `p × c` matrix, with `k = min(p, c)`:
/// `q` is `p × k` with orthonormal columns and `r` is `k × c` upper trapezoidal
/// with a nonnegative diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinQr {
    pub q: Matrix,
    pub r: Matrix,
}

impl ThinQr {
    pub fn rank(&self) -> usize {
        self.q.ncols()
    }
}

/// Householder thin QR with the default rank threshold.
pub fn thin_qr(m: ArrayView2<f64>) -> Result<ThinQr, LinalgError> {
    thin_qr_with_tol(m, RANK_TOL)
}

pub fn thin_qr_with_tol(m: ArrayView2<f64>, rank_tol: f64) -> Result<ThinQr, LinalgError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let (rows, cols) = m.dim();
    let k = rows.min(cols);
    let mut a = m.to_owned();
    let mut reflectors: Vec<(Vector, f64)> = Vec::with_capacity(k);

    for j in 0..k {
        let mut v = a.slice(s![j.., j]).to_owned();
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.dot(&v);
        let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        for col in j..cols {
            let mut column = a.slice_mut(s![j.., col]);
            let proj = beta * v.dot(&column);
            column.scaled_add(-proj, &v);
        }
        a[[j, j]] = alpha;
        a.slice_mut(s![j + 1.., j]).fill(0.0);
        reflectors.push((v, beta));
    }

    let mut r = a.slice(s![0..k, ..]).to_owned();
    for i in 0..k {
        for j in 0..i.min(cols) {
            r[[i, j]] = 0.0;
        }
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of the identity.
    let mut q = Matrix::zeros((rows, k));
    for j in 0..k {
        q[[j, j]] = 1.0;
    }
    for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
        if *beta == 0.0 {
            continue;
        }
        for col in 0..k {
            let mut column = q.slice_mut(s![j.., col]);
            let proj = beta * v.dot(&column);
            column.scaled_add(-proj, v);
        }
    }

    for j in 0..k {
        if r[[j, j]] < 0.0 {
            r.row_mut(j).mapv_inplace(|x| -x);
            q.column_mut(j).mapv_inplace(|x| -x);
        }
    }

    let threshold = rank_tol * frobenius(m);
    for j in 0..k {
        let value = r[[j, j]];
        if value.abs() <= threshold {
            return Err(LinalgError::RankDeficient {
                index: j,
                value,
                threshold,
            });
        }
    }
    Ok(ThinQr { q, r })
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(m: ArrayView2<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `‖QᵀQ − I‖_max`.
pub fn orthonormality_defect(q: ArrayView2<f64>) -> f64 {
    let gram = q.t().dot(&q);
    let mut worst = 0.0_f64;
    for ((i, j), v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

pub fn asymmetry(m: ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: ArrayView2<f64>) -> Matrix {
    (&m + &m.t()) * 0.5
}

/// Eigendecomposition `S = V diag(λ) Vᵀ` of a symmetric matrix,
/// eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vector,
    pub vectors: Matrix,
}

impl SymEigen {
    /// Cyclic Jacobi rotations on the symmetrized input.
    pub fn new(s: ArrayView2<f64>) -> Self {
        let n = s.nrows();
        assert_eq!(n, s.ncols(), "eigendecomposition needs a square matrix");
        let mut a = symmetrize(s);
        let mut v = Matrix::eye(n);
        let scale = frobenius(a.view());
        let negligible = f64::EPSILON * 1e-3 * scale;

        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[[p, q]];
                    if apq.abs() <= negligible || apq == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - sn * akq;
                        a[[k, q]] = sn * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - sn * aqk;
                        a[[q, k]] = sn * apk + c * aqk;
                    }
                    a[[p, q]] = 0.0;
                    a[[q, p]] = 0.0;
                    for k in 0..n {
                        let vkp = v[[k, p]];
                        let vkq = v[[k, q]];
                        v[[k, p]] = c * vkp - sn * vkq;
                        v[[k, q]] = sn * vkp + c * vkq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
        let values = Vector::from_iter(order.iter().map(|&i| a[[i, i]]));
        let vectors = v.select(Axis(1), &order);
        SymEigen { values, vectors }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `V diag(f(λ)) Vᵀ`, symmetrized.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = &self.vectors * &self.values.mapv(f).view().insert_axis(Axis(0));
        let out = scaled.dot(&self.vectors.t());
        symmetrize(out.view())
    }

    /// `e^{tS}`.
    pub fn exp(&self, t: f64) -> Matrix {
        self.map(|l| (t * l).exp())
    }
}

fn check_symmetric(s: ArrayView2<f64>) -> Result<(), LinalgError> {
    if s.nrows() != s.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let asym = asymmetry(s);
    if asym > SYMMETRY_TOL * max_abs(s).max(1.0) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// `e^{tS}` for symmetric `S` through its eigendecomposition.
pub fn expm_sym(s: ArrayView2<f64>, t: f64) -> Result<Matrix, LinalgError> {
    check_symmetric(s)?;
    Ok(SymEigen::new(s).exp(t))
}

/// `e^{tQBQᵀ} = (I − QQᵀ) + Q e^{tB} Qᵀ` for `Q` with orthonormal columns and
/// symmetric `B`.
pub fn expm_lowrank(q: ArrayView2<f64>, b: ArrayView2<f64>, t: f64) -> Result<Matrix, LinalgError> {
    if b.nrows() != q.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "q has {} columns but b is {}x{}",
            q.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let deviation = orthonormality_defect(q);
    if deviation > ORTHONORMAL_TOL {
        return Err(LinalgError::NotOrthonormal { deviation });
    }
    let small = expm_sym(b, t)?;
    let r = q.ncols();
    let inner = small - Matrix::eye(r);
    let mut out = q.dot(&inner).dot(&q.t());
    for i in 0..q.nrows() {
        out[[i, i]] += 1.0;
    }
    Ok(out)
}

/// Largest singular value, from the eigendecomposition of the smaller Gram matrix.
pub fn spectral_norm(m: ArrayView2<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() >= m.ncols() {
        m.t().dot(&m)
    } else {
        m.dot(&m.t())
    };
    SymEigen::new(gram.view()).max().max(0.0).sqrt()
}

/// Logarithmic 2-norm `μ(M) = λ_max((M + Mᵀ)/2)`.
pub fn log_norm(m: ArrayView2<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "logarithmic norm needs a square matrix");
    SymEigen::new(symmetrize(m).view()).max()
}

/// Solves `Rᵀ X = Y` for upper-triangular square `R` by forward substitution.
pub fn solve_upper_transposed(r: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Matrix, LinalgError> {
    let k = r.nrows();
    if r.ncols() != k || y.nrows() != k {
        return Err(LinalgError::DimensionMismatch(format!(
            "triangular solve with R {}x{} and rhs {}x{}",
            r.nrows(),
            r.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let mut x = y.to_owned();
    for i in 0..k {
        let diag = r[[i, i]];
        if diag == 0.0 {
            return Err(LinalgError::RankDeficient {
                index: i,
                value: 0.0,
                threshold: 0.0,
            });
        }
        for col in 0..x.ncols() {
            let mut acc = x[[i, col]];
            for j in 0..i {
                acc -= r[[j, i]] * x[[j, col]];
            }
            x[[i, col]] = acc / diag;
        }
    }
    Ok(x)
}

pub fn norm2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}
