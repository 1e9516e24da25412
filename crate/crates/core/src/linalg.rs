//! Complex dense linear algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            for jj in 0..bc {
                for ii in 0..br {
                    out[(i * br + ii, j * bc + jj)] = s * b[(ii, jj)];
                }
            }
        }
    }
    out
}

/// Column-stacking vectorization, `vec(A)`.
pub fn vectorize(a: &CMatrix) -> CVector {
    CVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &CVector, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Numerical rank threshold: `σ_max · max(rows, cols) · ε`.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * rows.max(cols) as f64 * f64::EPSILON
}

/// Singular values in descending order.
pub fn singular_values(a: &CMatrix) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank at the default tolerance.
pub fn numerical_rank(a: &CMatrix) -> usize {
    let s = singular_values(a);
    match s.first() {
        None => 0,
        Some(&smax) if smax == 0.0 => 0,
        Some(&smax) => {
            let tol = rank_tolerance(smax, a.nrows(), a.ncols());
            s.iter().filter(|&&x| x > tol).count()
        }
    }
}

/// Moore–Penrose pseudoinverse, truncated at the numerical rank tolerance.
/// Returns the pseudoinverse and the rank used.
///
/// The SVD decides the rank. At full rank the inverse itself comes from a QR
/// factorization, which is accurate to roundoff; the complex SVD can lose
/// several digits on well-conditioned inputs.
pub fn pseudo_inverse(a: &CMatrix) -> (CMatrix, usize) {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return (CMatrix::zeros(cols, rows), 0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return (CMatrix::zeros(cols, rows), 0);
    }
    let tol = rank_tolerance(smax, rows, cols);
    let k = svd.singular_values.len();
    if svd.singular_values.iter().all(|&s| s > tol) {
        return (full_rank_pinv(a), k);
    }
    // pinv = V Σ⁺ Uᴴ
    let mut v_scaled = v_t.adjoint();
    let mut rank = 0;
    for j in 0..k {
        let s = svd.singular_values[j];
        let inv = if s > tol {
            rank += 1;
            1.0 / s
        } else {
            0.0
        };
        v_scaled.column_mut(j).scale_mut(inv);
    }
    (v_scaled * u.adjoint(), rank)
}

/// `R⁻¹Qᴴ` for tall `A = QR`; wide inputs go through `pinv(Aᴴ)ᴴ`.
fn full_rank_pinv(a: &CMatrix) -> CMatrix {
    if a.nrows() < a.ncols() {
        return full_rank_pinv(&a.adjoint()).adjoint();
    }
    let qr = a.clone().qr();
    qr.r().solve_upper_triangular(&qr.q().adjoint()).expect("nonsingular R at full rank")
}

/// Solves `A x = b` for Hermitian positive-definite `A` via Cholesky.
/// Returns `None` when the factorization fails.
pub fn hpd_solve(a: &CMatrix, b: &CMatrix) -> Option<CMatrix> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// 2-norm condition number of `A` from its singular values; infinite when singular.
pub fn condition_number(a: &CMatrix) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}
