//! Small dense complex linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type ComplexMatrix = DMatrix<Complex64>;
pub type ComplexVector = DVector<Complex64>;

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn frob_norm_sq(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn frob_norm(m: &ComplexMatrix) -> f64 {
    frob_norm_sq(m).sqrt()
}

pub fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `xᴴ y` for plain slices.
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Normalized correlation `|xᴴy| / (‖x‖‖y‖)`; zero if either vector vanishes.
pub fn normalized_correlation(x: &[Complex64], y: &[Complex64]) -> f64 {
    let nx = vec_norm(x);
    let ny = vec_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    inner(x, y).norm() / (nx * ny)
}

fn to_faer(m: &ComplexMatrix) -> faer::Mat<Complex64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a square matrix, in no particular order.
pub fn eigenvalues(m: &ComplexMatrix) -> Result<Vec<Complex64>, String> {
    if m.nrows() != m.ncols() {
        return Err("eigenvalues need a square matrix".into());
    }
    to_faer(m).eigenvalues().map_err(|e| format!("{e:?}"))
}

/// Singular values in descending order.
pub fn singular_values(m: &ComplexMatrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    match to_faer(m).singular_values() {
        Ok(s) => s,
        Err(_) => vec![f64::NAN; m.nrows().min(m.ncols())],
    }
}

/// Thin SVD `m = U diag(s) Vᴴ` with singular values sorted descending.
/// Returns `(U, s, V)` (V, not Vᴴ).
pub fn svd_sorted(m: &ComplexMatrix) -> (ComplexMatrix, Vec<f64>, ComplexMatrix) {
    let r = m.nrows().min(m.ncols());
    if r == 0 {
        return (
            ComplexMatrix::zeros(m.nrows(), 0),
            Vec::new(),
            ComplexMatrix::zeros(m.ncols(), 0),
        );
    }
    let Ok(svd) = to_faer(m).thin_svd() else {
        let nan = Complex64::new(f64::NAN, f64::NAN);
        return (
            ComplexMatrix::from_element(m.nrows(), r, nan),
            vec![f64::NAN; r],
            ComplexMatrix::from_element(m.ncols(), r, nan),
        );
    };
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    (
        ComplexMatrix::from_fn(m.nrows(), r, |i, j| u[(i, j)]),
        (0..r).map(|i| s[i].re).collect(),
        ComplexMatrix::from_fn(m.ncols(), r, |i, j| v[(i, j)]),
    )
}

/// Smallest singular value relative to the largest column norm scale; columns
/// are normalized first so the result measures linear independence only.
pub fn min_singular_value_normalized(m: &ComplexMatrix) -> f64 {
    let mut n = m.clone();
    for mut col in n.column_iter_mut() {
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        col /= Complex64::from(norm);
    }
    if n.nrows() < n.ncols() {
        return 0.0;
    }
    singular_values(&n).last().copied().unwrap_or(0.0)
}

pub fn numerical_rank(m: &ComplexMatrix, rtol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > rtol * smax).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudo-inverse with relative cutoff `rtol`.
pub fn pinv(m: &ComplexMatrix, rtol: f64) -> ComplexMatrix {
    if m.nrows() == 0 || m.ncols() == 0 {
        return ComplexMatrix::zeros(m.ncols(), m.nrows());
    }
    let (u, s, v) = svd_sorted(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let mut out = ComplexMatrix::zeros(m.ncols(), m.nrows());
    for (k, &sk) in s.iter().enumerate() {
        if sk > rtol * smax && sk > 0.0 {
            let inv = 1.0 / sk;
            for i in 0..m.ncols() {
                let vik = v[(i, k)] * inv;
                for j in 0..m.nrows() {
                    out[(i, j)] += vik * u[(j, k)].conj();
                }
            }
        }
    }
    out
}

pub fn condition_number(m: &ComplexMatrix) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&a), Some(&b)) if b > 0.0 => a / b,
        _ => f64::INFINITY,
    }
}

/// Solve the Hermitian positive (semi)definite system `a x = b` by Cholesky.
/// On failure a ridge of `1e-12·tr(a)` is added (growing ×10 until the
/// factorization succeeds). The flag reports whether a ridge was needed.
pub fn solve_hpd(a: &ComplexMatrix, b: &ComplexMatrix) -> (ComplexMatrix, bool) {
    if let Some(ch) = a.clone().cholesky() {
        return (ch.solve(b), false);
    }
    let trace: f64 = (0..a.nrows()).map(|i| a[(i, i)].re).sum::<f64>().abs();
    let mut ridge = 1e-12 * trace.max(f64::MIN_POSITIVE);
    for _ in 0..40 {
        let mut reg = a.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += Complex64::from(ridge);
        }
        if let Some(ch) = reg.cholesky() {
            return (ch.solve(b), true);
        }
        ridge *= 10.0;
    }
    (pinv(a, 1e-14) * b, true)
}

/// Orthonormal basis of the column span (columns with singular value above
/// `rtol·σ_max`).
pub fn orthonormal_basis(m: &ComplexMatrix, rtol: f64) -> ComplexMatrix {
    let (u, s, _) = svd_sorted(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let r = s.iter().filter(|&&x| x > rtol * smax && x > 0.0).count();
    u.columns(0, r).into_owned()
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
pub fn max_subspace_angle(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let qa = orthonormal_basis(a, 1e-12);
    let qb = orthonormal_basis(b, 1e-12);
    if qa.ncols() != qb.ncols() || qa.ncols() == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    // sin θ_max = ‖(I − Q_a Q_aᴴ) Q_b‖₂, accurate for small angles.
    let resid = &qb - &qa * (qa.adjoint() * &qb);
    let smax = singular_values(&resid).first().copied().unwrap_or(0.0);
    smax.clamp(0.0, 1.0).asin()
}

/// Kronecker product of two column vectors: `(a ⊗ b)[i·len(b) + j] = a[i] b[j]`.
pub fn kron_vec(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        for &y in b {
            out.push(x * y);
        }
    }
    out
}

pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    ComplexMatrix::from_fn(ra * rb, ca * cb, |i, j| {
        a[(i / rb, j / cb)] * b[(i % rb, j % cb)]
    })
}

/// Unit-norm copy of every column (zero columns are left untouched).
pub fn normalize_columns(m: &ComplexMatrix) -> (ComplexMatrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.ncols());
    for mut col in out.column_iter_mut() {
        let n = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if n > 0.0 {
            col /= Complex64::from(n);
        }
        norms.push(n);
    }
    (out, norms)
}


#[cfg(test)]
mod svd_tests {
    use super::*;

    #[test]
    fn rank_one_tall_svd_reconstructs() {
        let g = ComplexMatrix::from_fn(20, 1, |i, _| Complex64::from_polar(1.0, 0.3 * i as f64));
        let a = ComplexMatrix::from_fn(3, 1, |i, _| {
            Complex64::from_polar(0.1 + 0.01 * i as f64, 1.7 * i as f64)
        });
        let x = &g * a.transpose();
        let (u, s, v) = svd_sorted(&x);
        let r = u.column(0) * v.column(0).adjoint() * c64(s[0], 0.0);
        assert!(frob_norm(&(r - &x)) < 1e-14 * frob_norm(&x));
        assert!(s[1] < 1e-14 * s[0]);
    }
}
