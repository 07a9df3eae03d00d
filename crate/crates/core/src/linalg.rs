//! Small dense helpers shared by the operator, analysis and simulation layers.
//!
//! Everything here works on `DMatrix<f64>` with column-major `vec`, so
//! `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::Complex;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical PSD tolerance: `1e-10 · max(largest eigenvalue, 1)`.
pub fn psd_tolerance(largest_eigenvalue: f64) -> f64 {
    1e-10 * largest_eigenvalue.max(1.0)
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

/// Column-major vectorization.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// True when `m` is PSD up to `psd_tolerance` of its own scale.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let top = max_eigenvalue_sym(m).abs();
    min_eigenvalue_sym(m) >= -psd_tolerance(top)
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.is_empty() {
        return Vec::new();
    }
    a.clone().complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Largest singular value by power iteration on `MᵀM`, relative tolerance 1e-12.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    let gram = m.transpose() * m;
    // Start from the heaviest Gram column; it carries a component along the top
    // right-singular vector unless that vector vanishes on the column index.
    let start = (0..gram.ncols())
        .max_by(|&i, &j| gram.column(i).norm().total_cmp(&gram.column(j).norm()))
        .unwrap_or(0);
    let mut v: DVector<f64> = gram.column(start).into_owned();
    let mut sigma2 = 0.0;
    for _ in 0..5000 {
        let norm = v.norm();
        if norm == 0.0 {
            break;
        }
        v /= norm;
        let w = &gram * &v;
        let next = v.dot(&w);
        let done = (next - sigma2).abs() <= 1e-12 * next.abs();
        sigma2 = next;
        v = w;
        if done {
            break;
        }
    }
    sigma2.max(0.0).sqrt()
}
