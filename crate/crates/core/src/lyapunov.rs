//! Continuous algebraic Lyapunov equation `A X + X Aᵀ + Q = 0`.
//!
//! Solved through the vectorized form `(I ⊗ A + A ⊗ I) vec X = -vec Q`.
//! The factorization is kept so the loop gain can solve repeatedly with the
//! same `A` during power iteration.

use nalgebra::{DMatrix, Dyn, LU};

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::is_hurwitz;

#[derive(Debug, Clone)]
pub struct LyapunovSolver {
    n: usize,
    lu: LU<f64, Dyn, Dyn>,
}

impl LyapunovSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !is_hurwitz(a)? {
            return Err(Error::NotHurwitz {
                abscissa: linalg::spectral_abscissa(a),
            });
        }
        let n = a.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let sum = linalg::kron(&eye, a) + linalg::kron(a, &eye);
        let lu = sum.lu();
        // λ_i + λ_j stays away from zero for Hurwitz A, but guard the pivots anyway.
        let diag = lu.u().diagonal();
        let scale = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if diag.iter().any(|v| v.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularSystem);
        }
        Ok(Self { n, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q.shape() != (self.n, self.n) {
            return Err(Error::DimensionMismatch {
                what: "Lyapunov right-hand side",
                expected: format!("{0}x{0}", self.n),
                found: format!("{}x{}", q.nrows(), q.ncols()),
            });
        }
        let rhs = -linalg::vectorize(q);
        let x = self.lu.solve(&rhs).ok_or(Error::SingularSystem)?;
        Ok(linalg::symmetrize(&linalg::unvectorize(&x, self.n, self.n)))
    }
}

/// Solve `A X + X Aᵀ + Q = 0` for Hurwitz `A` and symmetric `Q`.
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LyapunovSolver::new(a)?.solve(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn scalar_and_diagonal() {
        let x = lyapunov_solve(&m(1, 1, &[-1.0]), &m(1, 1, &[2.0])).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        let x = lyapunov_solve(&m(2, 2, &[-1.0, 0.0, 0.0, -2.0]), &DMatrix::identity(2, 2)).unwrap();
        assert!((x - m(2, 2, &[0.5, 0.0, 0.0, 0.25])).norm() < 1e-15);
    }

    #[test]
    fn nilpotent_is_rejected() {
        let err = lyapunov_solve(&m(2, 2, &[0.0, 1.0, 0.0, 0.0]), &DMatrix::identity(2, 2));
        assert!(matches!(err, Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn residual_is_small() {
        let a = m(3, 3, &[-2.0, 1.0, 0.3, 0.0, -1.0, 4.0, 0.5, -0.2, -3.0]);
        let q = m(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.0, 0.1, 0.0, 3.0]);
        let x = lyapunov_solve(&a, &q).unwrap();
        let res = &a * &x + &x * a.transpose() + &q;
        assert!(res.norm() <= 1e-10 * (a.norm() * x.norm() + q.norm()));
        assert!(linalg::min_eigenvalue_sym(&x) >= 0.0);
    }
}
