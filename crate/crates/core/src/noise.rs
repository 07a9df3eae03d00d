//! Multiplicative gain noise `γ` and additive disturbance `w`.
//!
//! Both are Wiener processes with constant covariance rates (`Γ̄` and `W̄`,
//! variance per unit time), sampled independently of each other.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Entrywise symmetry tolerance, scaled by the largest absolute entry (floor 1).
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub gamma_cov: DMatrix<f64>,
    pub w_cov: DMatrix<f64>,
    pub gamma_factor: DMatrix<f64>,
    pub w_factor: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn gains(&self) -> usize {
        self.gamma_cov.nrows()
    }

    pub fn disturbances(&self) -> usize {
        self.w_cov.nrows()
    }

    /// Draws `γ̃ = L_γ ξ √dt` into `gamma` and then `w̃ = L_w ξ √dt` into `w`.
    ///
    /// `scratch` must hold `max(gains, disturbances)` entries. All normals for
    /// `γ̃` are drawn before those for `w̃`, so the stream layout is fixed.
    pub(crate) fn fill_increments<R: Rng>(
        &self,
        sqrt_dt: f64,
        rng: &mut R,
        scratch: &mut [f64],
        gamma: &mut [f64],
        w: &mut [f64],
    ) {
        fill_one(&self.gamma_factor, sqrt_dt, rng, scratch, gamma);
        fill_one(&self.w_factor, sqrt_dt, rng, scratch, w);
    }
}

fn fill_one<R: Rng>(factor: &DMatrix<f64>, sqrt_dt: f64, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
    let n = factor.nrows();
    for z in scratch[..n].iter_mut() {
        *z = rng.sample::<f64, _>(StandardNormal);
    }
    for (i, o) in out[..n].iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            acc += factor[(i, j)] * scratch[j];
        }
        *o = acc * sqrt_dt;
    }
}

/// Symmetric PSD factor `L` with `L Lᵀ = cov`, via eigendecomposition.
fn psd_factor(cov: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !cov.is_square() {
        return Err(Error::DimensionMismatch {
            what,
            expected: "square".into(),
            found: format!("{}x{}", cov.nrows(), cov.ncols()),
        });
    }
    linalg::ensure_finite(cov, what)?;
    let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let asymmetry = linalg::max_asymmetry(cov);
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { what, asymmetry });
    }
    let sym = linalg::symmetrize(cov);
    if sym.is_empty() {
        return Ok((sym.clone(), sym));
    }
    let eig = sym.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bottom = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if bottom < -linalg::psd_tolerance(top) {
        return Err(Error::NotPsd {
            what,
            min_eigenvalue: bottom,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    Ok((sym, factor))
}

pub fn validate_noise(gamma_cov: DMatrix<f64>, w_cov: DMatrix<f64>) -> Result<NoiseSpec> {
    let (gamma_cov, gamma_factor) = psd_factor(&gamma_cov, "gamma covariance")?;
    let (w_cov, w_factor) = psd_factor(&w_cov, "w covariance")?;
    Ok(NoiseSpec {
        gamma_cov,
        w_cov,
        gamma_factor,
        w_factor,
    })
}

/// Explicit random state threaded through sampling calls.
///
/// Streams are addressed by `(seed, stream)`, so path `k` of an ensemble gets
/// the same draws whatever order the paths run in.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRng(ChaCha8Rng);

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self::for_stream(seed, 0)
    }

    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseRng(rng)
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub gamma: DVector<f64>,
    pub w: DVector<f64>,
}

/// One step of `γ̃ ~ N(0, Γ̄ dt)` and independent `w̃ ~ N(0, W̄ dt)`; advances `rng`.
pub fn sample_increments(spec: &NoiseSpec, dt: f64, rng: &mut NoiseRng) -> Result<Increments> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::NonPositiveDt(dt));
    }
    let mut gamma = DVector::zeros(spec.gains());
    let mut w = DVector::zeros(spec.disturbances());
    let mut scratch = vec![0.0; spec.gains().max(spec.disturbances())];
    spec.fill_increments(
        dt.sqrt(),
        rng.inner(),
        &mut scratch,
        gamma.as_mut_slice(),
        w.as_mut_slice(),
    );
    Ok(Increments { gamma, w })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn factors() {
        let spec = validate_noise(m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        assert!((spec.gamma_factor.abs() - m(1, 1, &[1.0])).norm() < 1e-15);

        let rank_one = m(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let spec = validate_noise(rank_one.clone(), m(1, 1, &[0.0])).unwrap();
        let l = &spec.gamma_factor;
        assert!((l * l.transpose() - rank_one).norm() < 1e-10);
    }

    #[test]
    fn indefinite_and_asymmetric_rejected() {
        let err = validate_noise(m(2, 2, &[1.0, 2.0, 2.0, 1.0]), m(1, 1, &[1.0]));
        assert!(matches!(err, Err(Error::NotPsd { .. })));
        let err = validate_noise(m(2, 2, &[1.0, 0.5, 0.0, 1.0]), m(1, 1, &[1.0]));
        assert!(matches!(err, Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clamped() {
        let nearly = m(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-13]);
        assert!(validate_noise(nearly, m(1, 1, &[1.0])).is_ok());
    }

    #[test]
    fn zero_gamma_gives_exact_zero() {
        let spec = validate_noise(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        let mut rng = NoiseRng::new(7);
        for _ in 0..100 {
            assert_eq!(sample_increments(&spec, 0.01, &mut rng).unwrap().gamma[0], 0.0);
        }
    }

    #[test]
    fn deterministic_given_state() {
        let spec = validate_noise(m(1, 1, &[1.0]), m(1, 1, &[2.0])).unwrap();
        let rng = NoiseRng::for_stream(11, 3);
        let a = sample_increments(&spec, 0.1, &mut rng.clone()).unwrap();
        let b = sample_increments(&spec, 0.1, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_increments(&spec, 0.0, &mut rng.clone()),
            Err(Error::NonPositiveDt(_))
        ));
    }

    #[test]
    fn variance_of_a_million_draws() {
        let spec = validate_noise(m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let mut rng = NoiseRng::new(2024);
        let n = 1_000_000;
        let dt = 0.01;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let g = sample_increments(&spec, dt, &mut rng).unwrap().gamma[0];
            sum_sq += g * g;
        }
        let var = sum_sq / n as f64;
        // Standard error of a variance estimate: σ²·√(2/n).
        let se = dt * (2.0f64).sqrt() / 1e3;
        assert!((var - dt).abs() <= 3.0 * se, "var = {var}");
    }
}
