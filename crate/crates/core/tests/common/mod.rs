//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use msslab::linalg::{eigenvalues, max_eigenvalue_sym, min_eigenvalue_sym, psd_tolerance, spectral_abscissa};
use msslab::noise::{validate_noise, NoiseSpec};
use msslab::operator::Backend;
use msslab::system::{make_state_space, LtiSystem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// `1/(s + a)`.
pub fn scalar(a: f64) -> LtiSystem {
    make_state_space(s(-a), s(1.0), s(1.0)).unwrap()
}

pub fn scalar_noise(sigma2: f64, w: f64) -> NoiseSpec {
    validate_noise(s(sigma2), s(w)).unwrap()
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `L Lᵀ` with `L` of random rank `1..=n`.
pub fn random_psd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let rank = rng.random_range(1..=n);
    let l = gaussian(rng, n, rank);
    &l * l.transpose()
}

/// Random Hurwitz `A` (abscissa in `[-1.5, -0.3]`) with square feedback dimensions.
pub fn random_stable<R: Rng>(rng: &mut R, states: usize, gains: usize) -> LtiSystem {
    let mut a = gaussian(rng, states, states);
    let shift = spectral_abscissa(&a) + rng.random_range(0.3..1.5);
    for i in 0..states {
        a[(i, i)] -= shift;
    }
    make_state_space(a, gaussian(rng, states, gains), gaussian(rng, gains, states)).unwrap()
}

/// Quadrature fine enough to match the Lyapunov backend to about 1e-6:
/// tail `e^{-80}` from the slowest mode, 500 nodes per fastest time constant.
pub fn fine_quadrature(sys: &LtiSystem) -> Backend {
    let a = &sys.state_space().unwrap().a;
    let slow = -spectral_abscissa(a);
    let fast = eigenvalues(a).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let horizon = 40.0 / slow;
    let dt = (0.002 / fast).min(horizon / 20_000.0);
    Backend::Quadrature { horizon, dt }
}

/// Minimum eigenvalue is above `−ε_psd`.
pub fn psd_within_tol(x: &DMatrix<f64>) -> bool {
    min_eigenvalue_sym(x) >= -psd_tolerance(max_eigenvalue_sym(x))
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}
