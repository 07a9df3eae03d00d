//! The loop gain operator `𝕃(X) = Γ̄ ∘ ∫₀^∞ M(τ) X Mᵀ(τ) dτ`.
//!
//! It propagates the steady-state covariance of the loop input `du` once
//! around the feedback loop to the covariance of `dr`. Under the Itô
//! interpretation the forward block is `M` itself. Under Stratonovich the
//! loop is first rewritten as an Itô loop around the equivalent block `H`
//! with state matrix `A_S = A + B G C`, `G = ½ (CB) ∘ Γ̄`.
//!
//! Two backends evaluate the integral: the Lyapunov backend solves
//! `A_k X̄ + X̄ A_kᵀ + B X Bᵀ = 0` and returns `Γ̄ ∘ (C X̄ Cᵀ)`; the quadrature
//! backend applies the trapezoid rule on `[0, T]`, which is the truncated
//! operator `𝕃_T`. The Kronecker matrix in [`lgo_matrix_kronecker`] is an
//! independent dense form of the same map used to check both.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lyapunov::LyapunovSolver;
use crate::system::{is_hurwitz, matrix_exponential, LtiSystem, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpretation {
    Ito,
    Stratonovich,
}

impl fmt::Display for Interpretation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interpretation::Ito => f.write_str("ito"),
            Interpretation::Stratonovich => f.write_str("stratonovich"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    Lyapunov,
    Quadrature { horizon: f64, dt: f64 },
}

pub const DEFAULT_POWER_TOL: f64 = 1e-10;
pub const DEFAULT_POWER_MAX_ITER: usize = 10_000;

/// Horizon used when the forward block is not Hurwitz and no horizon is given.
pub const UNSTABLE_QUADRATURE_HORIZON: f64 = 10.0;

impl Backend {
    /// Trapezoid defaults for `sys`.
    ///
    /// Hurwitz realizations use `T = 40/|Re λ_max|`, `dt = T/40000`. Unstable
    /// realizations get the fixed horizon [`UNSTABLE_QUADRATURE_HORIZON`] with
    /// `dt = T/10000`. Sampled responses integrate over their own support.
    pub fn default_quadrature(sys: &LtiSystem) -> Result<Backend> {
        match sys {
            LtiSystem::StateSpace(ss) => {
                if ss.states() > 0 && is_hurwitz(&ss.a)? {
                    let horizon = 40.0 / linalg::spectral_abscissa(&ss.a).abs();
                    Ok(Backend::Quadrature {
                        horizon,
                        dt: horizon / 40_000.0,
                    })
                } else {
                    Ok(Backend::Quadrature {
                        horizon: UNSTABLE_QUADRATURE_HORIZON,
                        dt: UNSTABLE_QUADRATURE_HORIZON / 10_000.0,
                    })
                }
            }
            LtiSystem::Sampled(s) => Ok(Backend::Quadrature {
                horizon: s.support(),
                dt: s.dt,
            }),
        }
    }
}

/// `G = ½ M(0) ∘ Γ̄`.
pub fn stratonovich_correction_gain(sys: &LtiSystem, gamma_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sys.check_feedback_dims(gamma_cov.nrows())?;
    check_gamma(gamma_cov, sys.inputs())?;
    Ok(sys.impulse_at_zero().component_mul(gamma_cov) * 0.5)
}

/// The Itô-equivalent forward block `(A + B G C, B, C)` of a Stratonovich loop.
pub fn equivalent_ito_system(sys: &LtiSystem, gamma_cov: &DMatrix<f64>) -> Result<LtiSystem> {
    let ss = sys.state_space().ok_or(Error::StratonovichNeedsRealization)?;
    let g = stratonovich_correction_gain(sys, gamma_cov)?;
    let a_s = &ss.a + &ss.b * g * &ss.c;
    Ok(LtiSystem::StateSpace(StateSpace {
        a: a_s,
        b: ss.b.clone(),
        c: ss.c.clone(),
    }))
}

/// The forward block the loop gain is built on: `M` for Itô, `H` for Stratonovich.
pub fn equivalent_forward_block(
    sys: &LtiSystem,
    gamma_cov: &DMatrix<f64>,
    interpretation: Interpretation,
) -> Result<LtiSystem> {
    match interpretation {
        Interpretation::Ito => {
            sys.check_feedback_dims(gamma_cov.nrows())?;
            check_gamma(gamma_cov, sys.inputs())?;
            Ok(sys.clone())
        }
        Interpretation::Stratonovich => equivalent_ito_system(sys, gamma_cov),
    }
}

fn check_gamma(gamma_cov: &DMatrix<f64>, n: usize) -> Result<()> {
    if gamma_cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            what: "gamma covariance",
            expected: format!("{n}x{n}"),
            found: format!("{}x{}", gamma_cov.nrows(), gamma_cov.ncols()),
        });
    }
    linalg::ensure_finite(gamma_cov, "gamma covariance")
}

#[derive(Debug, Clone)]
struct Node {
    weight: f64,
    m: DMatrix<f64>,
    mt: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum Engine {
    Lyapunov(std::result::Result<LyapunovSolver, Error>),
    Quadrature(Vec<Node>),
}

/// An applicable loop gain operator.
#[derive(Debug, Clone)]
pub struct LoopGain {
    system: LtiSystem,
    gamma_cov: DMatrix<f64>,
    interpretation: Interpretation,
    backend: Backend,
    engine: Engine,
}

impl LoopGain {
    /// The equivalent forward block (`M` or `H`).
    pub fn system(&self) -> &LtiSystem {
        &self.system
    }

    pub fn gamma_cov(&self) -> &DMatrix<f64> {
        &self.gamma_cov
    }

    pub fn interpretation(&self) -> Interpretation {
        self.interpretation
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn dim(&self) -> usize {
        self.gamma_cov.nrows()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if x.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                what: "loop gain argument",
                expected: format!("{n}x{n}"),
                found: format!("{}x{}", x.nrows(), x.ncols()),
            });
        }
        linalg::ensure_finite(x, "loop gain argument")?;
        match &self.engine {
            Engine::Lyapunov(solver) => {
                let solver = solver.as_ref().map_err(Clone::clone)?;
                let ss = self.system.state_space().expect("Lyapunov backend holds a realization");
                let gram = solver.solve(&(&ss.b * x * ss.b.transpose()))?;
                let y = &ss.c * gram * ss.c.transpose();
                Ok(linalg::symmetrize(&self.gamma_cov.component_mul(&y)))
            }
            Engine::Quadrature(nodes) => {
                let (ny, nu) = (self.system.outputs(), self.system.inputs());
                let mut tmp = DMatrix::zeros(ny, nu);
                let mut acc = DMatrix::zeros(ny, ny);
                for node in nodes {
                    tmp.gemm(1.0, &node.m, x, 0.0);
                    acc.gemm(node.weight, &tmp, &node.mt, 1.0);
                }
                Ok(linalg::symmetrize(&self.gamma_cov.component_mul(&acc)))
            }
        }
    }
}

/// Build the loop gain for `sys` under `interpretation`, evaluated by `backend`.
pub fn make_lgo(
    sys: &LtiSystem,
    gamma_cov: &DMatrix<f64>,
    interpretation: Interpretation,
    backend: Backend,
) -> Result<LoopGain> {
    if interpretation == Interpretation::Stratonovich && sys.state_space().is_none() {
        return Err(Error::StratonovichNeedsRealization);
    }
    let system = equivalent_forward_block(sys, gamma_cov, interpretation)?;
    let engine = match backend {
        Backend::Lyapunov => {
            let ss = system
                .state_space()
                .ok_or(Error::RealizationRequired("the Lyapunov backend"))?;
            Engine::Lyapunov(LyapunovSolver::new(&ss.a))
        }
        Backend::Quadrature { horizon, dt } => Engine::Quadrature(quadrature_nodes(&system, horizon, dt)?),
    };
    Ok(LoopGain {
        system,
        gamma_cov: gamma_cov.clone(),
        interpretation,
        backend,
        engine,
    })
}

fn quadrature_nodes(sys: &LtiSystem, horizon: f64, dt: f64) -> Result<Vec<Node>> {
    if !(horizon > 0.0) || !(dt > 0.0) || dt >= horizon || !horizon.is_finite() {
        return Err(Error::BadQuadrature { horizon, dt });
    }
    let node = |weight: f64, m: DMatrix<f64>| Node {
        weight,
        mt: m.transpose(),
        m,
    };
    match sys {
        LtiSystem::StateSpace(ss) => {
            let steps = (horizon / dt).round().max(1.0) as usize;
            let h = horizon / steps as f64;
            let step = matrix_exponential(&ss.a, h)?;
            let mut propagated = ss.b.clone();
            let mut nodes = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                let w = if k == 0 || k == steps { 0.5 * h } else { h };
                nodes.push(node(w, &ss.c * &propagated));
                propagated = &step * propagated;
            }
            Ok(nodes)
        }
        LtiSystem::Sampled(s) => {
            let ratio = dt / s.dt;
            let stride = ratio.round();
            if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
                return Err(Error::OffGrid { t: dt, dt: s.dt });
            }
            let stride = stride as usize;
            let h = stride as f64 * s.dt;
            let wanted = (horizon / h + 1e-9).floor() as usize;
            let available = (s.values.len() - 1) / stride;
            let steps = wanted.min(available);
            if steps == 0 {
                return Err(Error::BadQuadrature { horizon, dt });
            }
            Ok((0..=steps)
                .map(|k| {
                    let w = if k == 0 || k == steps { 0.5 * h } else { h };
                    node(w, s.values[k * stride].clone())
                })
                .collect())
        }
    }
}

/// Dominant eigenvalue of a loop gain and its PSD eigen-matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub rho: f64,
    pub eigen_matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on PSD matrices.
///
/// Starts at `X₀ = I/‖I‖_F`, symmetrizes every iterate and normalizes in the
/// Frobenius norm. The estimate is the Rayleigh quotient `⟨𝕃(X), X⟩_F`.
/// Iteration stops once successive estimates differ by at most
/// `tol·max(1, ρ)` and the residual `‖𝕃(X) − ρX‖_F` is below the same bound.
/// Hitting `max_iter` returns the last estimate with `converged = false`.
pub fn spectral_radius_power(handle: &LoopGain, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    let n = handle.dim();
    let mut x = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return Ok(SpectralResult {
            rho: 0.0,
            eigen_matrix: x,
            iterations: 0,
            converged: true,
        });
    }
    x /= x.norm();
    let mut previous = f64::NAN;
    for iteration in 1..=max_iter.max(1) {
        let y = linalg::symmetrize(&handle.apply(&x)?);
        let y_norm = y.norm();
        if y_norm == 0.0 {
            return Ok(SpectralResult {
                rho: 0.0,
                eigen_matrix: x,
                iterations: iteration,
                converged: true,
            });
        }
        let rho = linalg::frobenius_inner(&y, &x);
        let bound = tol * rho.abs().max(1.0);
        let residual = (&y - &x * rho).norm();
        if (rho - previous).abs() <= bound && residual <= bound {
            return Ok(SpectralResult {
                rho: rho.max(0.0),
                eigen_matrix: x,
                iterations: iteration,
                converged: true,
            });
        }
        previous = rho;
        x = y / y_norm;
        if iteration == max_iter.max(1) {
            return Ok(SpectralResult {
                rho: rho.max(0.0),
                eigen_matrix: x,
                iterations: iteration,
                converged: false,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Dense `n²×n²` matrix `K` with `vec 𝕃(X) = K vec X` (column-major `vec`).
///
/// `K = Diag(vec Γ̄) (C⊗C) (−(A_k⊗I + I⊗A_k))⁻¹ (B⊗B)`. Built without the
/// Lyapunov solver so it can serve as an oracle for it.
pub fn lgo_matrix_kronecker(
    sys: &LtiSystem,
    gamma_cov: &DMatrix<f64>,
    interpretation: Interpretation,
) -> Result<DMatrix<f64>> {
    if sys.state_space().is_none() {
        return Err(Error::RealizationRequired("the Kronecker loop gain"));
    }
    let block = equivalent_forward_block(sys, gamma_cov, interpretation)?;
    let ss = block.state_space().expect("checked above");
    let nx = ss.states();
    if nx * nx > 256 {
        return Err(Error::KroneckerTooLarge(nx * nx));
    }
    if !is_hurwitz(&ss.a)? {
        return Err(Error::NotHurwitz {
            abscissa: linalg::spectral_abscissa(&ss.a),
        });
    }
    let eye = DMatrix::<f64>::identity(nx, nx);
    let neg_sum = -(linalg::kron(&ss.a, &eye) + linalg::kron(&eye, &ss.a));
    let bb = linalg::kron(&ss.b, &ss.b);
    let gram_map = neg_sum.lu().solve(&bb).ok_or(Error::SingularKroneckerSum)?;
    if gram_map.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularKroneckerSum);
    }
    let out = linalg::kron(&ss.c, &ss.c) * gram_map;
    let mask = linalg::vectorize(gamma_cov);
    Ok(DMatrix::from_diagonal(&mask) * out)
}

/// Largest eigenvalue modulus from a dense Schur decomposition.
pub fn spectral_radius_dense(k: &DMatrix<f64>) -> Result<f64> {
    if !k.is_square() {
        return Err(Error::DimensionMismatch {
            what: "spectral radius",
            expected: "square".into(),
            found: format!("{}x{}", k.nrows(), k.ncols()),
        });
    }
    linalg::ensure_finite(k, "spectral radius argument")?;
    Ok(linalg::eigenvalues(k).iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::make_state_space;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn scalar() -> LtiSystem {
        make_state_space(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap()
    }

    fn relative_degree_two() -> LtiSystem {
        make_state_space(
            m(2, 2, &[0.0, 1.0, -2.0, -3.0]),
            m(2, 1, &[0.0, 1.0]),
            m(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn lyapunov_apply_scalar() {
        for (sigma2, u) in [(1.0, 1.0), (0.3, 2.5), (2.0, 0.7)] {
            let l = make_lgo(&scalar(), &m(1, 1, &[sigma2]), Interpretation::Ito, Backend::Lyapunov).unwrap();
            let r = l.apply(&m(1, 1, &[u])).unwrap();
            assert!((r[(0, 0)] - sigma2 * u / 2.0).abs() < 1e-15);
        }
        let l = make_lgo(&scalar(), &m(1, 1, &[0.0]), Interpretation::Ito, Backend::Lyapunov).unwrap();
        assert_eq!(l.apply(&m(1, 1, &[3.0])).unwrap()[(0, 0)], 0.0);
        let l = make_lgo(&scalar(), &m(1, 1, &[1.0]), Interpretation::Ito, Backend::Lyapunov).unwrap();
        assert_eq!(l.apply(&m(1, 1, &[0.0])).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn lyapunov_apply_unstable_reports_not_hurwitz() {
        let l = make_lgo(
            &scalar(),
            &m(1, 1, &[3.0]),
            Interpretation::Stratonovich,
            Backend::Lyapunov,
        )
        .unwrap();
        assert!(matches!(l.apply(&m(1, 1, &[1.0])), Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn quadrature_apply_scalar() {
        let backend = Backend::Quadrature {
            horizon: 20.0,
            dt: 1e-3,
        };
        let l = make_lgo(&scalar(), &m(1, 1, &[1.0]), Interpretation::Ito, backend).unwrap();
        let r = l.apply(&m(1, 1, &[1.0])).unwrap()[(0, 0)];
        assert!((r - 0.5).abs() < 1e-5, "{r}");
        assert_eq!(l.apply(&m(1, 1, &[0.0])).unwrap()[(0, 0)], 0.0);

        let short = make_lgo(
            &scalar(),
            &m(1, 1, &[1.0]),
            Interpretation::Ito,
            Backend::Quadrature { horizon: 1.0, dt: 1e-3 },
        )
        .unwrap();
        assert!(short.apply(&m(1, 1, &[1.0])).unwrap()[(0, 0)] <= r);
    }

    #[test]
    fn quadrature_rejects_bad_grid() {
        for (horizon, dt) in [(0.0, 0.1), (1.0, 1.0), (-1.0, 0.1), (1.0, 0.0)] {
            let err = make_lgo(
                &scalar(),
                &m(1, 1, &[1.0]),
                Interpretation::Ito,
                Backend::Quadrature { horizon, dt },
            );
            assert!(matches!(err, Err(Error::BadQuadrature { .. })), "{horizon} {dt}");
        }
    }

    #[test]
    fn correction_gain_and_equivalent_system() {
        let g = stratonovich_correction_gain(&scalar(), &m(1, 1, &[1.0])).unwrap();
        assert_eq!(g, m(1, 1, &[0.5]));
        let g = stratonovich_correction_gain(&relative_degree_two(), &m(1, 1, &[1.0])).unwrap();
        assert_eq!(g, m(1, 1, &[0.0]));
        let g = stratonovich_correction_gain(&scalar(), &m(1, 1, &[0.0])).unwrap();
        assert_eq!(g, m(1, 1, &[0.0]));

        let h = equivalent_ito_system(&scalar(), &m(1, 1, &[1.0])).unwrap();
        assert_eq!(h.state_space().unwrap().a, m(1, 1, &[-0.5]));
        let sys = relative_degree_two();
        let h = equivalent_ito_system(&sys, &m(1, 1, &[1.0])).unwrap();
        assert_eq!(h, sys);
        let h = equivalent_ito_system(&scalar(), &m(1, 1, &[0.0])).unwrap();
        assert_eq!(h, scalar());
    }

    #[test]
    fn make_lgo_routes_interpretations() {
        let l = make_lgo(&scalar(), &m(1, 1, &[1.0]), Interpretation::Ito, Backend::Lyapunov).unwrap();
        assert_eq!(l.system().state_space().unwrap().a, m(1, 1, &[-1.0]));
        let l = make_lgo(
            &scalar(),
            &m(1, 1, &[1.0]),
            Interpretation::Stratonovich,
            Backend::Lyapunov,
        )
        .unwrap();
        assert_eq!(l.system().state_space().unwrap().a, m(1, 1, &[-0.5]));

        let sampled = crate::system::make_sampled(0.1, vec![m(1, 1, &[1.0]), m(1, 1, &[0.9])]).unwrap();
        let err = make_lgo(
            &sampled,
            &m(1, 1, &[1.0]),
            Interpretation::Stratonovich,
            Backend::Lyapunov,
        );
        assert!(matches!(err, Err(Error::StratonovichNeedsRealization)));
        let err = make_lgo(&sampled, &m(1, 1, &[1.0]), Interpretation::Ito, Backend::Lyapunov);
        assert!(matches!(err, Err(Error::RealizationRequired(_))));
    }

    #[test]
    fn power_iteration_scalar_benchmarks() {
        let ito = make_lgo(&scalar(), &m(1, 1, &[1.0]), Interpretation::Ito, Backend::Lyapunov).unwrap();
        let res = spectral_radius_power(&ito, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER).unwrap();
        assert!(res.converged);
        assert!((res.rho - 0.5).abs() < 1e-10);

        let strat = make_lgo(
            &scalar(),
            &m(1, 1, &[1.0]),
            Interpretation::Stratonovich,
            Backend::Lyapunov,
        )
        .unwrap();
        let res = spectral_radius_power(&strat, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER).unwrap();
        assert!((res.rho - 1.0).abs() < 1e-9);

        let zero = make_lgo(&scalar(), &m(1, 1, &[0.0]), Interpretation::Ito, Backend::Lyapunov).unwrap();
        let res = spectral_radius_power(&zero, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER).unwrap();
        assert_eq!(res.rho, 0.0);
        assert!(res.converged && res.iterations <= 2);
        assert_eq!(res.eigen_matrix, m(1, 1, &[1.0]));
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        let gamma = m(2, 2, &[1.0, 0.2, 0.2, 0.9]);
        let sys = make_state_space(
            m(2, 2, &[-1.0, 0.3, 0.0, -1.5]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let l = make_lgo(&sys, &gamma, Interpretation::Ito, Backend::Lyapunov).unwrap();
        let res = spectral_radius_power(&l, 1e-15, 2).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 2);
    }

    #[test]
    fn kronecker_examples() {
        let k = lgo_matrix_kronecker(&scalar(), &m(1, 1, &[1.0]), Interpretation::Ito).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        let k = lgo_matrix_kronecker(&scalar(), &m(1, 1, &[0.0]), Interpretation::Ito).unwrap();
        assert_eq!(k, m(1, 1, &[0.0]));
        let err = lgo_matrix_kronecker(&scalar(), &m(1, 1, &[3.0]), Interpretation::Stratonovich);
        assert!(matches!(err, Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn dense_radius_examples() {
        assert_eq!(spectral_radius_dense(&m(1, 1, &[0.5])).unwrap(), 0.5);
        assert!((spectral_radius_dense(&m(2, 2, &[0.2, 0.0, 0.0, 0.9])).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(
            spectral_radius_dense(&m(1, 1, &[f64::INFINITY])),
            Err(Error::NonFinite(_))
        ));
    }
}
