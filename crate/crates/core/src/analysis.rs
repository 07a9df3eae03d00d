//! Mean-square stability verdicts and covariance propagation.
//!
//! The loop is MSS iff the equivalent forward block has finite H² norm and
//! `ρ(𝕃) < 1`. When it is, the steady-state input covariance solves the fixed
//! point `Ū = W̄ + 𝕃(Ū)`.
//!
//! [`covariance_trajectory`] runs the deterministic covariance loop in time:
//! `R(t) = Γ̄ ∘ ∫₀ᵗ M(τ) U(t−τ) Mᵀ(τ) dτ`, `U = W̄ + R`, discretized with
//! right-endpoint kernel nodes `τ = j·dt`, `j ≥ 1`, so each step is explicit.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::noise::NoiseSpec;
use crate::operator::{
    equivalent_forward_block, lgo_matrix_kronecker, make_lgo, spectral_radius_dense, spectral_radius_power, Backend,
    Interpretation, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL,
};
use crate::system::{h2_norm_squared, is_hurwitz, matrix_exponential, H2Norm, LtiSystem};

/// `ρ` must be below `1 − MSS_MARGIN` for a verdict of MSS.
pub const MSS_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Quadrature horizon for loops that cannot use the Lyapunov backend.
    pub quad_horizon: Option<f64>,
    pub quad_dt: Option<f64>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            power_tol: DEFAULT_POWER_TOL,
            power_max_iter: DEFAULT_POWER_MAX_ITER,
            quad_horizon: None,
            quad_dt: None,
        }
    }
}

impl AnalysisOptions {
    fn quadrature_for(&self, sys: &LtiSystem) -> Result<Backend> {
        let Backend::Quadrature { horizon, dt } = Backend::default_quadrature(sys)? else {
            unreachable!("default_quadrature yields a quadrature backend");
        };
        let nodes = horizon / dt;
        let horizon = self.quad_horizon.unwrap_or(horizon);
        let dt = self.quad_dt.unwrap_or(horizon / nodes);
        Ok(Backend::Quadrature { horizon, dt })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub u_bar: DMatrix<f64>,
    pub r_bar: DMatrix<f64>,
    pub y_bar: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MssVerdict {
    pub interpretation: Interpretation,
    /// `M` for Itô, `H` for Stratonovich.
    pub equivalent_system: LtiSystem,
    pub h2_squared: H2Norm,
    pub h2_finite: bool,
    pub rho: f64,
    pub rho_converged: bool,
    /// Set when `ρ` came from the truncated operator `𝕃_T` because the
    /// forward block is unstable; it then depends on the horizon.
    pub rho_truncated: bool,
    pub power_iterations: usize,
    pub mss: bool,
    pub worst_case_cov: DMatrix<f64>,
    pub steady_state: Option<SteadyState>,
}

fn check_noise(sys: &LtiSystem, noise: &NoiseSpec) -> Result<()> {
    let n = sys.inputs();
    sys.check_feedback_dims(noise.gains())?;
    if noise.disturbances() != n {
        return Err(Error::DimensionMismatch {
            what: "w covariance",
            expected: format!("{n}x{n}"),
            found: format!("{0}x{0}", noise.disturbances()),
        });
    }
    Ok(())
}

/// Check both MSS conditions. Instability is a verdict, never an error.
pub fn analyze(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    interpretation: Interpretation,
    options: &AnalysisOptions,
) -> Result<MssVerdict> {
    check_noise(sys, noise)?;
    if interpretation == Interpretation::Stratonovich && sys.state_space().is_none() {
        return Err(Error::StratonovichNeedsRealization);
    }
    let block = equivalent_forward_block(sys, &noise.gamma_cov, interpretation)?;
    let h2 = h2_norm_squared(&block)?;

    let lyapunov_ok = match block.state_space() {
        Some(ss) => is_hurwitz(&ss.a)?,
        None => false,
    };
    let backend = if lyapunov_ok {
        Backend::Lyapunov
    } else {
        options.quadrature_for(&block)?
    };
    let handle = make_lgo(sys, &noise.gamma_cov, interpretation, backend)?;
    let spectral = spectral_radius_power(&handle, options.power_tol, options.power_max_iter)?;

    let h2_finite = h2.is_finite();
    let rho_truncated = !h2_finite;
    let mss = h2_finite && spectral.rho < 1.0 - MSS_MARGIN;
    let steady_state = if mss {
        Some(steady_state_covariances(sys, noise, interpretation)?)
    } else {
        None
    };
    Ok(MssVerdict {
        interpretation,
        equivalent_system: block,
        h2_squared: h2,
        h2_finite,
        rho: spectral.rho,
        rho_converged: spectral.converged,
        rho_truncated,
        power_iterations: spectral.iterations,
        mss,
        worst_case_cov: spectral.eigen_matrix,
        steady_state,
    })
}

/// Dense loop gain matrix of any applicable handle, one basis matrix at a time.
fn kronecker_by_basis(handle: &crate::operator::LoopGain) -> Result<DMatrix<f64>> {
    let n = handle.dim();
    let mut k = DMatrix::zeros(n * n, n * n);
    for col in 0..n * n {
        let mut e = DMatrix::zeros(n, n);
        e[(col % n, col / n)] = 1.0;
        // apply() symmetrizes its output, so this is 𝕃 after the symmetric
        // projection; both agree on the symmetric matrices used below.
        let image = handle.apply(&e)?;
        k.set_column(col, &linalg::vectorize(&image));
    }
    Ok(k)
}

/// Solve `Ū = W̄ + 𝕃(Ū)` and report `(Ū, R̄ = 𝕃(Ū), Ȳ)`.
pub fn steady_state_covariances(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    interpretation: Interpretation,
) -> Result<SteadyState> {
    check_noise(sys, noise)?;
    let block = equivalent_forward_block(sys, &noise.gamma_cov, interpretation)?;
    let n = sys.inputs();
    let h2 = h2_norm_squared(&block)?;
    match h2 {
        H2Norm::Infinite => {
            return Err(Error::NotMss {
                rho: f64::NAN,
                h2_finite: false,
            })
        }
        H2Norm::Finite(v) if v == 0.0 => {
            return Ok(SteadyState {
                u_bar: noise.w_cov.clone(),
                r_bar: DMatrix::zeros(n, n),
                y_bar: DMatrix::zeros(sys.outputs(), sys.outputs()),
            })
        }
        H2Norm::Finite(_) => {}
    }

    let (k, output_map) = match block {
        LtiSystem::StateSpace(_) => (
            lgo_matrix_kronecker(sys, &noise.gamma_cov, interpretation)?,
            make_lgo(
                &block,
                &DMatrix::from_element(n, n, 1.0),
                Interpretation::Ito,
                Backend::Lyapunov,
            )?,
        ),
        LtiSystem::Sampled(_) => {
            let backend = Backend::default_quadrature(&block)?;
            let handle = make_lgo(&block, &noise.gamma_cov, Interpretation::Ito, backend)?;
            (
                kronecker_by_basis(&handle)?,
                make_lgo(&block, &DMatrix::from_element(n, n, 1.0), Interpretation::Ito, backend)?,
            )
        }
    };
    let rho = spectral_radius_dense(&k)?;
    if rho >= 1.0 - MSS_MARGIN {
        return Err(Error::NotMss { rho, h2_finite: true });
    }
    let system = DMatrix::<f64>::identity(n * n, n * n) - &k;
    let w = linalg::vectorize(&noise.w_cov);
    let u = system.lu().solve(&w).ok_or(Error::SingularFixedPoint)?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularFixedPoint);
    }
    let u_bar = linalg::symmetrize(&linalg::unvectorize(&u, n, n));
    let r_bar = linalg::symmetrize(&linalg::unvectorize(&(&k * &u), n, n));
    let y_bar = output_map.apply(&u_bar)?;
    Ok(SteadyState { u_bar, r_bar, y_bar })
}

/// Covariances `U`, `R`, `Y` on the grid `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory {
    pub times: Vec<f64>,
    pub u: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
}

impl CovarianceTrajectory {
    pub fn trace_y(&self) -> Vec<f64> {
        self.y.iter().map(|m| m.trace()).collect()
    }

    pub fn trace_u(&self) -> Vec<f64> {
        self.u.iter().map(|m| m.trace()).collect()
    }
}

pub(crate) fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() || !horizon.is_finite() || horizon < dt {
        return Err(Error::BadGrid { horizon, dt });
    }
    Ok((horizon / dt).round() as usize)
}

/// Kernel samples `M(j·dt)` for `j = 0..=steps`; zero past a sampled support.
pub(crate) fn kernel_samples(sys: &LtiSystem, dt: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
    match sys {
        LtiSystem::StateSpace(ss) => {
            let step = matrix_exponential(&ss.a, dt)?;
            let mut propagated = ss.b.clone();
            let mut out = Vec::with_capacity(steps + 1);
            for _ in 0..=steps {
                out.push(&ss.c * &propagated);
                propagated = &step * propagated;
            }
            Ok(out)
        }
        LtiSystem::Sampled(s) => {
            let ratio = dt / s.dt;
            let stride = ratio.round();
            if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
                return Err(Error::OffGrid { t: dt, dt: s.dt });
            }
            let stride = stride as usize;
            let zero = DMatrix::zeros(s.values[0].nrows(), s.values[0].ncols());
            Ok((0..=steps)
                .map(|j| s.values.get(j * stride).cloned().unwrap_or_else(|| zero.clone()))
                .collect())
        }
    }
}

/// Explicit Volterra time-stepping of the covariance loop.
///
/// For realizations the convolution sum is evaluated by the exact recursion
/// `S_{k+1} = Φ (S_k + B U_k Bᵀ dt) Φᵀ`, `Φ = e^{A dt}`, which reproduces
/// `Σ_{j=1}^{k} M(j dt) U_{k−j} Mᵀ(j dt) dt` in O(N). Sampled responses use
/// the direct O(N²) sum.
pub fn covariance_trajectory(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    interpretation: Interpretation,
    horizon: f64,
    dt: f64,
) -> Result<CovarianceTrajectory> {
    check_noise(sys, noise)?;
    let steps = grid_steps(horizon, dt)?;
    let block = equivalent_forward_block(sys, &noise.gamma_cov, interpretation)?;
    match &block {
        LtiSystem::StateSpace(ss) => {
            let phi = matrix_exponential(&ss.a, dt)?;
            let phi_t = phi.transpose();
            let nx = ss.states();
            let mut state = DMatrix::<f64>::zeros(nx, nx);
            let mut out = Trajectory::with_capacity(steps);
            for k in 0..=steps {
                let y = linalg::symmetrize(&(&ss.c * &state * ss.c.transpose()));
                let u = out.push(k as f64 * dt, y, noise);
                if k < steps {
                    state = &phi * (state + &ss.b * u * ss.b.transpose() * dt) * &phi_t;
                }
            }
            Ok(out.finish())
        }
        LtiSystem::Sampled(_) => {
            let kernels = kernel_samples(&block, dt, steps)?;
            Ok(volterra_direct(&kernels, noise, dt, steps))
        }
    }
}

struct Trajectory(CovarianceTrajectory);

impl Trajectory {
    fn with_capacity(steps: usize) -> Self {
        Trajectory(CovarianceTrajectory {
            times: Vec::with_capacity(steps + 1),
            u: Vec::with_capacity(steps + 1),
            r: Vec::with_capacity(steps + 1),
            y: Vec::with_capacity(steps + 1),
        })
    }

    /// Record `Y_k`, derive `R_k = Γ̄ ∘ Y_k` and `U_k = W̄ + R_k`; returns `U_k`.
    fn push(&mut self, t: f64, y: DMatrix<f64>, noise: &NoiseSpec) -> DMatrix<f64> {
        let r = noise.gamma_cov.component_mul(&y);
        let u = &noise.w_cov + &r;
        self.0.times.push(t);
        self.0.y.push(y);
        self.0.r.push(r);
        self.0.u.push(u.clone());
        u
    }

    fn finish(self) -> CovarianceTrajectory {
        self.0
    }
}

/// Direct evaluation of `Y_k = Σ_{j=1}^{k} M_j U_{k−j} M_jᵀ dt`.
pub(crate) fn volterra_direct(
    kernels: &[DMatrix<f64>],
    noise: &NoiseSpec,
    dt: f64,
    steps: usize,
) -> CovarianceTrajectory {
    let ny = kernels[0].nrows();
    let mut out = Trajectory::with_capacity(steps);
    for k in 0..=steps {
        let mut y = DMatrix::<f64>::zeros(ny, ny);
        for j in 1..=k {
            let mj = &kernels[j];
            y += mj * &out.0.u[k - j] * mj.transpose() * dt;
        }
        out.push(k as f64 * dt, linalg::symmetrize(&y), noise);
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::validate_noise;
    use crate::system::{make_sampled, make_state_space};

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn scalar() -> LtiSystem {
        make_state_space(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap()
    }

    fn noise(sigma2: f64, w: f64) -> NoiseSpec {
        validate_noise(m(1, 1, &[sigma2]), m(1, 1, &[w])).unwrap()
    }

    #[test]
    fn scalar_verdicts() {
        let opts = AnalysisOptions::default();
        let v = analyze(&scalar(), &noise(1.0, 1.0), Interpretation::Ito, &opts).unwrap();
        assert!(v.h2_finite && v.mss);
        assert!((v.rho - 0.5).abs() < 1e-10);

        let v = analyze(&scalar(), &noise(1.0, 1.0), Interpretation::Stratonovich, &opts).unwrap();
        assert!((v.rho - 1.0).abs() < 1e-9);
        assert!(!v.mss && v.steady_state.is_none());

        let v = analyze(&scalar(), &noise(3.0, 1.0), Interpretation::Stratonovich, &opts).unwrap();
        assert!(!v.h2_finite && !v.mss && v.rho_truncated);
        assert_eq!(v.equivalent_system.state_space().unwrap().a, m(1, 1, &[0.5]));
    }

    #[test]
    fn steady_state_scalar() {
        let ss = steady_state_covariances(&scalar(), &noise(1.0, 1.0), Interpretation::Ito).unwrap();
        assert!((ss.u_bar[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((ss.r_bar[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((ss.y_bar[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((&ss.u_bar - (m(1, 1, &[1.0]) + &ss.r_bar)).norm() < 1e-8);

        let ss = steady_state_covariances(&scalar(), &noise(0.0, 1.0), Interpretation::Ito).unwrap();
        assert_eq!(ss.u_bar, m(1, 1, &[1.0]));
        assert_eq!(ss.r_bar, m(1, 1, &[0.0]));

        let err = steady_state_covariances(&scalar(), &noise(2.0, 1.0), Interpretation::Ito);
        assert!(matches!(
            err,
            Err(Error::NotMss { .. }) | Err(Error::SingularFixedPoint)
        ));
    }

    #[test]
    fn steady_state_open_loop_identity() {
        let sys = make_state_space(
            m(2, 2, &[-1.0, 0.0, 0.3, -2.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let spec = validate_noise(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let ss = steady_state_covariances(&sys, &spec, Interpretation::Ito).unwrap();
        assert!((ss.u_bar - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        assert!(ss.r_bar.norm() < 1e-12);
    }

    #[test]
    fn trajectory_open_loop_and_closed_loop() {
        let dt = 1e-3;
        let t = covariance_trajectory(&scalar(), &noise(0.0, 1.0), Interpretation::Ito, 10.0, dt).unwrap();
        assert!(t.u.iter().all(|u| u[(0, 0)] == 1.0));
        let y_end = t.y.last().unwrap()[(0, 0)];
        assert!((y_end - 0.5).abs() <= 2.0 * dt + (-20.0f64).exp(), "{y_end}");

        let t = covariance_trajectory(&scalar(), &noise(1.0, 1.0), Interpretation::Ito, 30.0, dt).unwrap();
        assert!((t.u.last().unwrap()[(0, 0)] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn trajectory_diverges_above_threshold() {
        let t = covariance_trajectory(&scalar(), &noise(3.0, 1.0), Interpretation::Ito, 15.0, 1e-3).unwrap();
        let tr = t.trace_u();
        assert!(tr.iter().any(|&u| u > 10.0));
        assert!(tr.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn recursion_matches_direct_sum() {
        let sys = make_state_space(
            m(2, 2, &[-1.0, 0.5, -0.2, -0.7]),
            m(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            m(2, 2, &[0.5, 1.0, 0.0, 1.0]),
        )
        .unwrap();
        let spec = validate_noise(m(2, 2, &[0.4, 0.1, 0.1, 0.3]), m(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let (dt, steps) = (0.01, 300);
        let fast = covariance_trajectory(&sys, &spec, Interpretation::Ito, dt * steps as f64, dt).unwrap();
        let kernels = kernel_samples(&sys, dt, steps).unwrap();
        let slow = volterra_direct(&kernels, &spec, dt, steps);
        for (a, b) in fast.u.iter().zip(&slow.u) {
            assert!((a - b).norm() <= 1e-11 * b.norm().max(1.0));
        }
    }

    #[test]
    fn sampled_system_analysis() {
        let dt = 1e-3;
        let values: Vec<_> = (0..=30_000).map(|k| m(1, 1, &[(-(k as f64) * dt).exp()])).collect();
        let sys = make_sampled(dt, values).unwrap();
        let v = analyze(&sys, &noise(1.0, 1.0), Interpretation::Ito, &AnalysisOptions::default()).unwrap();
        assert!(!v.rho_truncated);
        assert!((v.rho - 0.5).abs() < 1e-6, "{}", v.rho);
        let ss = v.steady_state.unwrap();
        assert!((ss.u_bar[(0, 0)] - 2.0).abs() < 1e-5);
        let err = analyze(
            &sys,
            &noise(1.0, 1.0),
            Interpretation::Stratonovich,
            &AnalysisOptions::default(),
        );
        assert!(matches!(err, Err(Error::StratonovichNeedsRealization)));
    }
}
