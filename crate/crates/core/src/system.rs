//! The causal LTI forward block and its deterministic numerics.
//!
//! A forward block is either a state-space triple `(A, B, C)` with impulse
//! response `M(t) = C e^{At} B`, or a sampled impulse response on a uniform
//! grid starting at `t = 0`. Sampled responses are taken to vanish past their
//! last sample.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lyapunov::lyapunov_solve;

/// Real parts must sit below `-HURWITZ_MARGIN` for a matrix to count as Hurwitz.
pub const HURWITZ_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl StateSpace {
    pub fn states(&self) -> usize {
        self.a.nrows()
    }
}

/// Impulse response samples `M_k = M(k·dt)`, `k = 0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub dt: f64,
    pub values: Vec<DMatrix<f64>>,
}

impl SampledResponse {
    pub fn support(&self) -> f64 {
        self.dt * (self.values.len() - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LtiSystem {
    StateSpace(StateSpace),
    Sampled(SampledResponse),
}

impl LtiSystem {
    pub fn inputs(&self) -> usize {
        match self {
            LtiSystem::StateSpace(ss) => ss.b.ncols(),
            LtiSystem::Sampled(s) => s.values[0].ncols(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            LtiSystem::StateSpace(ss) => ss.c.nrows(),
            LtiSystem::Sampled(s) => s.values[0].nrows(),
        }
    }

    pub fn state_space(&self) -> Option<&StateSpace> {
        match self {
            LtiSystem::StateSpace(ss) => Some(ss),
            LtiSystem::Sampled(_) => None,
        }
    }

    /// `M(0)`: `CB` for a realization, the first sample otherwise.
    pub fn impulse_at_zero(&self) -> DMatrix<f64> {
        match self {
            LtiSystem::StateSpace(ss) => &ss.c * &ss.b,
            LtiSystem::Sampled(s) => s.values[0].clone(),
        }
    }

    /// Requires `n_u = n_y = gains`, the shape of a diagonal multiplicative feedback.
    pub fn check_feedback_dims(&self, gains: usize) -> Result<()> {
        let (nu, ny) = (self.inputs(), self.outputs());
        if nu != gains || ny != gains {
            return Err(Error::DimensionMismatch {
                what: "feedback loop (inputs, outputs)",
                expected: format!("({gains}, {gains})"),
                found: format!("({nu}, {ny})"),
            });
        }
        Ok(())
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

pub fn make_state_space(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<LtiSystem> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            what: "A",
            expected: "square".into(),
            found: shape(&a),
        });
    }
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            what: "B rows",
            expected: a.nrows().to_string(),
            found: shape(&b),
        });
    }
    if c.ncols() != a.ncols() {
        return Err(Error::DimensionMismatch {
            what: "C columns",
            expected: a.ncols().to_string(),
            found: shape(&c),
        });
    }
    linalg::ensure_finite(&a, "A")?;
    linalg::ensure_finite(&b, "B")?;
    linalg::ensure_finite(&c, "C")?;
    Ok(LtiSystem::StateSpace(StateSpace { a, b, c }))
}

pub fn make_sampled(dt: f64, values: Vec<DMatrix<f64>>) -> Result<LtiSystem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::NonPositiveDt(dt));
    }
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let dims = values[0].shape();
    if let Some((k, bad)) = values.iter().enumerate().find(|(_, m)| m.shape() != dims) {
        return Err(Error::BadSamples(format!(
            "sample {k} has shape {}, expected {}x{}",
            shape(bad),
            dims.0,
            dims.1
        )));
    }
    for m in &values {
        linalg::ensure_finite(m, "impulse samples")?;
    }
    Ok(LtiSystem::Sampled(SampledResponse { dt, values }))
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{At}` by scaling and squaring around a truncated Taylor series.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            what: "matrix exponential",
            expected: "square".into(),
            found: shape(a),
        });
    }
    linalg::ensure_finite(a, "matrix exponential argument")?;
    if !t.is_finite() {
        return Err(Error::NonFinite("matrix exponential time"));
    }
    let n = a.nrows();
    let at = a * t;
    let norm = one_norm(&at);
    // Scale until ‖At‖₁ / 2^s ≤ 1/2; the series then converges in ~15 terms.
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = at / 2f64.powi(squarings);

    let identity = DMatrix::<f64>::identity(n, n);
    let mut sum = identity.clone();
    let mut term = identity;
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.norm() <= f64::EPSILON * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// `M(t)`. Sampled systems only answer on their grid.
pub fn impulse_response(sys: &LtiSystem, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::BadGrid { horizon: t, dt: 0.0 });
    }
    match sys {
        LtiSystem::StateSpace(ss) => {
            if t == 0.0 {
                return Ok(&ss.c * &ss.b);
            }
            Ok(&ss.c * matrix_exponential(&ss.a, t)? * &ss.b)
        }
        LtiSystem::Sampled(s) => {
            let k = t / s.dt;
            let idx = k.round();
            if (k - idx).abs() > 1e-9 * k.max(1.0) {
                return Err(Error::OffGrid { t, dt: s.dt });
            }
            let idx = idx as usize;
            Ok(s.values
                .get(idx)
                .cloned()
                .unwrap_or_else(|| DMatrix::zeros(s.values[0].nrows(), s.values[0].ncols())))
        }
    }
}

/// Strict Hurwitz test with a `HURWITZ_MARGIN` safety band.
pub fn is_hurwitz(a: &DMatrix<f64>) -> Result<bool> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            what: "Hurwitz test",
            expected: "square".into(),
            found: shape(a),
        });
    }
    linalg::ensure_finite(a, "A")?;
    if a.is_empty() {
        return Ok(true);
    }
    Ok(linalg::spectral_abscissa(a) < -HURWITZ_MARGIN)
}

/// Squared H² norm, or `Infinite` when the forward block is unstable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum H2Norm {
    Finite(f64),
    Infinite,
}

impl H2Norm {
    pub fn is_finite(&self) -> bool {
        matches!(self, H2Norm::Finite(_))
    }

    pub fn value(&self) -> f64 {
        match self {
            H2Norm::Finite(v) => *v,
            H2Norm::Infinite => f64::INFINITY,
        }
    }
}

/// True when every Markov parameter `C A^k B`, `k < n`, vanishes, i.e. `M ≡ 0`.
fn has_zero_impulse_response(ss: &StateSpace) -> bool {
    let mut ak_b = ss.b.clone();
    for _ in 0..ss.states().max(1) {
        if (&ss.c * &ak_b).iter().any(|&v| v != 0.0) {
            return false;
        }
        ak_b = &ss.a * ak_b;
    }
    true
}

pub fn h2_norm_squared(sys: &LtiSystem) -> Result<H2Norm> {
    match sys {
        LtiSystem::StateSpace(ss) => {
            if has_zero_impulse_response(ss) {
                return Ok(H2Norm::Finite(0.0));
            }
            if !is_hurwitz(&ss.a)? {
                return Ok(H2Norm::Infinite);
            }
            let gram = lyapunov_solve(&ss.a, &(&ss.b * ss.b.transpose()))?;
            let value = (&ss.c * gram * ss.c.transpose()).trace();
            Ok(H2Norm::Finite(value.max(0.0)))
        }
        LtiSystem::Sampled(s) => {
            let last = s.values.len() - 1;
            let value: f64 = s
                .values
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let w = if k == 0 || k == last { 0.5 } else { 1.0 };
                    w * m.norm_squared()
                })
                .sum();
            Ok(H2Norm::Finite(value * s.dt))
        }
    }
}

/// Partial-sum total and quadratic variation of a sampled matrix path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationProfile {
    pub total_variation: f64,
    pub quadratic_variation: f64,
    pub horizon: f64,
}

/// Spectral-norm variation of `samples` on a grid of spacing `dt`.
///
/// A diagnostic only: on a finite grid a jump and a steep slope look alike.
pub fn variation_profile(samples: &[DMatrix<f64>], dt: f64) -> Result<VariationProfile> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    let (mut tv, mut qv) = (0.0, 0.0);
    for pair in samples.windows(2) {
        let step = linalg::spectral_norm(&(&pair[1] - &pair[0]));
        tv += step;
        qv += step * step;
    }
    Ok(VariationProfile {
        total_variation: tv,
        quadratic_variation: qv,
        horizon: dt * (samples.len() - 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn construction_checks_shapes() {
        let err = make_state_space(m(1, 1, &[-1.0]), m(2, 1, &[1.0, 0.0]), m(1, 1, &[1.0]));
        assert!(matches!(err, Err(Error::DimensionMismatch { what: "B rows", .. })));
        let err = make_state_space(m(1, 2, &[-1.0, 0.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]));
        assert!(matches!(err, Err(Error::DimensionMismatch { what: "A", .. })));
        assert_eq!(relative_degree_two().impulse_at_zero(), m(1, 1, &[0.0]));
    }

    #[test]
    fn expm_examples() {
        let e = matrix_exponential(&DMatrix::zeros(2, 2), 5.0).unwrap();
        assert_eq!(e, DMatrix::identity(2, 2));
        let e = matrix_exponential(&m(1, 1, &[-1.0]), 1.0).unwrap();
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
        let e = matrix_exponential(&m(2, 2, &[0.0, 1.0, 0.0, 0.0]), 2.0).unwrap();
        assert!((e - m(2, 2, &[1.0, 2.0, 0.0, 1.0])).norm() < 1e-14);
    }

    #[test]
    fn expm_rejects_nan() {
        let bad = m(1, 1, &[f64::NAN]);
        assert_eq!(
            matrix_exponential(&bad, 1.0),
            Err(Error::NonFinite("matrix exponential argument"))
        );
    }

    #[test]
    fn expm_rotation_matches_closed_form() {
        let w = 3.0;
        let e = matrix_exponential(&m(2, 2, &[0.0, w, -w, 0.0]), 1.7).unwrap();
        let (s, c) = (w * 1.7).sin_cos();
        assert!((e - m(2, 2, &[c, s, -s, c])).norm() < 1e-12);
    }

    #[test]
    fn impulse_examples() {
        let sys = scalar();
        assert_eq!(impulse_response(&sys, 0.0).unwrap()[(0, 0)], 1.0);
        let half = impulse_response(&sys, 2f64.ln()).unwrap()[(0, 0)];
        assert!((half - 0.5).abs() < 1e-14);
        assert_eq!(impulse_response(&relative_degree_two(), 0.0).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn sampled_off_grid_and_tail() {
        let sys = make_sampled(0.1, vec![m(1, 1, &[1.0]), m(1, 1, &[0.5]), m(1, 1, &[0.25])]).unwrap();
        assert_eq!(impulse_response(&sys, 0.2).unwrap()[(0, 0)], 0.25);
        assert_eq!(impulse_response(&sys, 0.5).unwrap()[(0, 0)], 0.0);
        assert!(matches!(impulse_response(&sys, 0.15), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn h2_examples() {
        assert!((h2_norm_squared(&scalar()).unwrap().value() - 0.5).abs() < 1e-14);
        let unstable = make_state_space(m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        assert_eq!(h2_norm_squared(&unstable).unwrap(), H2Norm::Infinite);
        let silent = make_state_space(m(1, 1, &[-1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        assert_eq!(h2_norm_squared(&silent).unwrap(), H2Norm::Finite(0.0));
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&m(1, 1, &[-1.0])).unwrap());
        assert!(!is_hurwitz(&m(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap());
        assert!(is_hurwitz(&m(2, 2, &[-1.0, 100.0, 0.0, -0.01])).unwrap());
        assert!(!is_hurwitz(&m(1, 1, &[-1e-10])).unwrap());
    }

    #[test]
    fn variation_examples() {
        let flat = vec![m(1, 1, &[2.0]); 5];
        let p = variation_profile(&flat, 0.1).unwrap();
        assert_eq!((p.total_variation, p.quadratic_variation), (0.0, 0.0));

        let dt = 1e-3;
        let decay: Vec<_> = (0..=1000).map(|k| m(1, 1, &[(-(k as f64) * dt).exp()])).collect();
        let p = variation_profile(&decay, dt).unwrap();
        assert!((p.total_variation - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
        assert!(p.quadratic_variation < 1e-3);
        assert!((p.horizon - 1.0).abs() < 1e-12);

        let mut jump = vec![m(1, 1, &[0.0]); 4];
        jump.extend(vec![m(1, 1, &[1.0]); 4]);
        let p = variation_profile(&jump, 0.1).unwrap();
        assert_eq!((p.total_variation, p.quadratic_variation), (1.0, 1.0));

        assert!(matches!(
            variation_profile(&flat[..1], 0.1),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
