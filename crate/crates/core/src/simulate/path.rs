//! Single-path stepping of the closed loop.
//!
//! Everything here runs on flat row-major buffers; the ensemble drives
//! millions of steps and cannot afford per-step allocation.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::operator::Interpretation;
use crate::system::{matrix_exponential, LtiSystem};

use super::{Scheme, SimulationConfig, OVERFLOW_LIMIT};

const MIDPOINT_TOL: f64 = 1e-10;
const MIDPOINT_MAX_ITER: usize = 50;

/// Row-major copy of a matrix.
#[derive(Debug, Clone)]
pub(crate) struct Flat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Flat {
    pub(crate) fn new(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        Flat { rows, cols, data }
    }

    /// Entrywise mean of two matrices of equal shape.
    pub(crate) fn average(a: &Flat, b: &Flat) -> Self {
        Flat {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect(),
        }
    }

    /// `out = self · v`.
    #[inline]
    fn mul_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out[..self.rows].iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self · v`.
    #[inline]
    pub(crate) fn mul_add_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out[..self.rows].iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone)]
enum Plant {
    /// Euler step `x ← x + A x dt + B ũ`, output `y = C x`.
    StateSpace {
        a: Flat,
        b: Flat,
        c: Flat,
        cb: Flat,
        states: usize,
    },
    /// `y_k = Σ_{j<k} M(t_k − t_j) ũ_j`, kernels `M(j·dt)`, `j = 0..=steps`.
    Convolution { kernels: Vec<Flat> },
}

/// Loop data prepared once per ensemble.
#[derive(Debug, Clone)]
pub(crate) struct Prepared<'a> {
    plant: Plant,
    noise: &'a NoiseSpec,
    interpretation: Interpretation,
    pub(crate) dim: usize,
    pub(crate) steps: usize,
    dt: f64,
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(sys: &LtiSystem, noise: &'a NoiseSpec, config: &SimulationConfig) -> Result<Self> {
        let steps = config.steps()?;
        let n = sys.inputs();
        sys.check_feedback_dims(noise.gains())?;
        if noise.disturbances() != n {
            return Err(Error::DimensionMismatch {
                what: "w covariance",
                expected: format!("{n}x{n}"),
                found: format!("{0}x{0}", noise.disturbances()),
            });
        }
        let plant = match (config.scheme, sys) {
            (Scheme::StateSpaceStep, LtiSystem::StateSpace(ss)) => Plant::StateSpace {
                a: Flat::new(&ss.a),
                b: Flat::new(&ss.b),
                c: Flat::new(&ss.c),
                cb: Flat::new(&(&ss.c * &ss.b)),
                states: ss.states(),
            },
            (Scheme::StateSpaceStep, LtiSystem::Sampled(_)) => {
                return Err(Error::RealizationRequired("the state-space stepping scheme"))
            }
            (Scheme::ConvolutionSum, _) => Plant::Convolution {
                kernels: convolution_kernels(sys, config.dt, steps)?,
            },
        };
        Ok(Prepared {
            plant,
            noise,
            interpretation: config.interpretation,
            dim: n,
            steps,
            dt: config.dt,
        })
    }

    /// Run one path, calling `visit(k, y_k, ũ_k, r̃_k)` for `k < steps` and
    /// `visit(steps, y_N, &[], &[])` at the end.
    ///
    /// Returns the index of the first state that overflowed, if any; the
    /// visitor has then seen `y_0 … y_{k−1}`.
    pub(crate) fn run<F>(&self, rng: &mut ChaCha8Rng, mut visit: F) -> Result<Option<usize>>
    where
        F: FnMut(usize, &[f64], &[f64], &[f64]),
    {
        match &self.plant {
            Plant::StateSpace { a, b, c, cb, states } => self.run_state_space(a, b, c, cb, *states, rng, &mut visit),
            Plant::Convolution { kernels } => self.run_convolution(kernels, rng, &mut visit),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_state_space<F>(
        &self,
        a: &Flat,
        b: &Flat,
        c: &Flat,
        cb: &Flat,
        states: usize,
        rng: &mut ChaCha8Rng,
        visit: &mut F,
    ) -> Result<Option<usize>>
    where
        F: FnMut(usize, &[f64], &[f64], &[f64]),
    {
        let n = self.dim;
        let sqrt_dt = self.dt.sqrt();
        let mut x = vec![0.0; states];
        let mut next = vec![0.0; states];
        let mut y = vec![0.0; n];
        let mut y_next = vec![0.0; n];
        let mut y_base = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut scratch = vec![0.0; n];

        for k in 0..self.steps {
            c.mul_into(&x, &mut y);
            self.noise
                .fill_increments(sqrt_dt, rng, &mut scratch, &mut gamma, &mut w);

            // next = x + A x dt + B w̃; the feedback term B r̃ is added below.
            a.mul_into(&x, &mut next);
            for (nx, xv) in next.iter_mut().zip(&x) {
                *nx = xv + *nx * self.dt;
            }
            b.mul_add_into(&w, &mut next);

            match self.interpretation {
                Interpretation::Ito => {
                    for i in 0..n {
                        r[i] = gamma[i] * y[i];
                    }
                }
                Interpretation::Stratonovich => {
                    c.mul_into(&next, &mut y_base);
                    midpoint(&gamma, &y, &y_base, cb, &mut r, &mut y_next, k)?;
                }
            }
            for i in 0..n {
                u[i] = w[i] + r[i];
            }
            visit(k, &y, &u, &r);
            b.mul_add_into(&r, &mut next);
            std::mem::swap(&mut x, &mut next);
            if overflowed(&x) {
                return Ok(Some(k + 1));
            }
        }
        c.mul_into(&x, &mut y);
        visit(self.steps, &y, &[], &[]);
        Ok(None)
    }

    fn run_convolution<F>(&self, kernels: &[Flat], rng: &mut ChaCha8Rng, visit: &mut F) -> Result<Option<usize>>
    where
        F: FnMut(usize, &[f64], &[f64], &[f64]),
    {
        let n = self.dim;
        let sqrt_dt = self.dt.sqrt();
        let mut history = vec![0.0; n * self.steps];
        let mut y = vec![0.0; n];
        let mut y_next = vec![0.0; n];
        let mut y_base = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut scratch = vec![0.0; n];

        let convolve = |history: &[f64], upto: usize, at: usize, out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..upto {
                kernels[at - j].mul_add_into(&history[j * n..(j + 1) * n], out);
            }
        };

        for k in 0..self.steps {
            if self.interpretation == Interpretation::Ito || k == 0 {
                convolve(&history, k, k, &mut y);
            } else {
                y.copy_from_slice(&y_next);
            }
            if overflowed(&y) {
                return Ok(Some(k));
            }
            self.noise
                .fill_increments(sqrt_dt, rng, &mut scratch, &mut gamma, &mut w);
            match self.interpretation {
                Interpretation::Ito => {
                    for i in 0..n {
                        r[i] = gamma[i] * y[i];
                    }
                }
                Interpretation::Stratonovich => {
                    // y_{k+1} = Σ_{j<k} M_{k+1−j} ũ_j + M_1 (w̃_k + r̃_k)
                    convolve(&history, k, k + 1, &mut y_base);
                    kernels[1].mul_add_into(&w, &mut y_base);
                    midpoint(&gamma, &y, &y_base, &kernels[1], &mut r, &mut y_next, k)?;
                }
            }
            for i in 0..n {
                u[i] = w[i] + r[i];
            }
            history[k * n..(k + 1) * n].copy_from_slice(&u);
            visit(k, &y, &u, &r);
        }
        if self.interpretation == Interpretation::Ito || self.steps == 0 {
            convolve(&history, self.steps, self.steps, &mut y);
        } else {
            y.copy_from_slice(&y_next);
        }
        if overflowed(&y) {
            return Ok(Some(self.steps));
        }
        visit(self.steps, &y, &[], &[]);
        Ok(None)
    }
}

/// Solve `r̃ = diag(γ̃) (y_k + y_{k+1}) / 2` with `y_{k+1} = y_base + G r̃` by
/// fixed-point iteration from the left-point value; leaves `y_{k+1}` in `y_next`.
fn midpoint(
    gamma: &[f64],
    y: &[f64],
    y_base: &[f64],
    gain: &Flat,
    r: &mut [f64],
    y_next: &mut [f64],
    step: usize,
) -> Result<()> {
    let n = y.len();
    for i in 0..n {
        r[i] = gamma[i] * y[i];
    }
    for _ in 0..MIDPOINT_MAX_ITER {
        y_next.copy_from_slice(y_base);
        gain.mul_add_into(r, y_next);
        let mut diff = 0.0f64;
        let mut size = 0.0f64;
        for i in 0..n {
            let updated = 0.5 * gamma[i] * (y[i] + y_next[i]);
            diff = diff.max((updated - r[i]).abs());
            size = size.max(updated.abs());
            r[i] = updated;
        }
        if diff <= MIDPOINT_TOL * size || diff == 0.0 {
            y_next.copy_from_slice(y_base);
            gain.mul_add_into(r, y_next);
            return Ok(());
        }
    }
    Err(Error::MidpointNoConvergence { step })
}

fn overflowed(v: &[f64]) -> bool {
    v.iter().any(|x| !(x.abs() <= OVERFLOW_LIMIT))
}

pub(crate) fn convolution_kernels(sys: &LtiSystem, dt: f64, steps: usize) -> Result<Vec<Flat>> {
    let kernels = match sys {
        LtiSystem::StateSpace(ss) => {
            let phi = matrix_exponential(&ss.a, dt)?;
            let mut propagated = ss.b.clone();
            let mut out = Vec::with_capacity(steps + 1);
            for _ in 0..=steps.max(1) {
                out.push(Flat::new(&(&ss.c * &propagated)));
                propagated = &phi * propagated;
            }
            out
        }
        LtiSystem::Sampled(_) => crate::analysis::kernel_samples(sys, dt, steps.max(1))?
            .iter()
            .map(Flat::new)
            .collect(),
    };
    Ok(kernels)
}
