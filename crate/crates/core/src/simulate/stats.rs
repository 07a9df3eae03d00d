//! Path statistics: quadratic variation, increment correlations and the
//! open-loop convolution estimator.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{NoiseRng, NoiseSpec};
use crate::system::LtiSystem;

use super::path::{convolution_kernels, Flat};
use super::CHUNK_PATHS;

const MIN_INDEPENDENCE_PATHS: usize = 100;

/// Running sum `⟨y⟩(t_k) = Σ_{j<k} ‖y_{j+1} − y_j‖²`; starts at 0.
pub fn quadratic_variation(path_y: &[DVector<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(path_y.len());
    let mut acc = 0.0;
    for (k, y) in path_y.iter().enumerate() {
        if k > 0 {
            acc += (y - &path_y[k - 1]).norm_squared();
        }
        out.push(acc);
    }
    out
}

/// Increments of many paths at a common set of step indices.
///
/// `data` is laid out path-major: path, then recorded step, then component.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementRecord {
    pub steps: Vec<usize>,
    pub n_paths: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl IncrementRecord {
    pub fn new(steps: Vec<usize>, n_paths: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != steps.len() * n_paths * dim {
            return Err(Error::DimensionMismatch {
                what: "increment record",
                expected: format!("{} values", steps.len() * n_paths * dim),
                found: format!("{} values", data.len()),
            });
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BadSamples("recorded steps must be strictly increasing".into()));
        }
        Ok(IncrementRecord {
            steps,
            n_paths,
            dim,
            data,
        })
    }

    /// Record every step of full paths, e.g. the `r_increments` of simulated paths.
    pub fn from_paths(paths: &[&[DVector<f64>]]) -> Result<Self> {
        let steps = paths.first().map_or(0, |p| p.len());
        let dim = paths.first().and_then(|p| p.first()).map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(paths.len() * steps * dim);
        for p in paths {
            if p.len() != steps {
                return Err(Error::DimensionMismatch {
                    what: "path length",
                    expected: steps.to_string(),
                    found: p.len().to_string(),
                });
            }
            for v in p.iter() {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "increment",
                        expected: dim.to_string(),
                        found: v.len().to_string(),
                    });
                }
                data.extend_from_slice(v.as_slice());
            }
        }
        IncrementRecord::new((0..steps).collect(), paths.len(), dim, data)
    }

    fn value(&self, path: usize, slot: usize, comp: usize) -> f64 {
        self.data[(path * self.steps.len() + slot) * self.dim + comp]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndependenceReport {
    /// Largest `|corr|` over all lags, times and component pairs.
    pub max_abs_corr: f64,
    /// `per_lag[ℓ − 1]` is the largest `|corr|` at lag `ℓ`.
    pub per_lag: Vec<f64>,
    /// Largest self-normalized statistic `|Σ a b| / √(Σ a² b²)`. It is
    /// approximately standard normal under independence even when the
    /// increments are heavy-tailed, unlike `√n · corr`.
    pub max_abs_z: f64,
    pub n_paths: usize,
}

impl IndependenceReport {
    /// Null-hypothesis bound `5/√n`.
    pub fn bound(&self) -> f64 {
        5.0 / (self.n_paths as f64).sqrt()
    }
}

fn self_normalized(a: &[f64], b: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += x * y;
        den += (x * y).powi(2);
    }
    if den > 0.0 {
        num / den.sqrt()
    } else {
        0.0
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom > 0.0 {
        sab / denom
    } else {
        0.0
    }
}

/// Cross-path sample correlation of every component pair of the increments at
/// steps `k` and `k + ℓ`, for `ℓ = 1..=max_lag` and all recorded `k` where both
/// steps are present. Degenerate (constant) samples count as uncorrelated.
pub fn increment_independence_test(record: &IncrementRecord, max_lag: usize) -> Result<IndependenceReport> {
    if record.n_paths < MIN_INDEPENDENCE_PATHS {
        return Err(Error::InsufficientPaths {
            needed: MIN_INDEPENDENCE_PATHS,
            got: record.n_paths,
        });
    }
    let column =
        |slot: usize, comp: usize| -> Vec<f64> { (0..record.n_paths).map(|p| record.value(p, slot, comp)).collect() };
    let mut per_lag = vec![0.0f64; max_lag];
    let mut max_abs_z = 0.0f64;
    for (slot, &k) in record.steps.iter().enumerate() {
        for lag in 1..=max_lag {
            let Ok(other) = record.steps.binary_search(&(k + lag)) else {
                continue;
            };
            for i in 0..record.dim {
                let a = column(slot, i);
                for j in 0..record.dim {
                    let b = column(other, j);
                    per_lag[lag - 1] = per_lag[lag - 1].max(correlation(&a, &b).abs());
                    max_abs_z = max_abs_z.max(self_normalized(&a, &b).abs());
                }
            }
        }
    }
    Ok(IndependenceReport {
        max_abs_corr: per_lag.iter().copied().fold(0.0, f64::max),
        per_lag,
        max_abs_z,
        n_paths: record.n_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    /// `Σ M(T − t_k) w̃_k`
    LeftPoint,
    /// `Σ ½(M(T − t_k) + M(T − t_{k+1})) w̃_k`
    Midpoint,
}

/// Mean of a per-path squared norm with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalStats {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// `E‖y(T)‖²` for the open-loop output `y(T) = ∫₀ᵀ M(T − τ) dw(τ)`, evaluated
/// with the given partial-sum rule. Gain noise in `noise` is not used.
pub fn open_loop_final_variance(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    rule: QuadratureRule,
) -> Result<FinalStats> {
    let steps = crate::analysis::grid_steps(horizon, dt)?;
    if n_paths == 0 {
        return Err(Error::BadConfig("n_paths must be at least 1".into()));
    }
    let n = sys.inputs();
    if noise.disturbances() != n {
        return Err(Error::DimensionMismatch {
            what: "w covariance",
            expected: format!("{n}x{n}"),
            found: format!("{0}x{0}", noise.disturbances()),
        });
    }
    let kernels = convolution_kernels(sys, dt, steps)?;
    let weights: Vec<Flat> = (0..steps)
        .map(|k| match rule {
            QuadratureRule::LeftPoint => kernels[steps - k].clone(),
            QuadratureRule::Midpoint => Flat::average(&kernels[steps - k], &kernels[steps - k - 1]),
        })
        .collect();
    let outputs = sys.outputs();
    let sqrt_dt = dt.sqrt();
    let gains = noise.gains();

    let chunk = |range: std::ops::Range<usize>| -> (f64, f64) {
        let mut gamma = vec![0.0; gains];
        let mut w = vec![0.0; n];
        let mut scratch = vec![0.0; gains.max(n)];
        let mut y = vec![0.0; outputs];
        let (mut s2, mut s4) = (0.0, 0.0);
        for p in range {
            let mut rng = NoiseRng::for_stream(seed, p as u64);
            y.iter_mut().for_each(|v| *v = 0.0);
            for weight in &weights {
                noise.fill_increments(sqrt_dt, rng.inner(), &mut scratch, &mut gamma, &mut w);
                weight.mul_add_into(&w, &mut y);
            }
            let y2: f64 = y.iter().map(|v| v * v).sum();
            s2 += y2;
            s4 += y2 * y2;
        }
        (s2, s4)
    };
    let ranges: Vec<_> = (0..n_paths)
        .step_by(CHUNK_PATHS)
        .map(|s| s..(s + CHUNK_PATHS).min(n_paths))
        .collect();
    let parts: Vec<(f64, f64)> = ranges.into_par_iter().map(chunk).collect();
    let (s2, s4) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let c = n_paths as f64;
    let mean = s2 / c;
    let stderr = if n_paths < 2 {
        f64::NAN
    } else {
        (((s4 - c * mean * mean) / (c - 1.0)).max(0.0) / c).sqrt()
    };
    Ok(FinalStats { mean, stderr, n_paths })
}
