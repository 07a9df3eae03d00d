//! Monte Carlo simulation of the closed stochastic loop.
//!
//! Itô paths use the left-point (Euler–Maruyama) feedback `r̃_k = Γ̃_k y_k`;
//! Stratonovich paths use the midpoint feedback `r̃_k = Γ̃_k (y_k + y_{k+1})/2`,
//! solved per step by fixed-point iteration. The state starts at zero.
//!
//! Path `p` of an ensemble draws from stream `p` of the seed, and paths are
//! reduced in fixed-size chunks merged in index order, so results do not
//! depend on thread count or scheduling.

mod path;
mod stats;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseRng, NoiseSpec};
use crate::operator::Interpretation;
use crate::system::LtiSystem;

use path::Prepared;
pub use stats::{
    increment_independence_test, open_loop_final_variance, quadratic_variation, FinalStats, IncrementRecord,
    IndependenceReport, QuadratureRule,
};

/// A path is flagged diverged once any state entry exceeds this magnitude.
pub const OVERFLOW_LIMIT: f64 = 1e150;

const CHUNK_PATHS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler recursion on the state; O(N) per path.
    StateSpaceStep,
    /// Direct convolution with the impulse response; O(N²) per path.
    ConvolutionSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub interpretation: Interpretation,
    pub scheme: Scheme,
    /// Record feedback increments and test them for temporal correlation up to this lag.
    pub independence_max_lag: Option<usize>,
}

impl SimulationConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, seed: u64, interpretation: Interpretation) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            seed,
            interpretation,
            scheme: Scheme::StateSpaceStep,
            independence_max_lag: None,
        }
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !self.dt.is_finite() || !self.horizon.is_finite() || self.horizon < self.dt {
            return Err(Error::BadGrid {
                horizon: self.horizon,
                dt: self.dt,
            });
        }
        Ok((self.horizon / self.dt).round() as usize)
    }

    fn validate(&self) -> Result<usize> {
        if self.n_paths == 0 {
            return Err(Error::BadConfig("n_paths must be at least 1".into()));
        }
        self.steps()
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        let steps = self.steps()?;
        Ok((0..=steps).map(|k| k as f64 * self.dt).collect())
    }
}

/// One simulated path. `y` has `N + 1` entries; the increments have `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub y: Vec<DVector<f64>>,
    pub u_increments: Vec<DVector<f64>>,
    pub r_increments: Vec<DVector<f64>>,
    /// First grid index whose state overflowed; the path stops there.
    pub diverged_at: Option<usize>,
}

fn simulate_path(sys: &LtiSystem, noise: &NoiseSpec, config: &SimulationConfig, rng: &mut NoiseRng) -> Result<Path> {
    config.validate()?;
    let prepared = Prepared::new(sys, noise, config)?;
    let mut path = Path {
        y: Vec::with_capacity(prepared.steps + 1),
        u_increments: Vec::with_capacity(prepared.steps),
        r_increments: Vec::with_capacity(prepared.steps),
        diverged_at: None,
    };
    path.diverged_at = prepared.run(rng.inner(), |k, y, u, r| {
        path.y.push(DVector::from_column_slice(y));
        if k < prepared.steps {
            path.u_increments.push(DVector::from_column_slice(u));
            path.r_increments.push(DVector::from_column_slice(r));
        }
    })?;
    Ok(path)
}

/// Itô path with left-point feedback.
pub fn simulate_path_ito(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    config: &SimulationConfig,
    rng: &mut NoiseRng,
) -> Result<Path> {
    let config = SimulationConfig {
        interpretation: Interpretation::Ito,
        ..config.clone()
    };
    simulate_path(sys, noise, &config, rng)
}

/// Stratonovich path with midpoint feedback.
pub fn simulate_path_stratonovich(
    sys: &LtiSystem,
    noise: &NoiseSpec,
    config: &SimulationConfig,
    rng: &mut NoiseRng,
) -> Result<Path> {
    let config = SimulationConfig {
        interpretation: Interpretation::Stratonovich,
        ..config.clone()
    };
    simulate_path(sys, noise, &config, rng)
}

const INDEPENDENCE_ANCHORS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct IndependenceDiagnostics {
    /// Feedback increments `r̃`.
    pub r: IndependenceReport,
    /// Loop input increments `ũ`.
    pub u: IndependenceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationEnsemble {
    pub times: Vec<f64>,
    /// Mean of `‖y(t_k)‖²` over non-diverged paths; NaN if every path diverged.
    pub var_y: Vec<f64>,
    /// Sample std of `‖y(t_k)‖²` over `√n`; NaN with fewer than two paths.
    pub stderr_y: Vec<f64>,
    /// Mean of `‖ũ_k‖² / dt`, `k < N`.
    pub var_u_increments: Vec<f64>,
    /// Mean running quadratic variation `⟨y⟩(t_k)`.
    pub qv_y: Vec<f64>,
    pub n_paths: usize,
    /// Paths that overflowed; they are left out of every statistic.
    pub n_diverged: usize,
    pub diagnostics: Option<IndependenceDiagnostics>,
}

impl SimulationEnsemble {
    pub fn n_valid(&self) -> usize {
        self.n_paths - self.n_diverged
    }

    pub fn final_var_y(&self) -> f64 {
        *self.var_y.last().expect("ensembles hold at least one time")
    }

    pub fn final_stderr_y(&self) -> f64 {
        *self.stderr_y.last().expect("ensembles hold at least one time")
    }

    /// Least-squares slope of `ln var_y` against time over the last third of the horizon.
    pub fn log_variance_slope(&self) -> f64 {
        let end = *self.times.last().unwrap_or(&0.0);
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.var_y)
            .filter(|(t, v)| **t >= 2.0 * end / 3.0 && **v > 0.0 && v.is_finite())
            .map(|(t, v)| (*t, v.ln()))
            .collect();
        if pts.len() < 2 {
            return f64::NAN;
        }
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        cov / var
    }
}

/// Steps at which increments are kept: a few windows `a, a+1, …, a+max_lag`
/// spread over the horizon, or every step when `max_lag` covers it.
fn recorded_steps(steps: usize, max_lag: usize) -> Vec<usize> {
    let window = max_lag + 1;
    if steps <= INDEPENDENCE_ANCHORS * window {
        return (0..steps).collect();
    }
    let mut out = Vec::with_capacity(INDEPENDENCE_ANCHORS * window);
    for m in 0..INDEPENDENCE_ANCHORS {
        let anchor = (m + 1) * (steps - window) / INDEPENDENCE_ANCHORS;
        let from = out.last().map_or(anchor, |&l: &usize| anchor.max(l + 1));
        out.extend(from..anchor + window);
    }
    out
}

#[derive(Debug, Clone)]
struct Accumulator {
    sum_y2: Vec<f64>,
    sum_y4: Vec<f64>,
    sum_u2: Vec<f64>,
    sum_qv: Vec<f64>,
    valid: usize,
    diverged: usize,
    r_record: Vec<f64>,
    u_record: Vec<f64>,
}

impl Accumulator {
    fn new(steps: usize) -> Self {
        Accumulator {
            sum_y2: vec![0.0; steps + 1],
            sum_y4: vec![0.0; steps + 1],
            sum_u2: vec![0.0; steps],
            sum_qv: vec![0.0; steps + 1],
            valid: 0,
            diverged: 0,
            r_record: Vec::new(),
            u_record: Vec::new(),
        }
    }

    fn merge(&mut self, other: Accumulator) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.sum_y2, &other.sum_y2);
        add(&mut self.sum_y4, &other.sum_y4);
        add(&mut self.sum_u2, &other.sum_u2);
        add(&mut self.sum_qv, &other.sum_qv);
        self.valid += other.valid;
        self.diverged += other.diverged;
        self.r_record.extend(other.r_record);
        self.u_record.extend(other.u_record);
    }
}

/// Simulate `paths` and fold them into an accumulator. `slots[k]` is the
/// record position of step `k`, if it is recorded.
fn run_chunk(
    prepared: &Prepared<'_>,
    seed: u64,
    paths: std::ops::Range<usize>,
    slots: Option<&[Option<usize>]>,
) -> Result<Accumulator> {
    let steps = prepared.steps;
    let n = prepared.dim;
    let mut acc = Accumulator::new(steps);
    let mut y2 = vec![0.0; steps + 1];
    let mut qv = vec![0.0; steps + 1];
    let mut u2 = vec![0.0; steps];
    let recorded = slots.map_or(0, |s| s.iter().flatten().count());
    let mut r_path = vec![0.0; recorded * n];
    let mut u_path = vec![0.0; recorded * n];
    let mut prev = vec![0.0; n];
    for p in paths {
        let mut rng = NoiseRng::for_stream(seed, p as u64);
        let mut running = 0.0;
        let diverged = prepared.run(rng.inner(), |k, y, u, r| {
            if k > 0 {
                running += y.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            prev.copy_from_slice(y);
            y2[k] = y.iter().map(|v| v * v).sum();
            qv[k] = running;
            if k < steps {
                u2[k] = u.iter().map(|v| v * v).sum();
                if let Some(slot) = slots.and_then(|s| s[k]) {
                    r_path[slot * n..(slot + 1) * n].copy_from_slice(r);
                    u_path[slot * n..(slot + 1) * n].copy_from_slice(u);
                }
            }
        })?;
        if diverged.is_some() {
            acc.diverged += 1;
            continue;
        }
        acc.valid += 1;
        for k in 0..=steps {
            acc.sum_y2[k] += y2[k];
            acc.sum_y4[k] += y2[k] * y2[k];
            acc.sum_qv[k] += qv[k];
        }
        acc.sum_u2.iter_mut().zip(&u2).for_each(|(a, b)| *a += b);
        if slots.is_some() {
            acc.r_record.extend_from_slice(&r_path);
            acc.u_record.extend_from_slice(&u_path);
        }
    }
    Ok(acc)
}

fn run_all(prepared: &Prepared<'_>, config: &SimulationConfig, slots: Option<&[Option<usize>]>) -> Result<Accumulator> {
    let chunks: Vec<std::ops::Range<usize>> = (0..config.n_paths)
        .step_by(CHUNK_PATHS)
        .map(|start| start..(start + CHUNK_PATHS).min(config.n_paths))
        .collect();
    let batch = 2 * rayon::current_num_threads().max(1);
    let mut total = Accumulator::new(prepared.steps);
    for group in chunks.chunks(batch) {
        let results: Vec<Result<Accumulator>> = group
            .par_iter()
            .map(|range| run_chunk(prepared, config.seed, range.clone(), slots))
            .collect();
        for r in results {
            total.merge(r?);
        }
    }
    Ok(total)
}

fn slot_table(steps: usize, recorded: &[usize]) -> Vec<Option<usize>> {
    let mut slots = vec![None; steps];
    for (i, &k) in recorded.iter().enumerate() {
        slots[k] = Some(i);
    }
    slots
}

/// Run `n_paths` independent paths and reduce them to per-time statistics.
pub fn run_ensemble(sys: &LtiSystem, noise: &NoiseSpec, config: &SimulationConfig) -> Result<SimulationEnsemble> {
    let steps = config.validate()?;
    let prepared = Prepared::new(sys, noise, config)?;
    let recorded = config.independence_max_lag.map(|lag| recorded_steps(steps, lag));
    let slots = recorded.as_ref().map(|r| slot_table(steps, r));
    let total = run_all(&prepared, config, slots.as_deref())?;

    let valid = total.valid as f64;
    let mean = |sums: &[f64], scale: f64| -> Vec<f64> {
        sums.iter()
            .map(|s| if total.valid > 0 { s / valid / scale } else { f64::NAN })
            .collect()
    };
    let var_y = mean(&total.sum_y2, 1.0);
    let stderr_y = total
        .sum_y4
        .iter()
        .zip(&var_y)
        .map(|(s4, m)| {
            if total.valid < 2 {
                return f64::NAN;
            }
            let sample_var = ((s4 - valid * m * m) / (valid - 1.0)).max(0.0);
            (sample_var / valid).sqrt()
        })
        .collect();

    let diagnostics = match (config.independence_max_lag, recorded) {
        (Some(max_lag), Some(recorded)) => {
            let r = IncrementRecord::new(recorded.clone(), total.valid, prepared.dim, total.r_record)?;
            let u = IncrementRecord::new(recorded, total.valid, prepared.dim, total.u_record)?;
            Some(IndependenceDiagnostics {
                r: increment_independence_test(&r, max_lag)?,
                u: increment_independence_test(&u, max_lag)?,
            })
        }
        _ => None,
    };

    Ok(SimulationEnsemble {
        times: config.times()?,
        var_y,
        stderr_y,
        var_u_increments: mean(&total.sum_u2, config.dt),
        qv_y: mean(&total.sum_qv, 1.0),
        n_paths: config.n_paths,
        n_diverged: total.diverged,
        diagnostics,
    })
}
