//! Machine-readable reports (TOML) and CSV tables emitted by the command line.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{CovarianceTrajectory, MssVerdict};
use crate::config::RawMatrix;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::operator::{lgo_matrix_kronecker, spectral_radius_dense, Interpretation};
use crate::simulate::SimulationEnsemble;
use crate::system::LtiSystem;

/// CSV tables never exceed this many data rows.
pub const MAX_CSV_ROWS: usize = 2000;

pub fn raw_matrix(m: &DMatrix<f64>) -> RawMatrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemMatrices {
    #[serde(rename = "A")]
    pub a: RawMatrix,
    #[serde(rename = "B")]
    pub b: RawMatrix,
    #[serde(rename = "C")]
    pub c: RawMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyStateReport {
    #[serde(rename = "U_bar")]
    pub u_bar: RawMatrix,
    #[serde(rename = "R_bar")]
    pub r_bar: RawMatrix,
    #[serde(rename = "Y_bar")]
    pub y_bar: RawMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub interpretation: Interpretation,
    pub mss: bool,
    pub h2_finite: bool,
    /// `inf` when the forward block is unstable.
    pub h2_squared: f64,
    pub rho: f64,
    /// Dense Kronecker oracle, when the block is a small Hurwitz realization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_dense: Option<f64>,
    pub rho_converged: bool,
    pub rho_truncated: bool,
    pub power_iterations: u64,
    /// Forward block actually analyzed; `A_S` under Stratonovich.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalent_system: Option<SystemMatrices>,
    pub worst_case_cov: RawMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state: Option<SteadyStateReport>,
}

impl AnalysisReport {
    pub fn new(verdict: &MssVerdict, sys: &LtiSystem, noise: &NoiseSpec) -> Self {
        let rho_dense = lgo_matrix_kronecker(sys, &noise.gamma_cov, verdict.interpretation)
            .and_then(|k| spectral_radius_dense(&k))
            .ok();
        AnalysisReport {
            interpretation: verdict.interpretation,
            mss: verdict.mss,
            h2_finite: verdict.h2_finite,
            h2_squared: verdict.h2_squared.value(),
            rho: verdict.rho,
            rho_dense,
            rho_converged: verdict.rho_converged,
            rho_truncated: verdict.rho_truncated,
            power_iterations: verdict.power_iterations as u64,
            equivalent_system: verdict.equivalent_system.state_space().map(|ss| SystemMatrices {
                a: raw_matrix(&ss.a),
                b: raw_matrix(&ss.b),
                c: raw_matrix(&ss.c),
            }),
            worst_case_cov: raw_matrix(&verdict.worst_case_cov),
            steady_state: verdict.steady_state.as_ref().map(|s| SteadyStateReport {
                u_bar: raw_matrix(&s.u_bar),
                r_bar: raw_matrix(&s.r_bar),
                y_bar: raw_matrix(&s.y_bar),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeDocument {
    pub analysis: AnalysisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSummary {
    /// Which loop was simulated, e.g. "equivalent forward block, ito".
    pub label: String,
    pub interpretation: Interpretation,
    pub n_paths: u64,
    pub n_diverged: u64,
    /// `nan` when every path diverged.
    pub var_y_final: f64,
    pub stderr_final: f64,
    pub log_variance_slope: f64,
}

impl SimulationSummary {
    pub fn new(label: &str, interpretation: Interpretation, ensemble: &SimulationEnsemble) -> Self {
        SimulationSummary {
            label: label.to_string(),
            interpretation,
            n_paths: ensemble.n_paths as u64,
            n_diverged: ensemble.n_diverged as u64,
            var_y_final: ensemble.final_var_y(),
            stderr_final: ensemble.final_stderr_y(),
            log_variance_slope: ensemble.log_variance_slope(),
        }
    }

    /// Some path overflowed, or the variance keeps growing at the end.
    pub fn shows_divergence(&self) -> bool {
        self.n_diverged > 0 || !self.var_y_final.is_finite() || self.log_variance_slope > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareDocument {
    pub ito_analysis: AnalysisReport,
    pub stratonovich_analysis: AnalysisReport,
    pub ito_simulation_of_equivalent: SimulationSummary,
    pub stratonovich_simulation: SimulationSummary,
    /// Agreement band in combined standard errors.
    pub tolerance_stderr: f64,
    pub agreement: bool,
}

/// Serialize a report document to TOML.
pub fn to_toml<T: Serialize>(doc: &T) -> Result<String> {
    toml::to_string(doc).map_err(|e| Error::BadConfig(format!("report serialization failed: {e}")))
}

/// Grid indices kept in a CSV table: all of them up to [`MAX_CSV_ROWS`],
/// otherwise `round(i·N/(rows−1))`.
pub fn downsample(len: usize) -> Vec<usize> {
    if len <= MAX_CSV_ROWS {
        return (0..len).collect();
    }
    let last = (len - 1) as f64;
    let rows = MAX_CSV_ROWS;
    (0..rows)
        .map(|i| (i as f64 * last / (rows - 1) as f64).round() as usize)
        .collect()
}

/// `t,var_y_empirical,stderr_y,var_y_predicted,n_diverged`.
pub fn simulation_csv(ensemble: &SimulationEnsemble, predicted: &CovarianceTrajectory) -> String {
    let tr_y = predicted.trace_y();
    let mut out = String::from("t,var_y_empirical,stderr_y,var_y_predicted,n_diverged\n");
    for k in downsample(ensemble.times.len()) {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{}",
            ensemble.times[k], ensemble.var_y[k], ensemble.stderr_y[k], tr_y[k], ensemble.n_diverged
        );
    }
    out
}

/// `t,tr_U,tr_R,tr_Y`.
pub fn trajectory_csv(traj: &CovarianceTrajectory) -> String {
    let mut out = String::from("t,tr_U,tr_R,tr_Y\n");
    for k in downsample(traj.times.len()) {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?}",
            traj.times[k],
            traj.u[k].trace(),
            traj.r[k].trace(),
            traj.y[k].trace()
        );
    }
    out
}
