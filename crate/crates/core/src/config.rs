//! TOML problem configurations.
//!
//! ```toml
//! interpretation = "stratonovich"
//! gamma_cov = [[0.5]]
//! w_cov = [[1.0]]
//!
//! [system]
//! A = [[-1.0]]
//! B = [[1.0]]
//! C = [[1.0]]
//!
//! [simulation]
//! dt = 1e-3
//! T = 20.0
//! n_paths = 10000
//! seed = 7
//! ```
//!
//! A system is given either by `A`, `B`, `C` or by a `[system.impulse_samples]`
//! table with `dt` and `values` (a list of matrices). Validation errors name the
//! offending field, e.g. `system.A`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisOptions;
use crate::error::{Error, Result};
use crate::noise::{validate_noise, NoiseSpec};
use crate::operator::{Interpretation, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use crate::simulate::{Scheme, SimulationConfig};
use crate::system::{make_sampled, make_state_space, LtiSystem};

pub type RawMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<RawMatrix>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<RawMatrix>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<RawMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impulse_samples: Option<RawSamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSamples {
    pub dt: f64,
    pub values: Vec<RawMatrix>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAnalysis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_max_iter: Option<u64>,
    #[serde(rename = "quad_T", default, skip_serializing_if = "Option::is_none")]
    pub quad_horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSimulation {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_paths: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    /// Worker threads; 0 picks one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<u64>,
}

/// The configuration document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub interpretation: Interpretation,
    pub gamma_cov: RawMatrix,
    pub w_cov: RawMatrix,
    pub system: RawSystem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<RawAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<RawSimulation>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config documents always serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub config: SimulationConfig,
    pub threads: usize,
}

/// A validated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub system: LtiSystem,
    pub noise: NoiseSpec,
    pub interpretation: Interpretation,
    pub analysis: AnalysisOptions,
    pub simulation: Option<SimulationSettings>,
}

impl ProblemConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let system = build_system(&raw.system)?;
        let n = system.inputs();
        if system.outputs() != n {
            return Err(schema(
                "system",
                format!(
                    "feedback needs as many outputs as inputs, got {} and {n}",
                    system.outputs()
                ),
            ));
        }
        let gamma_cov = matrix(&raw.gamma_cov, "gamma_cov")?;
        let w_cov = matrix(&raw.w_cov, "w_cov")?;
        for (m, field) in [(&gamma_cov, "gamma_cov"), (&w_cov, "w_cov")] {
            if m.shape() != (n, n) {
                return Err(schema(
                    field,
                    format!("expected {n}x{n} to match the system, got {}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        let noise = validate_noise(gamma_cov, w_cov).map_err(|e| match e {
            Error::NotSymmetric { what, .. } | Error::NotPsd { what, .. } => {
                let field = if what.starts_with("gamma") {
                    "gamma_cov"
                } else {
                    "w_cov"
                };
                schema(field, e.to_string())
            }
            other => other,
        })?;

        let analysis = build_analysis(raw.analysis.as_ref().unwrap_or(&RawAnalysis::default()))?;
        let simulation = raw
            .simulation
            .as_ref()
            .map(|s| build_simulation(s, raw.interpretation))
            .transpose()?;
        Ok(ProblemConfig {
            system,
            noise,
            interpretation: raw.interpretation,
            analysis,
            simulation,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn simulation(&self) -> Result<&SimulationSettings> {
        self.simulation
            .as_ref()
            .ok_or_else(|| schema("simulation", "a [simulation] table is required".into()))
    }
}

/// Read a config document from disk without validating it.
pub fn read_raw(path: &Path) -> std::io::Result<String> {
    std::fs::read_to_string(path)
}

fn schema(field: &str, message: String) -> Error {
    Error::SchemaViolation {
        field: field.to_string(),
        message,
    }
}

fn finite(v: f64, field: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(schema(field, format!("must be finite, got {v}")))
    }
}

fn positive(v: f64, field: &str) -> Result<f64> {
    if finite(v, field)? > 0.0 {
        Ok(v)
    } else {
        Err(schema(field, format!("must be positive, got {v}")))
    }
}

fn matrix(rows: &RawMatrix, field: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(schema(field, "must be a non-empty nested array".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(schema(
            field,
            format!("row {i} has {} entries, expected {cols}", rows[i].len()),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(schema(field, "all entries must be finite".into()));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

fn build_system(raw: &RawSystem) -> Result<LtiSystem> {
    match (&raw.a, &raw.b, &raw.c, &raw.impulse_samples) {
        (Some(a), Some(b), Some(c), None) => {
            let a = matrix(a, "system.A")?;
            let b = matrix(b, "system.B")?;
            let c = matrix(c, "system.C")?;
            if !a.is_square() {
                return Err(schema(
                    "system.A",
                    format!("must be square, got {}x{}", a.nrows(), a.ncols()),
                ));
            }
            if b.nrows() != a.nrows() {
                return Err(schema(
                    "system.B",
                    format!("expected {} rows to match system.A, got {}", a.nrows(), b.nrows()),
                ));
            }
            if c.ncols() != a.nrows() {
                return Err(schema(
                    "system.C",
                    format!("expected {} columns to match system.A, got {}", a.nrows(), c.ncols()),
                ));
            }
            make_state_space(a, b, c)
        }
        (None, None, None, Some(samples)) => {
            let dt = positive(samples.dt, "system.impulse_samples.dt")?;
            if samples.values.is_empty() {
                return Err(schema(
                    "system.impulse_samples.values",
                    "needs at least one sample".into(),
                ));
            }
            let values = samples
                .values
                .iter()
                .enumerate()
                .map(|(k, m)| matrix(m, &format!("system.impulse_samples.values[{k}]")))
                .collect::<Result<Vec<_>>>()?;
            let shape = values[0].shape();
            if let Some(k) = values.iter().position(|m| m.shape() != shape) {
                return Err(schema(
                    &format!("system.impulse_samples.values[{k}]"),
                    format!("expected {}x{} like the first sample", shape.0, shape.1),
                ));
            }
            make_sampled(dt, values).map_err(|e| schema("system.impulse_samples", e.to_string()))
        }
        _ => Err(schema(
            "system",
            "give either A, B and C or an impulse_samples table, not both".into(),
        )),
    }
}

fn build_analysis(raw: &RawAnalysis) -> Result<AnalysisOptions> {
    let power_tol = match raw.power_tol {
        Some(t) => positive(t, "analysis.power_tol")?,
        None => DEFAULT_POWER_TOL,
    };
    let power_max_iter = match raw.power_max_iter {
        Some(0) => return Err(schema("analysis.power_max_iter", "must be at least 1".into())),
        Some(n) => n as usize,
        None => DEFAULT_POWER_MAX_ITER,
    };
    let quad_horizon = raw.quad_horizon.map(|t| positive(t, "analysis.quad_T")).transpose()?;
    let quad_dt = raw.quad_dt.map(|t| positive(t, "analysis.quad_dt")).transpose()?;
    if let (Some(t), Some(dt)) = (quad_horizon, quad_dt) {
        if dt > t {
            return Err(schema("analysis.quad_dt", format!("must not exceed quad_T = {t}")));
        }
    }
    Ok(AnalysisOptions {
        power_tol,
        power_max_iter,
        quad_horizon,
        quad_dt,
    })
}

fn build_simulation(raw: &RawSimulation, interpretation: Interpretation) -> Result<SimulationSettings> {
    let dt = positive(raw.dt, "simulation.dt")?;
    let horizon = finite(raw.horizon, "simulation.T")?;
    if horizon < dt {
        return Err(schema(
            "simulation.T",
            format!("must be at least dt = {dt}, got {horizon}"),
        ));
    }
    if raw.n_paths == 0 {
        return Err(schema("simulation.n_paths", "must be at least 1".into()));
    }
    let mut config = SimulationConfig::new(dt, horizon, raw.n_paths as usize, raw.seed, interpretation);
    config.scheme = raw.scheme.unwrap_or(Scheme::StateSpaceStep);
    Ok(SimulationSettings {
        config,
        threads: raw.threads.unwrap_or(0) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
interpretation = "ito"
gamma_cov = [[1.0]]
w_cov = [[1.0]]

[system]
A = [[-1.0]]
B = [[1.0]]
C = [[1.0]]

[simulation]
dt = 1e-3
T = 1.0
n_paths = 10
seed = 3
"#;

    fn field_of(err: Error) -> String {
        match err {
            Error::SchemaViolation { field, .. } => field,
            other => panic!("expected a schema violation, got {other:?}"),
        }
    }

    #[test]
    fn parses_scalar_problem() {
        let cfg = ProblemConfig::parse(SCALAR).unwrap();
        assert_eq!(cfg.interpretation, Interpretation::Ito);
        let sim = cfg.simulation().unwrap();
        assert_eq!(sim.config.steps().unwrap(), 1000);
        assert_eq!(sim.config.scheme, Scheme::StateSpaceStep);
        assert_eq!(sim.threads, 0);
    }

    #[test]
    fn round_trips() {
        let raw = RawConfig::parse(SCALAR).unwrap();
        assert_eq!(RawConfig::parse(&raw.to_toml()).unwrap(), raw);
    }

    #[test]
    fn field_paths_in_errors() {
        let bad = SCALAR.replace("A = [[-1.0]]", "A = [[-1.0, 0.0]]");
        assert_eq!(field_of(ProblemConfig::parse(&bad).unwrap_err()), "system.A");
        let bad = SCALAR.replace("n_paths = 10", "n_paths = 0");
        assert_eq!(field_of(ProblemConfig::parse(&bad).unwrap_err()), "simulation.n_paths");
        let bad = SCALAR.replace("gamma_cov = [[1.0]]", "gamma_cov = [[-1.0]]");
        assert_eq!(field_of(ProblemConfig::parse(&bad).unwrap_err()), "gamma_cov");
        let bad = SCALAR.replace("w_cov = [[1.0]]", "w_cov = [[1.0, 0.0], [0.0, 1.0]]");
        assert_eq!(field_of(ProblemConfig::parse(&bad).unwrap_err()), "w_cov");
        let bad = SCALAR.replace("dt = 1e-3", "dt = nan");
        assert_eq!(field_of(ProblemConfig::parse(&bad).unwrap_err()), "simulation.dt");
    }

    #[test]
    fn syntax_and_unknown_keys_are_parse_errors() {
        assert!(matches!(
            ProblemConfig::parse("interpretation = "),
            Err(Error::ConfigParse(_))
        ));
        let bad = SCALAR.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(matches!(ProblemConfig::parse(&bad), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn impulse_samples() {
        let text = r#"
interpretation = "ito"
gamma_cov = [[0.5]]
w_cov = [[1.0]]

[system.impulse_samples]
dt = 0.5
values = [[[1.0]], [[0.5]], [[0.25]]]
"#;
        let cfg = ProblemConfig::parse(text).unwrap();
        assert!(matches!(cfg.system, LtiSystem::Sampled(_)));
        assert!(cfg.simulation().is_err());

        let both = text.replace(
            "[system.impulse_samples]",
            "[system]\nA = [[-1.0]]\nB = [[1.0]]\nC = [[1.0]]\n\n[system.impulse_samples]",
        );
        assert_eq!(field_of(ProblemConfig::parse(&both).unwrap_err()), "system");
    }
}
