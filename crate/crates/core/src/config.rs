//! JSON run configuration: one file fully determines a problem, its hierarchy,
//! the solver settings, the simulation protocol and the audit grids.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hjb::{partition_domain, BoundaryData, HjbData, HjbError, HjbProblem};
use crate::poly::{PolyMatrix, Polynomial};
use crate::sdp::SolverSettings;
use crate::sim::SimConfig;
use crate::sos::SemialgebraicDomain;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config line {line}, column {column}: {msg}")]
    Json {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("config field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("config describes an invalid problem: {0}")]
    Problem(#[from] HjbError),
}

fn field_err(field: impl Into<String>, msg: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        msg: msg.to_string(),
    }
}

/// A number, or a constant expression such as `"20*exp(-10)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
}

impl Scalar {
    pub fn resolve(&self, field: &str) -> Result<f64, ConfigError> {
        match self {
            Scalar::Number(v) => Ok(*v),
            Scalar::Expr(s) => {
                let p = Polynomial::parse(s, &[]).map_err(|e| field_err(field, e))?;
                Ok(p.constant_term())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointValue {
    pub x: Vec<f64>,
    pub psi: Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub generators: Vec<String>,
    pub boundary_factors: Vec<String>,
    pub bounds: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryConfig {
    Points(Vec<PointValue>),
    Polynomial(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub min_degree: u32,
    pub max_degree: u32,
}

impl HierarchyConfig {
    /// Even degrees in the range.
    pub fn degrees(&self) -> Vec<u32> {
        (self.min_degree..=self.max_degree)
            .filter(|d| d % 2 == 0 && *d >= 2)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_dt")]
    pub origin_ball: f64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_num_runs")]
    pub num_runs: usize,
    #[serde(default = "default_max_drift_step")]
    pub max_drift_step: f64,
}

fn default_max_drift_step() -> f64 {
    SimConfig::default().max_drift_step
}

fn default_dt() -> f64 {
    0.005
}

fn default_max_time() -> f64 {
    50.0
}

fn default_num_runs() -> usize {
    20
}

impl SimulationConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            origin_ball: self.origin_ball,
            max_time: self.max_time,
            rng_seed: self.rng_seed,
            num_runs: self.num_runs,
            max_drift_step: self.max_drift_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Points per axis of the SCLF audit grid.
    pub grid_points: usize,
    /// Audit points closer than this to the origin are skipped.
    pub exclude_radius: f64,
    /// Nodes of the finite-difference oracle per subdomain (1D only).
    pub oracle_nodes: usize,
    /// Points per axis of the exported sample grid.
    pub sample_points: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            grid_points: 2000,
            exclude_radius: 1e-3,
            oracle_nodes: 2001,
            sample_points: 401,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub name: String,
    pub variables: Vec<String>,
    pub drift: Vec<String>,
    pub input_gain: Vec<Vec<String>>,
    pub noise_gain: Vec<Vec<String>>,
    pub state_cost: String,
    pub control_penalty: Vec<Vec<f64>>,
    pub noise_covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub domain: DomainConfig,
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub anchors: Vec<PointValue>,
    #[serde(default)]
    pub partition_axis: Option<usize>,
    pub hierarchy: HierarchyConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub audit: AuditConfig,
}

/// A parsed configuration together with the hash of its canonical JSON form.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ProblemConfig,
    pub hash: String,
}

/// One region of the (possibly partitioned) problem.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub label: String,
    pub problem: HjbProblem,
}

impl LoadedConfig {
    pub fn from_json(src: &str) -> Result<Self, ConfigError> {
        let json_err = |e: serde_json::Error| ConfigError::Json {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(src).map_err(json_err)?;
        let config: ProblemConfig = serde_json::from_str(src).map_err(json_err)?;
        let canonical = serde_json::to_string(&value).expect("a JSON value always serializes");
        let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
        config.validate()?;
        Ok(LoadedConfig { config, hash })
    }
}

impl ProblemConfig {
    fn names(&self) -> Vec<&str> {
        self.variables.iter().map(String::as_str).collect()
    }

    pub fn nvars(&self) -> usize {
        self.variables.len()
    }

    fn poly(&self, field: &str, src: &str) -> Result<Polynomial, ConfigError> {
        Polynomial::parse(src, &self.names()).map_err(|e| field_err(field, e))
    }

    fn poly_matrix(&self, field: &str, rows: &[Vec<String>]) -> Result<PolyMatrix, ConfigError> {
        let n = self.nvars();
        if rows.len() != n {
            return Err(field_err(
                field,
                format!("expected {n} rows, got {}", rows.len()),
            ));
        }
        let cols = rows[0].len();
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(field_err(
                field,
                "rows must be non-empty and of equal length",
            ));
        }
        let mut entries = Vec::with_capacity(n * cols);
        for (i, row) in rows.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                entries.push(self.poly(&format!("{field}[{i}][{j}]"), s)?);
            }
        }
        PolyMatrix::new(n, cols, entries).map_err(|e| field_err(field, e))
    }

    fn matrix(field: &str, rows: &[Vec<f64>], size: usize) -> Result<DMatrix<f64>, ConfigError> {
        if rows.len() != size || rows.iter().any(|r| r.len() != size) {
            return Err(field_err(field, format!("expected a {size}x{size} matrix")));
        }
        Ok(DMatrix::from_fn(size, size, |i, j| rows[i][j]))
    }

    fn point(&self, field: &str, x: &[f64]) -> Result<Vec<f64>, ConfigError> {
        if x.len() != self.nvars() {
            return Err(field_err(
                field,
                format!("expected {} coordinates", self.nvars()),
            ));
        }
        Ok(x.to_vec())
    }

    /// Structural checks that do not need the problem to be assembled.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.variables.is_empty() {
            return Err(field_err("variables", "at least one variable is required"));
        }
        for (i, v) in self.variables.iter().enumerate() {
            let ok = v
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !ok || self.variables[..i].contains(v) {
                return Err(field_err(
                    format!("variables[{i}]"),
                    format!("invalid or repeated name '{v}'"),
                ));
            }
        }
        let h = self.hierarchy;
        if h.min_degree > h.max_degree || h.degrees().is_empty() {
            return Err(field_err("hierarchy", "range contains no even degree >= 2"));
        }
        if let Some(axis) = self.partition_axis {
            if axis >= self.nvars() {
                return Err(field_err(
                    "partition_axis",
                    format!("axis {axis} out of range"),
                ));
            }
        }
        if let Some(sim) = &self.simulation {
            self.point("simulation.x0", &sim.x0)?;
            sim.sim_config()
                .validate()
                .map_err(|e| field_err("simulation", e))?;
        }
        let a = &self.audit;
        if a.grid_points < 2
            || a.oracle_nodes < 3
            || a.sample_points < 2
            || !(a.exclude_radius >= 0.0)
        {
            return Err(field_err(
                "audit",
                "grids need at least 2 points (oracle: 3)",
            ));
        }
        self.problem().map(|_| ())
    }

    /// Assemble and validate the full problem.
    pub fn problem(&self) -> Result<HjbProblem, ConfigError> {
        let n = self.nvars();
        let drift: Vec<Vec<String>> = self.drift.iter().map(|s| vec![s.clone()]).collect();
        let f = self.poly_matrix("drift", &drift)?;
        let g = self.poly_matrix("input_gain", &self.input_gain)?;
        let b = self.poly_matrix("noise_gain", &self.noise_gain)?;
        let q = self.poly("state_cost", &self.state_cost)?;
        let r = Self::matrix("control_penalty", &self.control_penalty, g.cols())?;
        let sigma_eps = Self::matrix("noise_covariance", &self.noise_covariance, b.cols())?;

        let d = &self.domain;
        let generators = d
            .generators
            .iter()
            .enumerate()
            .map(|(i, s)| self.poly(&format!("domain.generators[{i}]"), s))
            .collect::<Result<Vec<_>, _>>()?;
        let boundary_factors = d
            .boundary_factors
            .iter()
            .enumerate()
            .map(|(i, s)| self.poly(&format!("domain.boundary_factors[{i}]"), s))
            .collect::<Result<Vec<_>, _>>()?;
        if d.bounds.len() != n {
            return Err(field_err(
                "domain.bounds",
                format!("expected {n} intervals"),
            ));
        }
        let bounds = d.bounds.iter().map(|[lo, hi]| (*lo, *hi)).collect();
        let domain = SemialgebraicDomain::new(generators, boundary_factors, bounds)
            .map_err(|e| field_err("domain", e))?;

        let psi_boundary = match &self.boundary {
            BoundaryConfig::Polynomial(s) => {
                BoundaryData::Polynomial(self.poly("boundary.polynomial", s)?)
            }
            BoundaryConfig::Points(pts) => BoundaryData::Points(
                pts.iter()
                    .enumerate()
                    .map(|(i, pv)| {
                        let field = format!("boundary.points[{i}]");
                        Ok((self.point(&field, &pv.x)?, pv.psi.resolve(&field)?))
                    })
                    .collect::<Result<_, ConfigError>>()?,
            ),
        };
        let anchors = self
            .anchors
            .iter()
            .enumerate()
            .map(|(i, pv)| {
                let field = format!("anchors[{i}]");
                Ok((self.point(&field, &pv.x)?, pv.psi.resolve(&field)?))
            })
            .collect::<Result<_, ConfigError>>()?;
        Ok(HjbProblem::new(HjbData {
            f,
            g,
            b,
            q,
            r,
            sigma_eps,
            lambda: self.lambda,
            domain,
            psi_boundary,
            anchors,
        })?)
    }

    /// The regions solved independently: both halves when `partition_axis` is set.
    pub fn subproblems(&self) -> Result<Vec<Subproblem>, ConfigError> {
        let p = self.problem()?;
        Ok(match self.partition_axis {
            None => vec![Subproblem {
                label: "full".into(),
                problem: p,
            }],
            Some(axis) => {
                let [neg, pos] = partition_domain(&p, axis)?;
                let var = &self.variables[axis];
                vec![
                    Subproblem {
                        label: format!("{var}-neg"),
                        problem: neg,
                    },
                    Subproblem {
                        label: format!("{var}-pos"),
                        problem: pos,
                    },
                ]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{
        "name": "scalar",
        "variables": ["x"],
        "drift": ["-x^3 + 5*x^2 + 3*x"],
        "input_gain": [["1"]],
        "noise_gain": [["1"]],
        "state_cost": "x^2",
        "control_penalty": [[1]],
        "noise_covariance": [[1]],
        "lambda": 1,
        "domain": {"generators": ["1 - x^2"], "boundary_factors": ["x + 1", "x - 1"], "bounds": [[-1, 1]]},
        "boundary": {"points": [{"x": [-1], "psi": "20*exp(-10)"}, {"x": [1], "psi": "20*exp(-10)"}]},
        "anchors": [{"x": [0], "psi": 1}],
        "partition_axis": 0,
        "hierarchy": {"min_degree": 8, "max_degree": 20},
        "simulation": {"x0": [-0.5]}
    }"#;

    #[test]
    fn scalar_config_builds_two_halves() {
        let loaded = LoadedConfig::from_json(SCALAR).unwrap();
        assert_eq!(loaded.hash.len(), 64);
        let subs = loaded.config.subproblems().unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].label, "x-neg");
        assert_eq!(subs[0].problem.domain().bounds, vec![(-1.0, 0.0)]);
        assert_eq!(
            loaded.config.hierarchy.degrees(),
            vec![8, 10, 12, 14, 16, 18, 20]
        );
        let sim = loaded.config.simulation.as_ref().unwrap();
        assert_eq!(
            sim.sim_config(),
            SimConfig {
                rng_seed: 0,
                ..Default::default()
            }
        );
        assert_eq!(loaded.config.solver, SolverSettings::default());
        let b = subs[1].problem.psi_boundary().value_at(&[1.0]);
        assert!((b - 20.0 * (-10.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn hash_ignores_formatting_but_not_content() {
        let a = LoadedConfig::from_json(SCALAR).unwrap();
        let compact: serde_json::Value = serde_json::from_str(SCALAR).unwrap();
        let b = LoadedConfig::from_json(&serde_json::to_string_pretty(&compact).unwrap()).unwrap();
        assert_eq!(a.hash, b.hash);
        let c =
            LoadedConfig::from_json(&SCALAR.replace("\"lambda\": 1", "\"lambda\": 1.0")).unwrap();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn malformed_polynomial_names_the_field() {
        let src = SCALAR.replace("-x^3 + 5*x^2 + 3*x", "-x^3 + 5*y");
        match LoadedConfig::from_json(&src) {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, "drift[0][0]"),
            other => panic!("unexpected {other:?}"),
        }
        let src = SCALAR.replace("\"state_cost\"", "\"state_kost\"");
        match LoadedConfig::from_json(&src) {
            Err(ConfigError::Json { line, msg, .. }) => {
                assert!(line > 1);
                assert!(msg.contains("state_kost"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let src = SCALAR.replace("\"lambda\": 1", "\"lambda\": 2");
        assert!(matches!(
            LoadedConfig::from_json(&src),
            Err(ConfigError::Problem(_))
        ));
    }

    #[test]
    fn structural_errors() {
        let src = SCALAR.replace("\"min_degree\": 8", "\"min_degree\": 30");
        assert!(matches!(
            LoadedConfig::from_json(&src),
            Err(ConfigError::Field { .. })
        ));
        let src = SCALAR.replace("\"x0\": [-0.5]", "\"x0\": [-0.5, 0]");
        match LoadedConfig::from_json(&src) {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, "simulation.x0"),
            other => panic!("unexpected {other:?}"),
        }
        let src = SCALAR.replace("\"partition_axis\": 0", "\"partition_axis\": 3");
        assert!(matches!(
            LoadedConfig::from_json(&src),
            Err(ConfigError::Field { .. })
        ));
    }
}
