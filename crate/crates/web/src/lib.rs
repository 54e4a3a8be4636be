//! WebAssembly front end for the browser demo in `www/`.
//!
//! Every operation has a plain Rust form returning a serializable report and a
//! `#[wasm_bindgen]` wrapper that hands the report to JavaScript as JSON.

use lsctl_core::config::{ConfigError, LoadedConfig};
use lsctl_core::control::{ControlError, Controller, ValueFunction};
use lsctl_core::hjb::{solve_relaxation, HjbError};
use lsctl_core::poly::{monomial_basis, PolyError, Polynomial};
use lsctl_core::sdp::SolverSettings;
use lsctl_core::sos::{check_sos, SosCheck, SosError};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SCALAR_CONFIG: &str = include_str!("../../../configs/scalar_unstable.json");

/// Largest Gram basis accepted by [`sos_test`].
pub const MAX_GRAM_SIZE: usize = 45;
/// Degrees accepted by [`synthesize`].
pub const DEGREE_RANGE: (u32, u32) = (4, 16);
/// Sample counts accepted by [`synthesize`].
pub const SAMPLE_RANGE: (usize, usize) = (2, 1001);

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub polynomial: String,
    pub degree: u32,
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SosReport {
    pub sos: bool,
    pub factors: Vec<String>,
    /// Largest coefficient of `p - sum f_i^2`.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub label: String,
    pub epsilon: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Synthesis {
    pub degree: u32,
    pub regions: Vec<RegionReport>,
    pub x: Vec<f64>,
    pub psi_l: Vec<f64>,
    pub psi_u: Vec<f64>,
    /// `None` where `Psi_l` is too small for a finite value.
    pub value: Vec<Option<f64>>,
    pub control: Vec<Option<f64>>,
}

fn split_list(src: &str) -> Vec<&str> {
    src.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_point(src: &str, nvars: usize) -> Result<Vec<f64>, DemoError> {
    let point = split_list(src)
        .into_iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| DemoError::Input(format!("'{s}' is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if point.len() != nvars {
        return Err(DemoError::Input(format!(
            "expected {nvars} coordinates, got {}",
            point.len()
        )));
    }
    Ok(point)
}

fn parse_with_names(expr: &str, vars: &str) -> Result<(Polynomial, Vec<String>), DemoError> {
    let names: Vec<String> = split_list(vars).into_iter().map(String::from).collect();
    if names.is_empty() {
        return Err(DemoError::Input("no variables given".into()));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok((Polynomial::parse(expr, &refs)?, names))
}

/// Value and gradient of `expr` at `point`; both lists are comma separated.
pub fn probe(expr: &str, vars: &str, point: &str) -> Result<Probe, DemoError> {
    let (p, names) = parse_with_names(expr, vars)?;
    let x = parse_point(point, names.len())?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let gradient = p.gradient().evaluate(&x)?;
    Ok(Probe {
        polynomial: p.to_string_with(&refs),
        degree: p.degree(),
        value: p.eval(&x),
        gradient: gradient.iter().copied().collect(),
    })
}

/// SOS membership of `expr`, with a factorization when it is one.
pub fn sos_test(expr: &str, vars: &str) -> Result<SosReport, DemoError> {
    let (p, names) = parse_with_names(expr, vars)?;
    let gram = monomial_basis(p.nvars(), p.degree() / 2).len();
    if gram > MAX_GRAM_SIZE {
        return Err(DemoError::Input(format!(
            "Gram basis of size {gram} exceeds the demo limit of {MAX_GRAM_SIZE}"
        )));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    match check_sos(&p, &SolverSettings::default())? {
        SosCheck::NotSos => Ok(SosReport {
            sos: false,
            factors: Vec::new(),
            residual: None,
        }),
        SosCheck::Sos(factors) => {
            let mut rest = p.clone();
            for f in &factors {
                rest = rest.try_sub(&f.try_mul(f)?)?;
            }
            Ok(SosReport {
                sos: true,
                factors: factors
                    .iter()
                    .filter(|f| f.max_abs_coeff() > 1e-9)
                    .map(|f| f.to_string_with(&refs))
                    .collect(),
                residual: Some(rest.max_abs_coeff()),
            })
        }
    }
}

/// Solve the scalar benchmark with drift `drift` (in `x`) at one even degree and
/// sample the bounds, value and feedback on `samples` evenly spaced points of `[-1, 1]`.
pub fn synthesize(drift: &str, degree: u32, samples: usize) -> Result<Synthesis, DemoError> {
    if !degree.is_multiple_of(2) || degree < DEGREE_RANGE.0 || degree > DEGREE_RANGE.1 {
        return Err(DemoError::Input(format!(
            "degree must be even and within {}..={}",
            DEGREE_RANGE.0, DEGREE_RANGE.1
        )));
    }
    if samples < SAMPLE_RANGE.0 || samples > SAMPLE_RANGE.1 {
        return Err(DemoError::Input(format!(
            "samples must be within {}..={}",
            SAMPLE_RANGE.0, SAMPLE_RANGE.1
        )));
    }
    let mut json: serde_json::Value =
        serde_json::from_str(SCALAR_CONFIG).expect("embedded configuration is valid JSON");
    json["drift"] = serde_json::json!([drift]);
    let config = LoadedConfig::from_json(&json.to_string())?.config;
    let problem = config.problem()?;
    let subs = config.subproblems()?;

    let settings = SolverSettings::default();
    let mut regions = Vec::with_capacity(subs.len());
    let mut pieces = Vec::with_capacity(subs.len());
    for sub in &subs {
        let rung = solve_relaxation(&sub.problem, degree, &settings)?;
        let sol = rung.solution.ok_or_else(|| {
            DemoError::Input(format!(
                "degree {degree} relaxation has no solution in region {} ({:?})",
                sub.label, rung.diagnostics.status
            ))
        })?;
        regions.push(RegionReport {
            label: sub.label.clone(),
            epsilon: sol.epsilon,
            iterations: rung.diagnostics.iterations,
        });
        pieces.push((sub.problem.domain().clone(), sol.psi_l, sol.psi_u));
    }

    let value = ValueFunction::piecewise(
        pieces
            .iter()
            .map(|(d, l, _)| (d.clone(), l.clone()))
            .collect(),
        problem.lambda(),
    )?;
    let controller = Controller::new(&problem, value)?;
    let mut out = Synthesis {
        degree,
        regions,
        x: Vec::with_capacity(samples),
        psi_l: Vec::with_capacity(samples),
        psi_u: Vec::with_capacity(samples),
        value: Vec::with_capacity(samples),
        control: Vec::with_capacity(samples),
    };
    for i in 0..samples {
        let x = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
        let (_, l, u) = pieces
            .iter()
            .find(|(d, _, _)| d.contains(&[x], 1e-12))
            .unwrap_or(&pieces[pieces.len() - 1]);
        out.x.push(x);
        out.psi_l.push(l.eval(&[x]));
        out.psi_u.push(u.eval(&[x]));
        out.value.push(controller.value().value_at(&[x]).ok());
        out.control
            .push(controller.control_at(&[x]).ok().map(|c| c[0]));
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let report = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&report).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = probePolynomial)]
pub fn probe_polynomial(expr: &str, vars: &str, point: &str) -> Result<String, JsError> {
    to_js(probe(expr, vars, point))
}

#[wasm_bindgen(js_name = sosTest)]
pub fn sos_test_js(expr: &str, vars: &str) -> Result<String, JsError> {
    to_js(sos_test(expr, vars))
}

#[wasm_bindgen(js_name = synthesizeScalar)]
pub fn synthesize_scalar(drift: &str, degree: u32, samples: usize) -> Result<String, JsError> {
    to_js(synthesize(drift, degree, samples))
}
