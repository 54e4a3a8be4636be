//! In-memory stages behind each command: solve a hierarchy rung, rebuild the
//! controller from a stored solution, audit it and simulate it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lsctl_core::config::{ProblemConfig, Subproblem};
use lsctl_core::control::{
    sclf_audit, suboptimality_bound, value_bounds_check, ControlError, Controller, SclfReport,
    ValueBoundsReport, ValueFunction,
};
use lsctl_core::hjb::{solve_relaxation, HjbError, HjbProblem};
use lsctl_core::oracle::{self, OracleError};
use lsctl_core::poly::Polynomial;
use lsctl_core::sdp::{Residuals, SdpStatus, SolverSettings};
use lsctl_core::sim::{monte_carlo, MonteCarloResult, MonteCarloSummary, SimConfig, SimError};

/// Tolerance in desirability space for the oracle comparisons.
pub const ORACLE_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("solution does not match the configuration: {0}")]
    Mismatch(String),
}

/// Solver outcome for one region at one degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub region: String,
    pub status: Option<SdpStatus>,
    pub feasible: bool,
    pub epsilon: Option<f64>,
    pub iterations: usize,
    pub primal_obj: Option<f64>,
    pub dual_obj: Option<f64>,
    pub residuals: Option<Residuals>,
    pub num_constraints: usize,
    pub block_dims: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub degree: u32,
    /// Every region solved to optimality.
    pub feasible: bool,
    /// Every region ended in a definite status (optimal or infeasible).
    pub resolved: bool,
    /// Largest per-region epsilon when feasible.
    pub epsilon: Option<f64>,
    pub regions: Vec<PieceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPiece {
    pub region: String,
    pub epsilon: f64,
    pub psi_l: Polynomial,
    pub psi_u: Polynomial,
}

/// Polynomial bounds for every region at one degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub degree: u32,
    pub lambda: f64,
    pub pieces: Vec<SolutionPiece>,
}

fn definite(status: SdpStatus) -> bool {
    matches!(
        status,
        SdpStatus::Optimal | SdpStatus::Infeasible | SdpStatus::Unbounded
    )
}

/// Solve every region at `degree`. Build errors are recorded in the report, not raised.
pub fn solve_degree(
    subs: &[Subproblem],
    degree: u32,
    settings: &SolverSettings,
) -> (DegreeReport, Option<Solution>) {
    let mut regions = Vec::with_capacity(subs.len());
    let mut pieces = Vec::with_capacity(subs.len());
    for sub in subs {
        match solve_relaxation(&sub.problem, degree, settings) {
            Ok(rung) => {
                let d = &rung.diagnostics;
                let eps = rung.solution.as_ref().map(|s| s.epsilon);
                regions.push(PieceReport {
                    region: sub.label.clone(),
                    status: Some(d.status),
                    feasible: rung.feasible(),
                    epsilon: eps,
                    iterations: d.iterations,
                    primal_obj: Some(d.primal_obj),
                    dual_obj: Some(d.dual_obj),
                    residuals: Some(d.residuals),
                    num_constraints: d.num_constraints,
                    block_dims: d.block_dims.clone(),
                    error: None,
                });
                if let Some(s) = rung.solution {
                    pieces.push(SolutionPiece {
                        region: sub.label.clone(),
                        epsilon: s.epsilon,
                        psi_l: s.psi_l,
                        psi_u: s.psi_u,
                    });
                }
            }
            Err(e) => regions.push(PieceReport {
                region: sub.label.clone(),
                status: None,
                feasible: false,
                epsilon: None,
                iterations: 0,
                primal_obj: None,
                dual_obj: None,
                residuals: None,
                num_constraints: 0,
                block_dims: Vec::new(),
                error: Some(e.to_string()),
            }),
        }
    }
    let feasible = regions.iter().all(|r| r.feasible);
    let resolved = regions.iter().all(|r| r.status.is_some_and(definite));
    let epsilon = feasible.then(|| pieces.iter().map(|p| p.epsilon).fold(0.0, f64::max));
    let solution = feasible.then(|| Solution {
        degree,
        lambda: subs[0].problem.lambda(),
        pieces,
    });
    (
        DegreeReport {
            degree,
            feasible,
            resolved,
            epsilon,
            regions,
        },
        solution,
    )
}

impl Solution {
    pub fn epsilon(&self) -> f64 {
        self.pieces.iter().map(|p| p.epsilon).fold(0.0, f64::max)
    }

    pub fn piece(&self, region: &str) -> Option<&SolutionPiece> {
        self.pieces.iter().find(|p| p.region == region)
    }

    /// `V_u = -lambda ln Psi_l`, piecewise over the regions of `subs`.
    pub fn value_function(&self, subs: &[Subproblem]) -> Result<ValueFunction, PipelineError> {
        if subs.len() != self.pieces.len() {
            return Err(PipelineError::Mismatch(format!(
                "{} regions in the configuration, {} in the solution",
                subs.len(),
                self.pieces.len()
            )));
        }
        let mut parts = Vec::with_capacity(subs.len());
        for sub in subs {
            let piece = self.piece(&sub.label).ok_or_else(|| {
                PipelineError::Mismatch(format!("no piece for region {}", sub.label))
            })?;
            if piece.psi_l.nvars() != sub.problem.nvars() {
                return Err(PipelineError::Mismatch(format!(
                    "region {} has the wrong arity",
                    sub.label
                )));
            }
            parts.push((sub.problem.domain().clone(), piece.psi_l.clone()));
        }
        if parts.len() == 1 {
            let (_, psi) = parts.pop().expect("one part");
            return Ok(ValueFunction::new(psi, self.lambda)?);
        }
        Ok(ValueFunction::piecewise(parts, self.lambda)?)
    }

    pub fn controller(
        &self,
        problem: &HjbProblem,
        subs: &[Subproblem],
    ) -> Result<Controller, PipelineError> {
        Ok(Controller::new(problem, self.value_function(subs)?)?)
    }
}

/// Grid of the domain with `per_axis` nodes per coordinate, minus a ball around the origin.
pub fn audit_grid(problem: &HjbProblem, per_axis: usize, exclude_radius: f64) -> Vec<Vec<f64>> {
    problem
        .domain()
        .grid(per_axis)
        .into_iter()
        .filter(|x| {
            x.iter().map(|v| v * v).sum::<f64>().sqrt() >= exclude_radius.max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// Oracle comparison for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub region: String,
    /// `checked` or `skipped`.
    pub status: String,
    pub reason: Option<String>,
    pub nodes: usize,
    pub epsilon: f64,
    pub bounds: Option<ValueBoundsReport>,
    /// `max |Psi - Psi*| <= epsilon + tol` for both bounds.
    pub error_bound_holds: Option<bool>,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.status == "skipped"
            || (self.bounds.as_ref().is_some_and(ValueBoundsReport::passed)
                && self.error_bound_holds == Some(true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suboptimality {
    pub epsilon: f64,
    /// `max V_u` over the audit grid, standing in for the unknown sup norm of `V*`.
    pub value_sup_estimate: f64,
    /// `None` when the bound is vacuous.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveDefiniteness {
    pub value_at_origin: f64,
    pub min_value_off_origin: f64,
    pub nonpositive_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub degree: u32,
    pub sclf: SclfReport,
    pub oracle: Vec<OracleCheck>,
    pub suboptimality: Suboptimality,
    pub positive_definiteness: PositiveDefiniteness,
    pub passed: bool,
}

/// The oracle grid for a 1D region as `(x, Psi*)` pairs.
pub fn oracle_nodes(sub: &Subproblem, nodes: usize) -> Result<Vec<(Vec<f64>, f64)>, PipelineError> {
    let grid = oracle::solve_problem(&sub.problem, nodes)?;
    Ok(grid.nodes().map(|(x, v)| (vec![x], v)).collect())
}

/// Run every audit of `solution` against the configured problem.
pub fn verify(config: &ProblemConfig, solution: &Solution) -> Result<VerifyReport, PipelineError> {
    let problem = config
        .problem()
        .map_err(|e| PipelineError::Mismatch(e.to_string()))?;
    let subs = config
        .subproblems()
        .map_err(|e| PipelineError::Mismatch(e.to_string()))?;
    let controller = solution.controller(&problem, &subs)?;
    let audit = &config.audit;
    let grid = audit_grid(&problem, audit.grid_points, audit.exclude_radius);
    let sclf = sclf_audit(&controller, &problem, &grid)?;

    let mut checks = Vec::with_capacity(subs.len());
    for sub in &subs {
        let piece = solution
            .piece(&sub.label)
            .ok_or_else(|| PipelineError::Mismatch(format!("no piece for region {}", sub.label)))?;
        if problem.nvars() != 1 {
            checks.push(OracleCheck {
                region: sub.label.clone(),
                status: "skipped".into(),
                reason: Some("the finite-difference oracle is one-dimensional".into()),
                nodes: 0,
                epsilon: piece.epsilon,
                bounds: None,
                error_bound_holds: None,
            });
            continue;
        }
        let nodes = oracle_nodes(sub, audit.oracle_nodes)?;
        let bounds = value_bounds_check(&piece.psi_l, &piece.psi_u, &nodes, ORACLE_TOL);
        let limit = piece.epsilon + ORACLE_TOL;
        let error_ok = bounds.max_error_lower <= limit && bounds.max_error_upper <= limit;
        checks.push(OracleCheck {
            region: sub.label.clone(),
            status: "checked".into(),
            reason: None,
            nodes: nodes.len(),
            epsilon: piece.epsilon,
            bounds: Some(bounds),
            error_bound_holds: Some(error_ok),
        });
    }

    let value = controller.value();
    let mut v_sup = 0.0f64;
    let mut min_off = f64::INFINITY;
    let mut nonpositive = 0;
    for x in &grid {
        if let Ok(v) = value.value_at(x) {
            v_sup = v_sup.max(v);
            min_off = min_off.min(v);
            if v <= 0.0 {
                nonpositive += 1;
            }
        }
    }
    let origin = vec![0.0; problem.nvars()];
    let value_at_origin = value.value_at(&origin).unwrap_or(f64::NAN);
    let eps = solution.epsilon();
    let bound = suboptimality_bound(eps, v_sup, solution.lambda);
    let passed = sclf.passed() && checks.iter().all(OracleCheck::passed);
    Ok(VerifyReport {
        degree: solution.degree,
        sclf,
        oracle: checks,
        suboptimality: Suboptimality {
            epsilon: eps,
            value_sup_estimate: v_sup,
            bound: bound.is_finite().then_some(bound),
        },
        positive_definiteness: PositiveDefiniteness {
            value_at_origin,
            min_value_off_origin: min_off,
            nonpositive_points: nonpositive,
        },
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub degree: u32,
    pub x0: Vec<f64>,
    pub settings: SimConfig,
    /// `V_u(x0)`, the cost bound being tested.
    pub value_at_x0: f64,
    pub summary: MonteCarloSummary,
    /// `V_u(x0) + 2 std_err`.
    pub threshold: Option<f64>,
    pub mean_within_bound: Option<bool>,
}

/// Monte Carlo rollouts of the controller built from `solution`.
pub fn simulate(
    config: &ProblemConfig,
    solution: &Solution,
    x0: &[f64],
    settings: &SimConfig,
) -> Result<(SimulateReport, MonteCarloResult), PipelineError> {
    let problem = config
        .problem()
        .map_err(|e| PipelineError::Mismatch(e.to_string()))?;
    let subs = config
        .subproblems()
        .map_err(|e| PipelineError::Mismatch(e.to_string()))?;
    let controller = solution.controller(&problem, &subs)?;
    let value_at_x0 = controller.value().value_at(x0)?;
    let result = monte_carlo(&problem, &controller, x0, settings)?;
    let s = &result.summary;
    let threshold = s.std_err.map(|se| value_at_x0 + 2.0 * se);
    let mean_within_bound = s.mean_cost.zip(threshold).map(|(m, t)| m <= t);
    Ok((
        SimulateReport {
            degree: solution.degree,
            x0: x0.to_vec(),
            settings: settings.clone(),
            value_at_x0,
            summary: result.summary.clone(),
            threshold,
            mean_within_bound,
        },
        result,
    ))
}

/// Rows `region, x1..xn, psi_l, psi_u, v_u` on each region's sample grid; `v_u`
/// is empty where `Psi_l` is not positive.
pub fn samples_csv(subs: &[Subproblem], solution: &Solution, per_axis: usize) -> String {
    let n = subs.first().map_or(0, |s| s.problem.nvars());
    let mut out = String::from("region");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",psi_l,psi_u,v_u\n");
    for sub in subs {
        let Some(piece) = solution.piece(&sub.label) else {
            continue;
        };
        for x in sub.problem.domain().grid(per_axis) {
            let l = piece.psi_l.eval(&x);
            let u = piece.psi_u.eval(&x);
            let v = if l > 0.0 {
                format!("{}", 0.0 - solution.lambda * l.ln())
            } else {
                String::new()
            };
            let coords: Vec<String> = x.iter().map(f64::to_string).collect();
            out.push_str(&format!("{},{},{l},{u},{v}\n", sub.label, coords.join(",")));
        }
    }
    out
}

/// Rows `degree, region, status, epsilon` across the hierarchy.
pub fn epsilon_csv(reports: &[DegreeReport]) -> String {
    let mut out = String::from("degree,region,status,epsilon\n");
    for d in reports {
        for r in &d.regions {
            let status = r.status.map_or("error".to_string(), |s| format!("{s:?}"));
            let eps = r.epsilon.map_or(String::new(), |e| e.to_string());
            out.push_str(&format!("{},{},{status},{eps}\n", d.degree, r.region));
        }
    }
    out
}
