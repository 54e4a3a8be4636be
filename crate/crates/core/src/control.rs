//! Value functions and feedback laws derived from a lower desirability bound,
//! plus the audits that certify them.
//!
//! With `V_u = -lambda ln Psi_l` the feedback is
//! `u = (lambda / Psi_l) R^-1 G^T grad Psi_l = -R^-1 G^T grad V_u`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hjb::HjbProblem;
use crate::poly::{PolyError, PolyMatrix, Polynomial};
use crate::sos::SemialgebraicDomain;

/// Default lower limit on admissible `Psi_l` values.
pub const DEFAULT_GUARD: f64 = 1e-12;

/// Threshold for the audit inequalities.
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("desirability {value:e} at {point:?} is below the guard {guard:e}")]
    NonpositiveDesirability {
        point: Vec<f64>,
        value: f64,
        guard: f64,
    },
    #[error("point {0:?} lies outside every piece of the value function")]
    OutsideDomain(Vec<f64>),
    #[error("the audit grid must exclude the origin")]
    OriginInGrid,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// One polynomial piece of a value function together with its derivatives.
#[derive(Debug, Clone)]
struct Piece {
    domain: Option<SemialgebraicDomain>,
    psi: Polynomial,
    gradient: Vec<Polynomial>,
    hessian: Vec<Vec<Polynomial>>,
}

impl Piece {
    fn new(domain: Option<SemialgebraicDomain>, psi: Polynomial) -> Result<Self, ControlError> {
        let n = psi.nvars();
        let gradient = (0..n)
            .map(|i| psi.differentiate(i))
            .collect::<Result<Vec<_>, _>>()?;
        let hessian = gradient
            .iter()
            .map(|g| {
                (0..n)
                    .map(|j| g.differentiate(j))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Piece {
            domain,
            psi,
            gradient,
            hessian,
        })
    }
}

/// Desirability, gradient and Hessian of `Psi_l` at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub psi: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `V_u = -lambda ln Psi_l`, possibly piecewise over subdomains.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    pieces: Vec<Piece>,
    lambda: f64,
    guard: f64,
}

/// Tolerance used when deciding which piece a point belongs to.
const PIECE_TOL: f64 = 1e-12;

impl ValueFunction {
    pub fn new(psi_l: Polynomial, lambda: f64) -> Result<Self, ControlError> {
        Self::build(vec![Piece::new(None, psi_l)?], lambda)
    }

    /// One `Psi_l` per subdomain; a point uses the first piece whose domain contains it.
    pub fn piecewise(
        pieces: Vec<(SemialgebraicDomain, Polynomial)>,
        lambda: f64,
    ) -> Result<Self, ControlError> {
        if pieces.is_empty() {
            return Err(ControlError::InvalidArgument("no pieces".into()));
        }
        let nvars = pieces[0].1.nvars();
        if pieces
            .iter()
            .any(|(d, p)| p.nvars() != nvars || d.nvars() != nvars)
        {
            return Err(ControlError::InvalidArgument(
                "pieces disagree on the number of variables".into(),
            ));
        }
        let pieces = pieces
            .into_iter()
            .map(|(d, p)| Piece::new(Some(d), p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::build(pieces, lambda)
    }

    fn build(pieces: Vec<Piece>, lambda: f64) -> Result<Self, ControlError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ControlError::InvalidArgument(format!("lambda = {lambda}")));
        }
        Ok(ValueFunction {
            pieces,
            lambda,
            guard: DEFAULT_GUARD,
        })
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn nvars(&self) -> usize {
        self.pieces[0].psi.nvars()
    }

    /// The `Psi_l` pieces in order.
    pub fn pieces(&self) -> impl Iterator<Item = (Option<&SemialgebraicDomain>, &Polynomial)> {
        self.pieces.iter().map(|p| (p.domain.as_ref(), &p.psi))
    }

    fn piece(&self, x: &[f64]) -> Result<&Piece, ControlError> {
        if x.len() != self.nvars() {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars(),
                got: x.len(),
            }
            .into());
        }
        self.pieces
            .iter()
            .find(|p| p.domain.as_ref().is_none_or(|d| d.contains(x, PIECE_TOL)))
            .ok_or_else(|| ControlError::OutsideDomain(x.to_vec()))
    }

    /// `Psi_l(x)` without the guard.
    pub fn desirability(&self, x: &[f64]) -> Result<f64, ControlError> {
        Ok(self.piece(x)?.psi.eval(x))
    }

    /// Value, gradient and Hessian of `Psi_l`, rejecting values at or below the guard.
    pub fn jet(&self, x: &[f64]) -> Result<Jet, ControlError> {
        let piece = self.piece(x)?;
        let psi = piece.psi.eval(x);
        if !(psi > self.guard) {
            return Err(ControlError::NonpositiveDesirability {
                point: x.to_vec(),
                value: psi,
                guard: self.guard,
            });
        }
        let n = x.len();
        Ok(Jet {
            psi,
            gradient: DVector::from_iterator(n, piece.gradient.iter().map(|g| g.eval(x))),
            hessian: DMatrix::from_fn(n, n, |i, j| piece.hessian[i][j].eval(x)),
        })
    }

    /// `-lambda ln Psi_l(x)`.
    pub fn value_at(&self, x: &[f64]) -> Result<f64, ControlError> {
        Ok(-self.lambda * self.jet(x)?.psi.ln())
    }

    /// `grad V_u = -(lambda / Psi_l) grad Psi_l`.
    pub fn gradient_at(&self, x: &[f64]) -> Result<DVector<f64>, ControlError> {
        let jet = self.jet(x)?;
        Ok(jet.gradient * (-self.lambda / jet.psi))
    }

    /// Largest value of `V_u` over `points`; used as the surrogate for the sup norm of `V*`.
    pub fn sup_norm(&self, points: &[Vec<f64>]) -> Result<f64, ControlError> {
        points
            .iter()
            .map(|x| self.value_at(x).map(f64::abs))
            .try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
    }
}

/// Feedback `u(x) = (lambda / Psi_l) R^-1 G^T grad Psi_l`, optionally saturated per channel.
#[derive(Debug, Clone)]
pub struct Controller {
    value: ValueFunction,
    g: PolyMatrix,
    r_inv: DMatrix<f64>,
    saturation: Option<Vec<f64>>,
}

impl Controller {
    pub fn new(problem: &HjbProblem, value: ValueFunction) -> Result<Self, ControlError> {
        if value.nvars() != problem.nvars() {
            return Err(ControlError::InvalidArgument(format!(
                "value function has {} variables, problem has {}",
                value.nvars(),
                problem.nvars()
            )));
        }
        Ok(Controller {
            value,
            g: problem.g().clone(),
            r_inv: problem.r_inv().clone(),
            saturation: None,
        })
    }

    /// Clamp input `i` to `[-limits[i], limits[i]]`.
    pub fn with_saturation(mut self, limits: Vec<f64>) -> Result<Self, ControlError> {
        if limits.len() != self.num_inputs() || limits.iter().any(|l| !(*l > 0.0)) {
            return Err(ControlError::InvalidArgument(
                "one positive saturation limit per input is required".into(),
            ));
        }
        self.saturation = Some(limits);
        Ok(self)
    }

    pub fn value(&self) -> &ValueFunction {
        &self.value
    }

    pub fn num_inputs(&self) -> usize {
        self.g.cols()
    }

    pub fn control_at(&self, x: &[f64]) -> Result<DVector<f64>, ControlError> {
        let jet = self.value.jet(x)?;
        let g = self.g.evaluate(x)?;
        let mut u = &self.r_inv * g.transpose() * jet.gradient * (self.value.lambda / jet.psi);
        if let Some(limits) = &self.saturation {
            for (ui, l) in u.iter_mut().zip(limits) {
                *ui = ui.clamp(-l, *l);
            }
        }
        Ok(u)
    }

    /// `-R^-1 G^T grad V_u`; equal to [`Controller::control_at`] without saturation.
    pub fn control_from_value_gradient(&self, x: &[f64]) -> Result<DVector<f64>, ControlError> {
        let g = self.g.evaluate(x)?;
        Ok(-(&self.r_inv * g.transpose() * self.value.gradient_at(x)?))
    }
}

/// Audit outcome at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SclfPoint {
    pub x: Vec<f64>,
    /// `L(V_u)` under the synthesized feedback.
    pub lv: f64,
    /// `L(V_u) + q + (lambda / 2 Psi_l^2) grad Psi_l^T Sigma grad Psi_l`.
    pub strengthened: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SclfReport {
    pub points: usize,
    pub max_lv: f64,
    pub max_strengthened: f64,
    /// Points where `L(V_u) > tol`.
    pub violations: Vec<SclfPoint>,
    /// Points where the strengthened quantity exceeds `tol`.
    pub strengthened_violations: Vec<SclfPoint>,
    /// Points where `Psi_l` fell below the guard.
    pub undefined: Vec<Vec<f64>>,
    pub tol: f64,
}

impl SclfReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
            && self.strengthened_violations.is_empty()
            && self.undefined.is_empty()
    }
}

/// `L(V_u)` and its strengthened form at one point.
pub fn sclf_point(
    controller: &Controller,
    problem: &HjbProblem,
    x: &[f64],
) -> Result<SclfPoint, ControlError> {
    let v = controller.value();
    let lambda = v.lambda();
    let jet = v.jet(x)?;
    let f = problem.f().evaluate(x)?.column(0).into_owned();
    let g = problem.g().evaluate(x)?;
    let sigma = problem.sigma().evaluate(x)?;
    let u = controller.control_at(x)?;
    let grad_v = &jet.gradient * (-lambda / jet.psi);
    let hess_v = &jet.gradient * jet.gradient.transpose() * (lambda / (jet.psi * jet.psi))
        - &jet.hessian * (lambda / jet.psi);
    let drift = f + g * u;
    let lv = grad_v.dot(&drift) + 0.5 * (hess_v * &sigma).trace();
    let quad = jet.gradient.dot(&(&sigma * &jet.gradient));
    let strengthened = lv + problem.q().eval(x) + lambda / (2.0 * jet.psi * jet.psi) * quad;
    Ok(SclfPoint {
        x: x.to_vec(),
        lv,
        strengthened,
    })
}

/// Evaluate the stochastic control Lyapunov conditions at every grid point.
pub fn sclf_audit(
    controller: &Controller,
    problem: &HjbProblem,
    grid: &[Vec<f64>],
) -> Result<SclfReport, ControlError> {
    if grid.iter().any(|x| x.iter().all(|v| *v == 0.0)) {
        return Err(ControlError::OriginInGrid);
    }
    let mut report = SclfReport {
        points: grid.len(),
        max_lv: f64::NEG_INFINITY,
        max_strengthened: f64::NEG_INFINITY,
        violations: Vec::new(),
        strengthened_violations: Vec::new(),
        undefined: Vec::new(),
        tol: AUDIT_TOL,
    };
    for x in grid {
        let pt = match sclf_point(controller, problem, x) {
            Ok(pt) => pt,
            Err(ControlError::NonpositiveDesirability { .. }) => {
                report.undefined.push(x.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        report.max_lv = report.max_lv.max(pt.lv);
        report.max_strengthened = report.max_strengthened.max(pt.strengthened);
        if pt.lv > AUDIT_TOL {
            report.violations.push(pt.clone());
        }
        if pt.strengthened > AUDIT_TOL {
            report.strengthened_violations.push(pt);
        }
    }
    Ok(report)
}

/// Upper bound `-lambda ln(1 - min(1, eps / eta))` on the extra cost, `eta = exp(-v_sup / lambda)`.
/// Infinite when `eps >= eta`.
pub fn suboptimality_bound(epsilon: f64, v_sup_norm_estimate: f64, lambda: f64) -> f64 {
    let eta = (-v_sup_norm_estimate / lambda).exp();
    let ratio = epsilon / eta;
    if ratio >= 1.0 {
        f64::INFINITY
    } else {
        -lambda * (-ratio).ln_1p()
    }
}

/// Violation of the ordering `Psi_l <= Psi* <= Psi_u` at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub x: Vec<f64>,
    pub psi_l: f64,
    pub psi_star: f64,
    pub psi_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBoundsReport {
    pub points: usize,
    /// `max (Psi_l - Psi*)`; positive means the lower bound is crossed.
    pub max_lower_excess: f64,
    /// `max (Psi* - Psi_u)`.
    pub max_upper_excess: f64,
    /// `max |Psi_l - Psi*|` and `max |Psi_u - Psi*|`.
    pub max_error_lower: f64,
    pub max_error_upper: f64,
    pub violations: Vec<BoundViolation>,
    /// Nodes where `Psi_l > Psi_u + tol`: the arguments look swapped.
    pub inverted: usize,
    pub tol: f64,
}

impl ValueBoundsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.inverted == 0
    }
}

/// Check `-lambda ln Psi_l >= V* >= -lambda ln Psi_u` through the equivalent
/// ordering of desirabilities, with tolerance `tol` in desirability space.
pub fn value_bounds_check(
    psi_l: &Polynomial,
    psi_u: &Polynomial,
    oracle: &[(Vec<f64>, f64)],
    tol: f64,
) -> ValueBoundsReport {
    let mut report = ValueBoundsReport {
        points: oracle.len(),
        max_lower_excess: f64::NEG_INFINITY,
        max_upper_excess: f64::NEG_INFINITY,
        max_error_lower: 0.0,
        max_error_upper: 0.0,
        violations: Vec::new(),
        inverted: 0,
        tol,
    };
    for (x, star) in oracle {
        let (l, u) = (psi_l.eval(x), psi_u.eval(x));
        report.max_lower_excess = report.max_lower_excess.max(l - star);
        report.max_upper_excess = report.max_upper_excess.max(star - u);
        report.max_error_lower = report.max_error_lower.max((l - star).abs());
        report.max_error_upper = report.max_error_upper.max((u - star).abs());
        if l > u + tol {
            report.inverted += 1;
        }
        if l - star > tol || star - u > tol {
            report.violations.push(BoundViolation {
                x: x.clone(),
                psi_l: l,
                psi_star: *star,
                psi_u: u,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::tests::scalar_problem;

    fn p1(s: &str) -> Polynomial {
        Polynomial::parse(s, &["x"]).unwrap()
    }

    #[test]
    fn value_examples() {
        let v = ValueFunction::new(p1("1 - x^2/2"), 1.0).unwrap();
        assert_eq!(v.value_at(&[0.0]).unwrap(), 0.0);
        let e = ValueFunction::new(Polynomial::constant(1, (-1.0f64).exp()), 1.0).unwrap();
        assert!((e.value_at(&[0.3]).unwrap() - 1.0).abs() < 1e-15);
        let b = ValueFunction::new(Polynomial::constant(1, 20.0 * (-10.0f64).exp()), 1.0).unwrap();
        assert!((b.value_at(&[1.0]).unwrap() - (10.0 - 20.0f64.ln())).abs() < 1e-12);
        assert!((b.value_at(&[1.0]).unwrap() - 7.0043).abs() < 1e-4);
    }

    #[test]
    fn guard_rejects_nonpositive_desirability() {
        let v = ValueFunction::new(p1("1 - x^2"), 1.0).unwrap();
        assert!(matches!(
            v.value_at(&[1.0]),
            Err(ControlError::NonpositiveDesirability { .. })
        ));
        assert!(matches!(
            v.value_at(&[1.5]),
            Err(ControlError::NonpositiveDesirability { .. })
        ));
        assert!(v.value_at(&[0.999]).is_ok());
        let strict = v.with_guard(0.5);
        assert!(strict.value_at(&[0.9]).is_err());
    }

    #[test]
    fn controller_matches_value_gradient() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        let v = ValueFunction::new(p1("1 - 0.4*x^2 + 0.1*x^3"), 1.0).unwrap();
        let c = Controller::new(&p, v).unwrap();
        for x in [-0.9, -0.3, 0.2, 0.7] {
            let a = c.control_at(&[x]).unwrap()[0];
            let b = c.control_from_value_gradient(&[x]).unwrap()[0];
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300), "{a} vs {b}");
            let h = 1e-6;
            let vp = c.value().value_at(&[x + h]).unwrap();
            let vm = c.value().value_at(&[x - h]).unwrap();
            assert!((a + (vp - vm) / (2.0 * h)).abs() < 1e-5);
        }
    }

    #[test]
    fn controller_vanishes_at_a_maximum() {
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        let c =
            Controller::new(&p, ValueFunction::new(p1("1 - (x - 0.2)^2"), 1.0).unwrap()).unwrap();
        assert_eq!(c.control_at(&[0.2]).unwrap()[0], 0.0);
    }

    #[test]
    fn saturation_clamps_each_channel() {
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        let v = ValueFunction::new(p1("1 - 4*x^2"), 1.0).unwrap();
        let c = Controller::new(&p, v).unwrap();
        let raw = c.control_at(&[0.4]).unwrap()[0];
        assert!(raw.abs() > 1.0);
        let sat = c.clone().with_saturation(vec![1.0]).unwrap();
        assert_eq!(sat.control_at(&[0.4]).unwrap()[0], raw.signum());
        assert!(c.with_saturation(vec![-1.0]).is_err());
    }

    #[test]
    fn piecewise_value_picks_the_containing_piece() {
        let left =
            SemialgebraicDomain::new(vec![p1("1 - x^2"), p1("-x")], vec![], vec![(-1.0, 0.0)])
                .unwrap();
        let right =
            SemialgebraicDomain::new(vec![p1("1 - x^2"), p1("x")], vec![], vec![(0.0, 1.0)])
                .unwrap();
        let v = ValueFunction::piecewise(vec![(left, p1("1 + x")), (right, p1("1 - x/2"))], 1.0)
            .unwrap();
        assert!((v.desirability(&[-0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((v.desirability(&[0.5]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(v.desirability(&[0.0]).unwrap(), 1.0);
        assert!(matches!(
            v.desirability(&[1.5]),
            Err(ControlError::OutsideDomain(_))
        ));
    }

    #[test]
    fn audit_flags_a_non_solution() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        let c = Controller::new(&p, ValueFunction::new(p1("1 - x^2/2"), 1.0).unwrap()).unwrap();
        let grid: Vec<Vec<f64>> = (1..=100)
            .map(|i| vec![-1.0 + 2.0 * i as f64 / 101.0])
            .collect();
        let report = sclf_audit(&c, &p, &grid).unwrap();
        assert!(!report.passed());
        assert!(!report.violations.is_empty());
        assert!(matches!(
            sclf_audit(&c, &p, &[vec![0.0]]),
            Err(ControlError::OriginInGrid)
        ));
    }

    #[test]
    fn strengthened_quantity_is_the_scaled_subsolution_residual() {
        // Under lambda G R^-1 G^T = Sigma the strengthened quantity reduces to
        // (lambda / Psi) (q Psi / lambda - L Psi).
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        let c = Controller::new(&p, ValueFunction::new(p1("1 - 0.3*x^2"), 1.0).unwrap()).unwrap();
        for x in [-0.8, -0.1, 0.5] {
            let pt = sclf_point(&c, &p, &[x]).unwrap();
            let psi: f64 = 1.0 - 0.3 * x * x;
            let l_psi = -x * (-0.6 * x) + 0.5 * (-0.6);
            let expected = (x * x * psi - l_psi) / psi;
            assert!(
                (pt.strengthened - expected).abs() < 1e-12,
                "{} vs {expected}",
                pt.strengthened
            );
        }
    }

    #[test]
    fn suboptimality_examples() {
        assert_eq!(suboptimality_bound(0.0, 3.0, 1.0), 0.0);
        let eta = (-3.0f64).exp();
        assert!(suboptimality_bound(eta, 3.0, 1.0).is_infinite());
        assert!(suboptimality_bound(2.0 * eta, 3.0, 1.0).is_infinite());
        assert!((suboptimality_bound(eta / 2.0, 3.0, 1.0) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn value_bounds_examples() {
        let star = p1("1 - x/3");
        let oracle: Vec<(Vec<f64>, f64)> = (0..=10)
            .map(|i| {
                let x = i as f64 / 10.0;
                (vec![x], star.eval(&[x]))
            })
            .collect();
        let exact = value_bounds_check(&star, &star, &oracle, 1e-4);
        assert!(exact.passed());
        assert_eq!(exact.max_error_lower, 0.0);
        let lo = p1("1 - x/2");
        let hi = p1("1 - x/4");
        assert!(value_bounds_check(&lo, &hi, &oracle, 1e-4).passed());
        let swapped = value_bounds_check(&hi, &lo, &oracle, 1e-4);
        assert!(!swapped.passed());
        assert!(swapped.inverted > 0);
    }
}
