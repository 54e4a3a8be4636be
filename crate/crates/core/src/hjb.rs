//! First-exit stochastic control problems with a linear desirability PDE, and
//! the SOS relaxation that brackets the desirability between polynomial sub-
//! and supersolutions.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{PolyError, PolyMatrix, Polynomial};
use crate::sdp::{self, Residuals, SdpError, SdpStatus, SolverSettings};
use crate::sos::{
    boundary_operator, domain_operator_capped, AffineExpr, Basis, ParamPolynomial,
    SemialgebraicDomain, SosError, SosProgram, Var,
};

/// Coefficient tolerance for the compatibility identity.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HjbError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("the origin is not an equilibrium: f(0) = {0:?}")]
    NotEquilibrium(Vec<f64>),
    #[error("state cost is not positive definite on the domain (q = {value} at {point:?})")]
    CostNotPositive { point: Vec<f64>, value: f64 },
    #[error("control penalty R is not symmetric positive definite")]
    PenaltyNotPositiveDefinite,
    #[error("noise covariance is not symmetric positive semidefinite")]
    CovarianceNotPsd,
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("lambda cannot be inferred: {0}")]
    LambdaUnresolvable(String),
    #[error(
        "compatibility violated at entry ({row}, {col}), monomial {monomial}: \
         lambda G R^-1 G^T - B Sigma_eps B^T = {difference:e}"
    )]
    CompatibilityViolation {
        row: usize,
        col: usize,
        monomial: String,
        difference: f64,
    },
    #[error("relaxation degree must be even and at least 2, got {0}")]
    InvalidDegree(u32),
    #[error("degree {degree} cannot represent boundary data of degree {required}")]
    DegreeTooSmall { degree: u32, required: u32 },
    #[error("the origin is not interior to the domain along axis {0}")]
    OriginNotInterior(usize),
    #[error("axis {0} has already been partitioned")]
    AlreadyPartitioned(usize),
    #[error("invalid boundary data: {0}")]
    BoundaryData(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

/// Desirability values prescribed on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryData {
    /// `psi(x)` on all of the boundary.
    Polynomial(Polynomial),
    /// Values on zero-dimensional boundary components.
    Points(Vec<(Vec<f64>, f64)>),
}

impl BoundaryData {
    pub fn degree(&self) -> u32 {
        match self {
            BoundaryData::Polynomial(p) => p.degree(),
            BoundaryData::Points(_) => 0,
        }
    }

    /// Boundary desirability at `x`; for point data, the value of the nearest point.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        match self {
            BoundaryData::Polynomial(p) => p.eval(x),
            BoundaryData::Points(pts) => pts
                .iter()
                .min_by(|a, b| dist2(&a.0, x).total_cmp(&dist2(&b.0, x)))
                .map(|(_, v)| *v)
                .unwrap_or(f64::NAN),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Nonnegative,
    Nonpositive,
}

/// Raw problem data prior to validation.
#[derive(Debug, Clone)]
pub struct HjbData {
    pub f: PolyMatrix,
    pub g: PolyMatrix,
    pub b: PolyMatrix,
    pub q: Polynomial,
    pub r: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    /// Inferred from the compatibility identity when `None`.
    pub lambda: Option<f64>,
    pub domain: SemialgebraicDomain,
    pub psi_boundary: BoundaryData,
    pub anchors: Vec<(Vec<f64>, f64)>,
}

/// A validated problem. Immutable once built.
#[derive(Debug, Clone)]
pub struct HjbProblem {
    f: PolyMatrix,
    g: PolyMatrix,
    b: PolyMatrix,
    q: Polynomial,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    sigma_eps: DMatrix<f64>,
    lambda: f64,
    sigma: PolyMatrix,
    domain: SemialgebraicDomain,
    psi_boundary: BoundaryData,
    anchors: Vec<(Vec<f64>, f64)>,
    cuts: Vec<(usize, Side)>,
}

impl HjbProblem {
    pub fn new(data: HjbData) -> Result<Self, HjbError> {
        let n = data.domain.nvars();
        let check = |m: &PolyMatrix, rows: usize, what: &str| -> Result<(), HjbError> {
            if m.rows() != rows || m.nvars() != n {
                return Err(HjbError::Dimension(format!(
                    "{what} is {}x{} over {} variables, expected {rows} rows over {n}",
                    m.rows(),
                    m.cols(),
                    m.nvars()
                )));
            }
            Ok(())
        };
        check(&data.f, n, "f")?;
        if data.f.cols() != 1 {
            return Err(HjbError::Dimension("f must be a column".into()));
        }
        check(&data.g, n, "G")?;
        check(&data.b, n, "B")?;
        let m = data.g.cols();
        let l = data.b.cols();
        if data.r.shape() != (m, m) {
            return Err(HjbError::Dimension(format!("R must be {m}x{m}")));
        }
        if data.sigma_eps.shape() != (l, l) {
            return Err(HjbError::Dimension(format!("Sigma_eps must be {l}x{l}")));
        }
        if data.q.nvars() != n {
            return Err(HjbError::Dimension(
                "q has the wrong number of variables".into(),
            ));
        }
        domain_validate(&data.domain)?;

        let origin = vec![0.0; n];
        let f0 = data.f.evaluate(&origin)?;
        if f0.iter().any(|v| v.abs() > 1e-12) {
            return Err(HjbError::NotEquilibrium(f0.iter().copied().collect()));
        }

        let q0 = data.q.eval(&origin);
        if q0.abs() > 1e-12 {
            return Err(HjbError::CostNotPositive {
                point: origin,
                value: q0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in data.domain.sample_uniform(1000, &mut rng) {
            if x.iter().all(|v| *v == 0.0) {
                continue;
            }
            let v = data.q.eval(&x);
            if !(v > 0.0) {
                return Err(HjbError::CostNotPositive { point: x, value: v });
            }
        }

        if !is_symmetric(&data.r) {
            return Err(HjbError::PenaltyNotPositiveDefinite);
        }
        let r_chol =
            nalgebra::Cholesky::new(data.r.clone()).ok_or(HjbError::PenaltyNotPositiveDefinite)?;
        let r_inv = r_chol.inverse();
        if !is_symmetric(&data.sigma_eps)
            || nalgebra::SymmetricEigen::new(data.sigma_eps.clone())
                .eigenvalues
                .iter()
                .any(|&v| v < -1e-12)
        {
            return Err(HjbError::CovarianceNotPsd);
        }

        let lambda = match data.lambda {
            Some(l) => l,
            None => infer_lambda(&data.g, &data.b, &r_inv, &data.sigma_eps)?,
        };
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(HjbError::InvalidLambda(lambda));
        }

        let mut problem = HjbProblem {
            f: data.f,
            g: data.g,
            b: data.b,
            q: data.q,
            r: data.r,
            r_inv,
            sigma_eps: data.sigma_eps,
            lambda,
            sigma: PolyMatrix::zeros(n, n, n),
            domain: data.domain,
            psi_boundary: data.psi_boundary,
            anchors: data.anchors,
            cuts: Vec::new(),
        };
        problem.sigma = validate_compatibility(&problem)?;
        problem.check_boundary_points()?;
        Ok(problem)
    }

    fn check_boundary_points(&self) -> Result<(), HjbError> {
        if let BoundaryData::Points(pts) = &self.psi_boundary {
            for (x, v) in pts {
                if x.len() != self.nvars() {
                    return Err(HjbError::BoundaryData(format!(
                        "point {x:?} has the wrong dimension"
                    )));
                }
                if !(*v >= 0.0) {
                    return Err(HjbError::BoundaryData(format!(
                        "desirability {v} at {x:?} is negative"
                    )));
                }
                if !self
                    .domain
                    .boundary_factors
                    .iter()
                    .any(|h| h.eval(x).abs() <= 1e-9)
                {
                    return Err(HjbError::BoundaryData(format!(
                        "point {x:?} is not on any boundary factor"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn nvars(&self) -> usize {
        self.domain.nvars()
    }

    pub fn num_inputs(&self) -> usize {
        self.g.cols()
    }

    pub fn f(&self) -> &PolyMatrix {
        &self.f
    }

    pub fn g(&self) -> &PolyMatrix {
        &self.g
    }

    pub fn b(&self) -> &PolyMatrix {
        &self.b
    }

    pub fn q(&self) -> &Polynomial {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn sigma_eps(&self) -> &DMatrix<f64> {
        &self.sigma_eps
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `B Sigma_eps B^T`.
    pub fn sigma(&self) -> &PolyMatrix {
        &self.sigma
    }

    pub fn domain(&self) -> &SemialgebraicDomain {
        &self.domain
    }

    pub fn psi_boundary(&self) -> &BoundaryData {
        &self.psi_boundary
    }

    pub fn anchors(&self) -> &[(Vec<f64>, f64)] {
        &self.anchors
    }

    pub fn cuts(&self) -> &[(usize, Side)] {
        &self.cuts
    }

    /// Terminal cost `-lambda log psi` at a boundary point.
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        -self.lambda * self.psi_boundary.value_at(x).ln()
    }

    /// Same problem with a different noise covariance, skipping the compatibility check.
    /// Intended for degenerate simulation experiments only.
    pub fn with_noise_override(&self, sigma_eps: DMatrix<f64>) -> Result<Self, HjbError> {
        if sigma_eps.shape() != self.sigma_eps.shape() {
            return Err(HjbError::Dimension(
                "noise override has the wrong shape".into(),
            ));
        }
        let mut out = self.clone();
        out.sigma_eps = sigma_eps;
        Ok(out)
    }
}

fn domain_validate(d: &SemialgebraicDomain) -> Result<(), HjbError> {
    d.validate().map_err(HjbError::from)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).abs().max() <= 1e-12 * (1.0 + m.abs().max())
}

fn infer_lambda(
    g: &PolyMatrix,
    b: &PolyMatrix,
    r_inv: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
) -> Result<f64, HjbError> {
    let constant = |m: &PolyMatrix| m.entries().iter().all(|p| p.degree() == 0);
    if !constant(g) || !constant(b) {
        return Err(HjbError::LambdaUnresolvable(
            "G and B must be constant to infer lambda".into(),
        ));
    }
    let origin = vec![0.0; g.nvars()];
    let gm = g.evaluate(&origin)?;
    let bm = b.evaluate(&origin)?;
    let lhs = &gm * r_inv * gm.transpose();
    let rhs = &bm * sigma_eps * bm.transpose();
    let mut lambda: Option<f64> = None;
    for (a, c) in lhs.iter().zip(rhs.iter()) {
        if a.abs() <= 1e-14 {
            if c.abs() > COMPATIBILITY_TOL {
                return Err(HjbError::LambdaUnresolvable(
                    "noise acts where control cannot".into(),
                ));
            }
            continue;
        }
        let ratio = c / a;
        match lambda {
            None => lambda = Some(ratio),
            Some(l) if (l - ratio).abs() <= 1e-10 * l.abs().max(1.0) => {}
            Some(_) => {
                return Err(HjbError::LambdaUnresolvable(
                    "no single scalar relates G R^-1 G^T and B Sigma_eps B^T".into(),
                ))
            }
        }
    }
    lambda.ok_or_else(|| HjbError::LambdaUnresolvable("G R^-1 G^T vanishes".into()))
}

/// Check `lambda G R^-1 G^T = B Sigma_eps B^T` coefficient-wise and return `Sigma = B Sigma_eps B^T`.
pub fn validate_compatibility(p: &HjbProblem) -> Result<PolyMatrix, HjbError> {
    let n = p.nvars();
    let r_inv = PolyMatrix::from_constant(&p.r_inv, n);
    let lhs = p.g.mul(&r_inv)?.mul(&p.g.transpose())?.scale(p.lambda);
    let s_eps = PolyMatrix::from_constant(&p.sigma_eps, n);
    let sigma = p.b.mul(&s_eps)?.mul(&p.b.transpose())?;
    let diff = lhs.sub(&sigma)?;
    let mut worst: Option<(usize, usize, String, f64)> = None;
    for i in 0..n {
        for j in 0..n {
            for (m, c) in diff.get(i, j).terms() {
                if c.abs() > COMPATIBILITY_TOL && worst.as_ref().is_none_or(|w| c.abs() > w.3.abs())
                {
                    let mono = Polynomial::from_terms(n, [(m.clone(), 1.0)]).to_string();
                    worst = Some((i, j, mono, c));
                }
            }
        }
    }
    match worst {
        Some((row, col, monomial, difference)) => Err(HjbError::CompatibilityViolation {
            row,
            col,
            monomial,
            difference,
        }),
        None => Ok(sigma),
    }
}

/// `f^T grad Psi + 1/2 Tr(hess Psi Sigma)`.
pub fn generator(p: &HjbProblem, psi: &Polynomial) -> Result<Polynomial, HjbError> {
    let n = p.nvars();
    let mut out = Polynomial::zero(n);
    for i in 0..n {
        let di = psi.differentiate(i)?;
        out = out.try_add(&p.f.get(i, 0).try_mul(&di)?)?;
        for j in 0..n {
            let s = p.sigma.get(j, i);
            if s.is_zero() {
                continue;
            }
            out = out.try_add(&di.differentiate(j)?.try_mul(s)?.scale(0.5))?;
        }
    }
    Ok(out)
}

/// [`generator`] applied to a polynomial with decision-variable coefficients.
pub fn generator_param(p: &HjbProblem, psi: &ParamPolynomial) -> Result<ParamPolynomial, HjbError> {
    let n = p.nvars();
    let mut out = ParamPolynomial::zero(n);
    for i in 0..n {
        let di = psi.differentiate(i)?;
        out = out.add(&di.mul_poly(p.f.get(i, 0)));
        for j in 0..n {
            let s = p.sigma.get(j, i);
            if s.is_zero() {
                continue;
            }
            out = out.add(&di.differentiate(j)?.mul_poly(s).scale(0.5));
        }
    }
    Ok(out)
}

/// Constraint family names, in emission order.
pub mod family {
    pub const SUBSOLUTION: &str = "subsolution";
    pub const SUPERSOLUTION: &str = "supersolution";
    pub const GAP: &str = "gap";
    pub const BOUNDARY_NONNEG: &str = "boundary-nonneg";
    pub const BOUNDARY_BELOW: &str = "boundary-below";
    pub const BOUNDARY_ABOVE: &str = "boundary-above";
    pub const MONOTONE_POS: &str = "monotone-pos";
    pub const MONOTONE_NEG: &str = "monotone-neg";
    pub const ANCHOR: &str = "anchor";
}

/// Coordinates `z` with `x = center + half_width * z`, mapping the domain's bounding box onto `[-1, 1]^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxCoordinates {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl BoxCoordinates {
    pub fn of(domain: &SemialgebraicDomain) -> Self {
        let (center, half_width) = domain
            .bounds
            .iter()
            .map(|(lo, hi)| (0.5 * (lo + hi), 0.5 * (hi - lo)))
            .unzip();
        BoxCoordinates { center, half_width }
    }

    pub fn to_box(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.half_width))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    /// Express a polynomial in `x` through `z`.
    pub fn pull_back(&self, p: &Polynomial) -> Result<Polynomial, HjbError> {
        Ok(p.affine_substitute(&self.center, &self.half_width)?)
    }

    /// Express a polynomial in `z` through `x`.
    pub fn push_forward(&self, p: &Polynomial) -> Result<Polynomial, HjbError> {
        let shift: Vec<f64> = self
            .center
            .iter()
            .zip(&self.half_width)
            .map(|(c, s)| -c / s)
            .collect();
        let scale: Vec<f64> = self.half_width.iter().map(|s| 1.0 / s).collect();
        Ok(p.affine_substitute(&shift, &scale)?)
    }

    fn pull_back_matrix(
        &self,
        m: &PolyMatrix,
        weight: impl Fn(usize, usize) -> f64,
    ) -> Result<PolyMatrix, HjbError> {
        let mut out = PolyMatrix::zeros(m.rows(), m.cols(), m.nvars());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(i, j, self.pull_back(m.get(i, j))?.scale(weight(i, j)));
            }
        }
        Ok(out)
    }

    /// The same problem in box coordinates. The result bypasses validation
    /// because its origin is no longer the equilibrium.
    fn transform(&self, p: &HjbProblem) -> Result<HjbProblem, HjbError> {
        let s = &self.half_width;
        let row = |i: usize, _: usize| 1.0 / s[i];
        let pull_all = |ps: &[Polynomial]| -> Result<Vec<Polynomial>, HjbError> {
            ps.iter().map(|h| self.pull_back(h)).collect()
        };
        let psi_boundary = match &p.psi_boundary {
            BoundaryData::Polynomial(psi) => BoundaryData::Polynomial(self.pull_back(psi)?),
            BoundaryData::Points(pts) => {
                BoundaryData::Points(pts.iter().map(|(x, v)| (self.to_box(x), *v)).collect())
            }
        };
        Ok(HjbProblem {
            f: self.pull_back_matrix(&p.f, row)?,
            g: self.pull_back_matrix(&p.g, row)?,
            b: self.pull_back_matrix(&p.b, row)?,
            q: self.pull_back(&p.q)?,
            sigma: self.pull_back_matrix(&p.sigma, |i, j| 1.0 / (s[i] * s[j]))?,
            domain: SemialgebraicDomain {
                generators: pull_all(&p.domain.generators)?,
                boundary_factors: pull_all(&p.domain.boundary_factors)?,
                bounds: vec![(-1.0, 1.0); p.nvars()],
            },
            psi_boundary,
            anchors: p
                .anchors
                .iter()
                .map(|(x, v)| (self.to_box(x), *v))
                .collect(),
            ..p.clone()
        })
    }
}

/// An SOS program together with handles on its unknowns.
///
/// `psi_l` and `psi_u` live in the box coordinates `coords`.
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub program: SosProgram,
    pub psi_l: ParamPolynomial,
    pub psi_u: ParamPolynomial,
    pub epsilon: Var,
    pub degree: u32,
    pub coords: BoxCoordinates,
}

impl Relaxation {
    /// Distinct SOS constraint families (a family may hold one constraint per boundary component).
    pub fn sos_families(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .program
            .constraints()
            .iter()
            .map(|c| family_of(&c.label).to_string())
            .collect();
        let mut out: Vec<String> = set.into_iter().collect();
        out.sort_by_key(|f| family_rank(f));
        out
    }
}

fn family_of(label: &str) -> &str {
    label.split('[').next().unwrap_or(label)
}

fn family_rank(f: &str) -> usize {
    [
        family::SUBSOLUTION,
        family::SUPERSOLUTION,
        family::GAP,
        family::BOUNDARY_NONNEG,
        family::BOUNDARY_BELOW,
        family::BOUNDARY_ABOVE,
        family::MONOTONE_POS,
        family::MONOTONE_NEG,
    ]
    .iter()
    .position(|x| x.starts_with(f) || f.starts_with(x))
    .unwrap_or(usize::MAX)
}

/// Build the degree-`degree` relaxation: minimize `epsilon` subject to the
/// sub/supersolution inequalities, the gap bound, boundary ordering,
/// coordinate-wise monotonicity of `psi_l` and the interior anchors.
pub fn build_relaxation(p: &HjbProblem, degree: u32) -> Result<Relaxation, HjbError> {
    if degree < 2 || !degree.is_multiple_of(2) {
        return Err(HjbError::InvalidDegree(degree));
    }
    let required = p.psi_boundary.degree();
    if degree < required {
        return Err(HjbError::DegreeTooSmall { degree, required });
    }
    let coords = BoxCoordinates::of(&p.domain);
    let original = p;
    let p = &coords.transform(original)?;
    let n = p.nvars();
    let gens = &p.domain.generators;
    let mut prog = SosProgram::new(n).with_basis(Basis::Chebyshev);
    let psi_l = prog.new_free_polynomial(degree, "psi_l");
    let psi_u = prog.new_free_polynomial(degree, "psi_u");
    let eps = prog.new_free("epsilon");
    let q_over = p.q.scale(1.0 / p.lambda);

    let sub = generator_param(p, &psi_l)?.sub(&psi_l.mul_poly(&q_over));
    let d = domain_operator_capped(&mut prog, gens, degree, family::SUBSOLUTION)?;
    prog.add_sos(family::SUBSOLUTION, sub.sub(&d));

    let sup = psi_u.mul_poly(&q_over).sub(&generator_param(p, &psi_u)?);
    let d = domain_operator_capped(&mut prog, gens, degree, family::SUPERSOLUTION)?;
    prog.add_sos(family::SUPERSOLUTION, sup.sub(&d));

    let mut gap = psi_l.sub(&psi_u);
    gap.add_term(crate::poly::Monomial::one(n), &AffineExpr::var(eps), 1.0);
    let d = domain_operator_capped(&mut prog, gens, degree, family::GAP)?;
    prog.add_sos(family::GAP, gap.sub(&d));

    let families = [
        (family::BOUNDARY_NONNEG, psi_l.clone(), None),
        (family::BOUNDARY_BELOW, psi_l.scale(-1.0), Some(1.0)),
        (family::BOUNDARY_ABOVE, psi_u.clone(), Some(-1.0)),
    ];
    match &p.psi_boundary {
        BoundaryData::Polynomial(psi) => {
            for (name, base, psi_sign) in families {
                let target = match psi_sign {
                    Some(s) => base.add_poly(&psi.scale(s)),
                    None => base,
                };
                for (i, h) in p.domain.boundary_factors.iter().enumerate() {
                    let t_deg = degree.saturating_sub(h.degree());
                    let label = format!("{name}[h{i}]");
                    let parts = boundary_operator(
                        &mut prog,
                        &target,
                        std::slice::from_ref(h),
                        t_deg,
                        &label,
                    )?;
                    for part in parts {
                        prog.add_sos(label.clone(), part);
                    }
                }
            }
        }
        BoundaryData::Points(points) => {
            let labels: Vec<Vec<f64>> = match &original.psi_boundary {
                BoundaryData::Points(raw) => raw.iter().map(|(x, _)| x.clone()).collect(),
                BoundaryData::Polynomial(_) => Vec::new(),
            };
            for (name, base, psi_sign) in families {
                for ((x, value), at) in points.iter().zip(&labels) {
                    // An anchor already pins psi_l here; the inequality would only
                    // fix a 1x1 block at zero.
                    let pinned = p.anchors.iter().find(|(a, _)| a == x).map(|(_, v)| *v);
                    let implied = match (name, pinned) {
                        (family::BOUNDARY_NONNEG, Some(v)) => v >= 0.0,
                        (family::BOUNDARY_BELOW, Some(v)) => v <= *value,
                        _ => false,
                    };
                    if implied {
                        continue;
                    }
                    let mut expr = base.at_point(x);
                    if let Some(s) = psi_sign {
                        expr.constant += s * value;
                    }
                    let mut scalar = ParamPolynomial::zero(n);
                    scalar.add_term(crate::poly::Monomial::one(n), &expr, 1.0);
                    prog.add_sos(format!("{name}[{at:?}]"), scalar);
                }
            }
        }
    }

    for axis in 0..n {
        let xi = &Polynomial::constant(n, coords.center[axis])
            + &Polynomial::var(n, axis).scale(coords.half_width[axis]);
        let cut = p.cuts.iter().find(|(a, _)| *a == axis).map(|(_, s)| *s);
        let di = psi_l.differentiate(axis)?;
        for (name, side, sign) in [
            (family::MONOTONE_POS, Side::Nonnegative, -1.0),
            (family::MONOTONE_NEG, Side::Nonpositive, 1.0),
        ] {
            let mut set = gens.clone();
            match cut {
                Some(s) if s == side => {}
                // The opposite half meets this subdomain only on the cut plane.
                Some(_) => continue,
                None => set.push(match side {
                    Side::Nonnegative => xi.clone(),
                    Side::Nonpositive => xi.scale(-1.0),
                }),
            }
            let label = format!("{name}[x{}]", axis + 1);
            let d = domain_operator_capped(&mut prog, &set, degree, &label)?;
            prog.add_sos(label, di.scale(sign).sub(&d));
        }
    }

    for (i, (x, value)) in p.anchors.iter().enumerate() {
        let mut expr = psi_l.at_point(x);
        expr.constant -= value;
        prog.add_equality(format!("{}[{i}]", family::ANCHOR), expr);
    }
    prog.set_objective(AffineExpr::var(eps));

    Ok(Relaxation {
        program: prog,
        psi_l,
        psi_u,
        epsilon: eps,
        degree,
        coords,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: SdpStatus,
    pub iterations: usize,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub residuals: Residuals,
    pub num_constraints: usize,
    pub block_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSolution {
    pub degree: u32,
    pub psi_l: Polynomial,
    pub psi_u: Polynomial,
    pub epsilon: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Outcome of one rung of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct RungResult {
    pub degree: u32,
    pub diagnostics: SolverDiagnostics,
    /// Present only when the SDP solved to optimality.
    pub solution: Option<RelaxationSolution>,
}

impl RungResult {
    pub fn feasible(&self) -> bool {
        self.solution.is_some()
    }
}

/// Build and solve a single rung.
pub fn solve_relaxation(
    p: &HjbProblem,
    degree: u32,
    settings: &SolverSettings,
) -> Result<RungResult, HjbError> {
    let relax = build_relaxation(p, degree)?;
    let compiled = relax.program.compile()?;
    let sol = sdp::solve(&compiled.sdp, settings)?;
    let diagnostics = SolverDiagnostics {
        status: sol.status,
        iterations: sol.iterations,
        primal_obj: sol.primal_obj,
        dual_obj: sol.dual_obj,
        residuals: sol.residuals,
        num_constraints: compiled.sdp.num_constraints(),
        block_dims: compiled.sdp.block_dims.clone(),
    };
    let solution = if sol.status == SdpStatus::Optimal {
        let a = compiled.assignment(&sol);
        Some(RelaxationSolution {
            degree,
            psi_l: relax.coords.push_forward(&relax.psi_l.resolve(&a))?,
            psi_u: relax.coords.push_forward(&relax.psi_u.resolve(&a))?,
            epsilon: a.value(relax.epsilon),
            diagnostics: diagnostics.clone(),
        })
    } else {
        None
    };
    Ok(RungResult {
        degree,
        diagnostics,
        solution,
    })
}

/// Solve every even degree in `d_min..=d_max`. Infeasible rungs are reported, not raised.
pub fn solve_hierarchy(
    p: &HjbProblem,
    d_min: u32,
    d_max: u32,
    settings: &SolverSettings,
) -> Result<Vec<RungResult>, HjbError> {
    if d_min > d_max {
        return Err(HjbError::InvalidDegree(d_min));
    }
    let start = d_min.max(2) + d_min.max(2) % 2;
    (start..=d_max)
        .step_by(2)
        .map(|d| solve_relaxation(p, d, settings))
        .collect()
}

/// Split the problem at the hyperplane `x_axis = 0`.
///
/// Each half keeps the boundary factors that still touch it. Point boundary
/// data gains the origin with value 1 and the cut factor `x_axis`.
pub fn partition_domain(p: &HjbProblem, axis: usize) -> Result<[HjbProblem; 2], HjbError> {
    let n = p.nvars();
    if axis >= n {
        return Err(HjbError::Dimension(format!(
            "axis {axis} out of range for {n} variables"
        )));
    }
    if p.cuts.iter().any(|(a, _)| *a == axis) {
        return Err(HjbError::AlreadyPartitioned(axis));
    }
    let origin = vec![0.0; n];
    let (lo, hi) = p.domain.bounds[axis];
    if p.domain.generators.iter().any(|g| g.eval(&origin) <= 0.0) || !(lo < 0.0 && hi > 0.0) {
        return Err(HjbError::OriginNotInterior(axis));
    }
    let xi = Polynomial::var(n, axis);
    let make = |side: Side| -> Result<HjbProblem, HjbError> {
        let (sign, bounds_axis) = match side {
            Side::Nonnegative => (1.0, (0.0, hi)),
            Side::Nonpositive => (-1.0, (lo, 0.0)),
        };
        let mut generators = p.domain.generators.clone();
        generators.push(xi.scale(sign));
        let mut bounds = p.domain.bounds.clone();
        bounds[axis] = bounds_axis;
        let probe = SemialgebraicDomain {
            generators: generators.clone(),
            boundary_factors: Vec::new(),
            bounds: bounds.clone(),
        };
        let samples = probe.grid(if n == 1 { 401 } else { 41 });
        let mut boundary_factors: Vec<Polynomial> = p
            .domain
            .boundary_factors
            .iter()
            .filter(|h| touches(h, &samples))
            .cloned()
            .collect();
        let psi_boundary = match &p.psi_boundary {
            BoundaryData::Polynomial(psi) => BoundaryData::Polynomial(psi.clone()),
            BoundaryData::Points(pts) => {
                let mut kept: Vec<(Vec<f64>, f64)> = pts
                    .iter()
                    .filter(|(x, _)| sign * x[axis] >= 0.0)
                    .cloned()
                    .collect();
                if !kept.iter().any(|(x, _)| x.iter().all(|v| *v == 0.0)) {
                    kept.push((origin.clone(), 1.0));
                }
                boundary_factors.push(xi.clone());
                BoundaryData::Points(kept)
            }
        };
        let mut cuts = p.cuts.clone();
        cuts.push((axis, side));
        let mut anchors = p.anchors.clone();
        if !anchors.iter().any(|(x, _)| x.iter().all(|v| *v == 0.0)) {
            anchors.push((origin.clone(), 1.0));
        }
        let mut out = p.clone();
        out.domain = SemialgebraicDomain {
            generators,
            boundary_factors,
            bounds,
        };
        out.psi_boundary = psi_boundary;
        out.anchors = anchors;
        out.cuts = cuts;
        out.check_boundary_points()?;
        Ok(out)
    };
    Ok([make(Side::Nonpositive)?, make(Side::Nonnegative)?])
}

/// Whether the zero set of `h` comes close to the sampled region.
fn touches(h: &Polynomial, samples: &[Vec<f64>]) -> bool {
    let values: Vec<f64> = samples.iter().map(|x| h.eval(x).abs()).collect();
    let max = values.iter().fold(0.0f64, |a, &v| a.max(v));
    let min = values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    max > 0.0 && min <= 0.05 * max
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn p1(s: &str) -> Polynomial {
        Polynomial::parse(s, &["x"]).unwrap()
    }

    fn col(ps: &[Polynomial]) -> PolyMatrix {
        PolyMatrix::new(ps.len(), 1, ps.to_vec()).unwrap()
    }

    pub(crate) fn scalar_problem(drift: &str, lambda: Option<f64>) -> Result<HjbProblem, HjbError> {
        let boundary = 20.0 * (-10.0f64).exp();
        HjbProblem::new(HjbData {
            f: col(&[p1(drift)]),
            g: col(&[p1("1")]),
            b: col(&[p1("1")]),
            q: p1("x^2"),
            r: DMatrix::from_element(1, 1, 1.0),
            sigma_eps: DMatrix::from_element(1, 1, 1.0),
            lambda,
            domain: SemialgebraicDomain::new(
                vec![p1("1 - x^2")],
                vec![p1("x + 1"), p1("x - 1")],
                vec![(-1.0, 1.0)],
            )
            .unwrap(),
            psi_boundary: BoundaryData::Points(vec![(vec![-1.0], boundary), (vec![1.0], boundary)]),
            anchors: vec![(vec![0.0], 1.0)],
        })
    }

    #[test]
    fn compatibility_cases() {
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        assert_eq!(p.sigma().get(0, 0), &p1("1"));
        assert!(matches!(
            scalar_problem("-x", Some(2.0)),
            Err(HjbError::CompatibilityViolation { .. })
        ));
        assert_eq!(scalar_problem("-x", None).unwrap().lambda(), 1.0);

        let names = ["x", "y"];
        let pp = |s: &str| Polynomial::parse(s, &names).unwrap();
        let g = PolyMatrix::new(2, 2, vec![pp("1"), pp("x"), pp("0"), pp("1")]).unwrap();
        let data = HjbData {
            f: col(&[pp("-x"), pp("-y")]),
            g: g.clone(),
            b: g,
            q: pp("x^2 + y^2"),
            r: DMatrix::identity(2, 2),
            sigma_eps: DMatrix::identity(2, 2),
            lambda: Some(1.0),
            domain: SemialgebraicDomain::new(
                vec![pp("1 - x^2"), pp("1 - y^2")],
                vec![pp("1 - x^2"), pp("1 - y^2")],
                vec![(-1.0, 1.0), (-1.0, 1.0)],
            )
            .unwrap(),
            psi_boundary: BoundaryData::Polynomial(pp("0.5")),
            anchors: vec![(vec![0.0, 0.0], 1.0)],
        };
        assert!(HjbProblem::new(data.clone()).is_ok());
        let mut bad = data;
        bad.sigma_eps = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            HjbProblem::new(bad),
            Err(HjbError::CompatibilityViolation { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_data() {
        assert!(matches!(
            scalar_problem("1 - x", Some(1.0)),
            Err(HjbError::NotEquilibrium(_))
        ));
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        let mut data = HjbData {
            f: p.f().clone(),
            g: p.g().clone(),
            b: p.b().clone(),
            q: p1("x^2 - 0.5*x^4 - 0.6*x^2*x^2"),
            r: p.r().clone(),
            sigma_eps: p.sigma_eps().clone(),
            lambda: Some(1.0),
            domain: p.domain().clone(),
            psi_boundary: p.psi_boundary().clone(),
            anchors: p.anchors().to_vec(),
        };
        assert!(matches!(
            HjbProblem::new(data.clone()),
            Err(HjbError::CostNotPositive { .. })
        ));
        data.q = p1("x^2");
        data.r = DMatrix::from_element(1, 1, -1.0);
        assert_eq!(
            HjbProblem::new(data).unwrap_err(),
            HjbError::PenaltyNotPositiveDefinite
        );
    }

    #[test]
    fn generator_examples() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        assert!(generator(&p, &p1("3")).unwrap().is_zero());
        let l = generator(&p, &p1("x^2")).unwrap();
        let expected = p1("-2*x^4 + 10*x^3 + 6*x^2 + 1");
        assert!((&l - &expected).max_abs_coeff() < 1e-14);
        for k in 0..=20 {
            let x = -1.0 + 0.1 * k as f64;
            let hand = (-x * x * x + 5.0 * x * x + 3.0 * x) * 2.0 * x + 1.0;
            assert!((l.eval(&[x]) - hand).abs() < 1e-12);
        }
        let lin = scalar_problem("-x", Some(1.0)).unwrap();
        let l4 = generator(&lin, &p1("x^4")).unwrap();
        assert!((&l4 - &p1("-4*x^4 + 6*x^2")).max_abs_coeff() < 1e-14);
    }

    #[test]
    fn param_generator_agrees_with_fixed() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        let mut prog = SosProgram::new(1);
        let psi = prog.new_free_polynomial(6, "psi");
        let lp = generator_param(&p, &psi).unwrap();
        let coeffs = [0.3, -1.0, 2.0, 0.5, -0.25, 1.5, 0.75];
        let a = crate::sos::Assignment {
            free: coeffs.to_vec(),
            gram: vec![],
        };
        let fixed = psi.resolve(&a);
        let direct = generator(&p, &fixed).unwrap();
        assert!((&lp.resolve(&a) - &direct).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn partition_of_the_interval() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        let [left, right] = partition_domain(&p, 0).unwrap();
        assert_eq!(left.domain().boundary_factors, vec![p1("x + 1"), p1("x")]);
        assert_eq!(right.domain().boundary_factors, vec![p1("x - 1"), p1("x")]);
        assert_eq!(left.domain().bounds, vec![(-1.0, 0.0)]);
        assert!(matches!(
            partition_domain(&right, 0),
            Err(HjbError::AlreadyPartitioned(0))
        ));
        let BoundaryData::Points(pts) = right.psi_boundary() else {
            panic!("point data expected");
        };
        assert_eq!(pts.len(), 2);
        assert!(pts.contains(&(vec![0.0], 1.0)));
    }

    #[test]
    fn relaxation_structure() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", Some(1.0)).unwrap();
        let [_, right] = partition_domain(&p, 0).unwrap();
        let relax = build_relaxation(&right, 12).unwrap();
        assert_eq!(
            relax.sos_families(),
            vec![
                family::SUBSOLUTION,
                family::SUPERSOLUTION,
                family::GAP,
                family::BOUNDARY_NONNEG,
                family::BOUNDARY_BELOW,
                family::BOUNDARY_ABOVE,
                family::MONOTONE_POS,
            ]
        );
        assert_eq!(relax.program.equalities().len(), 1);
        assert_eq!(relax.psi_l.degree(), 12);

        let whole = build_relaxation(&p, 12).unwrap();
        assert_eq!(whole.sos_families().len(), 8);
        assert!(matches!(
            build_relaxation(&p, 7),
            Err(HjbError::InvalidDegree(7))
        ));
    }

    #[test]
    fn degree_must_cover_boundary_data() {
        let p = scalar_problem("-x", Some(1.0)).unwrap();
        let mut q = p.clone();
        q.psi_boundary = BoundaryData::Polynomial(p1("1 - 0.5*x^2 + 0.1*x^4"));
        assert_eq!(
            build_relaxation(&q, 2).unwrap_err(),
            HjbError::DegreeTooSmall {
                degree: 2,
                required: 4
            }
        );
        assert!(build_relaxation(&q, 4).is_ok());
    }
}
