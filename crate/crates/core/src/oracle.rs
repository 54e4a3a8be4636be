//! Finite-difference reference solutions of the 1D desirability equation
//! `0 = -(q/lambda) psi + f psi' + (1/2) Sigma psi''` with Dirichlet data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hjb::HjbProblem;
use crate::poly::{PolyError, Polynomial};

/// Central differences are used while the cell Péclet number `|f| h / (Sigma/2)`
/// stays at or below this value; above it the drift term is upwinded.
pub const PECLET_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("the oracle handles one state variable, the problem has {0}")]
    NotOneDimensional(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("tridiagonal system is singular at row {0}")]
    Singular(usize),
    #[error("grid value {value:e} at x = {x} is not positive")]
    NonpositiveValue { x: f64, value: f64 },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Node values on a uniform grid of `[a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl Grid1D {
    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.b
        } else {
            self.a + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (self.node(i), *v))
    }

    /// Piecewise-linear interpolation; `None` outside `[a, b]`.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        if !(self.a..=self.b).contains(&x) {
            return None;
        }
        let s = (x - self.a) / self.spacing();
        let i = (s.floor() as usize).min(self.n - 2);
        let w = s - i as f64;
        Some((1.0 - w) * self.values[i] + w * self.values[i + 1])
    }

    /// CSV with header `x,psi,v` where `v = -lambda ln psi`.
    pub fn to_csv(&self, lambda: f64) -> String {
        let mut out = String::from("x,psi,v\n");
        for (x, psi) in self.nodes() {
            out.push_str(&format!("{x},{psi},{}\n", 0.0 - lambda * psi.ln()));
        }
        out
    }
}

/// Solve `0 = -(q/lambda) psi + f psi' + (1/2) sigma psi''` on `[a, b]` with
/// `psi(a) = psi_a`, `psi(b) = psi_b` on `n` uniform nodes.
#[allow(clippy::too_many_arguments)]
pub fn solve_linear_bvp(
    f: &Polynomial,
    sigma: &Polynomial,
    q: &Polynomial,
    lambda: f64,
    (a, b): (f64, f64),
    (psi_a, psi_b): (f64, f64),
    n: usize,
) -> Result<Grid1D, OracleError> {
    if n < 3 {
        return Err(OracleError::InvalidGrid(format!(
            "need at least 3 nodes, got {n}"
        )));
    }
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(OracleError::InvalidGrid(format!(
            "interval [{a}, {b}] is empty"
        )));
    }
    if !(lambda > 0.0) {
        return Err(OracleError::InvalidGrid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    for p in [f, sigma, q] {
        if p.nvars() != 1 {
            return Err(OracleError::NotOneDimensional(p.nvars()));
        }
    }
    let grid = Grid1D {
        a,
        b,
        n,
        values: Vec::new(),
    };
    let h = grid.spacing();
    let m = n - 2;
    let (mut lower, mut diag, mut upper, mut rhs) =
        (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for k in 0..m {
        let x = grid.node(k + 1);
        let fx = f.eval(&[x]);
        let sx = sigma.eval(&[x]);
        let diffusion = 0.5 * sx / (h * h);
        let (l, u, d) = if fx.abs() * h <= PECLET_LIMIT * 0.5 * sx {
            (
                diffusion - fx / (2.0 * h),
                diffusion + fx / (2.0 * h),
                -2.0 * diffusion,
            )
        } else if fx > 0.0 {
            (diffusion, diffusion + fx / h, -2.0 * diffusion - fx / h)
        } else {
            (diffusion - fx / h, diffusion, -2.0 * diffusion + fx / h)
        };
        lower[k] = l;
        upper[k] = u;
        diag[k] = d - q.eval(&[x]) / lambda;
    }
    rhs[0] -= lower[0] * psi_a;
    rhs[m - 1] -= upper[m - 1] * psi_b;
    let interior = thomas(&lower, &diag, &upper, &rhs)?;
    let mut values = Vec::with_capacity(n);
    values.push(psi_a);
    values.extend(interior);
    values.push(psi_b);
    Ok(Grid1D { values, ..grid })
}

/// [`solve_linear_bvp`] with the drift, noise and cost of a scalar problem.
pub fn solve_bvp(
    p: &HjbProblem,
    interval: (f64, f64),
    boundary: (f64, f64),
    n: usize,
) -> Result<Grid1D, OracleError> {
    if p.nvars() != 1 {
        return Err(OracleError::NotOneDimensional(p.nvars()));
    }
    solve_linear_bvp(
        p.f().get(0, 0),
        p.sigma().get(0, 0),
        p.q(),
        p.lambda(),
        interval,
        boundary,
        n,
    )
}

/// Solve on the problem's own interval with boundary desirability taken from its boundary data.
pub fn solve_problem(p: &HjbProblem, n: usize) -> Result<Grid1D, OracleError> {
    if p.nvars() != 1 {
        return Err(OracleError::NotOneDimensional(p.nvars()));
    }
    let (a, b) = p.domain().bounds[0];
    let boundary = (
        p.psi_boundary().value_at(&[a]),
        p.psi_boundary().value_at(&[b]),
    );
    solve_bvp(p, (a, b), boundary, n)
}

/// Max difference between the `n`-node solution and the `2n-1`-node solution at shared nodes.
pub fn refinement_gap(
    p: &HjbProblem,
    interval: (f64, f64),
    boundary: (f64, f64),
    n: usize,
) -> Result<f64, OracleError> {
    let coarse = solve_bvp(p, interval, boundary, n)?;
    let fine = solve_bvp(p, interval, boundary, 2 * n - 1)?;
    Ok(coarse
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - fine.values[2 * i]).abs())
        .fold(0.0, f64::max))
}

/// `max_i -lambda ln psi_i`.
pub fn sup_norm_estimate(grid: &Grid1D, lambda: f64) -> Result<f64, OracleError> {
    let mut best = f64::NEG_INFINITY;
    for (x, v) in grid.nodes() {
        if !(v > 0.0) {
            return Err(OracleError::NonpositiveValue { x, value: v });
        }
        best = best.max(-lambda * v.ln());
    }
    Ok(best)
}

fn thomas(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let m = diag.len();
    let scale = diag
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = diag[0];
    for i in 0..m {
        if i > 0 {
            denom = diag[i] - lower[i] * c[i - 1];
        }
        if !denom.is_finite() || denom.abs() <= 1e-14 * scale {
            return Err(OracleError::Singular(i));
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - if i > 0 { lower[i] * d[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..m.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}
