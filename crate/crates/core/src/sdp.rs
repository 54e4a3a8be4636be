//! Dense primal-dual interior-point solver for small block-diagonal SDPs.
//!
//! Primal form:
//!
//! ```text
//! minimize    <C, X> + c_f^T w
//! subject to  <A_k, X> + F_k^T w = b_k      k = 1..m
//!             X = diag(X_1, ..., X_p) >= 0,  w free
//! ```
//!
//! Dual: maximize `b^T y` subject to `S = C - sum_k y_k A_k >= 0` and `F^T y = c_f`.
//!
//! Free variables are eliminated before the interior-point loop: with
//! `F = U_1 Sigma V_1^T`, the constraints are projected onto the complement of
//! `range(F)` and `w` is recovered from the final `X`. The loop itself uses
//! Nesterov-Todd scaling with a Mehrotra predictor-corrector.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// One stored entry of a symmetric block matrix. An off-diagonal entry stands
/// for both `(row, col)` and `(col, row)`, so `<A, X> = sum v * X_rc * (2 if r != c else 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl SymEntry {
    pub fn new(block: usize, row: usize, col: usize, value: f64) -> Self {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        Self {
            block,
            row,
            col,
            value,
        }
    }

    fn weight(&self) -> f64 {
        if self.row == self.col {
            self.value
        } else {
            2.0 * self.value
        }
    }
}

/// Row `k` of the equality system: the sparse matrix `A_k` plus free-variable coefficients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub entries: Vec<SymEntry>,
    pub free: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    pub constraints: Vec<LinearConstraint>,
    pub rhs: Vec<f64>,
    /// Sparse symmetric objective matrix `C`.
    pub objective: Vec<SymEntry>,
    /// Objective coefficients of the free variables.
    pub free_objective: Vec<f64>,
    pub free_vars: usize,
}

/// Block-diagonal symmetric matrix, one dense block per PSD cone.
pub type BlockMatrix = Vec<DMatrix<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_k |<A_k, X> + F_k w - b_k|`
    pub primal: f64,
    /// `max |C - sum y_k A_k - S|` together with `max |c_f - F^T y|`
    pub dual: f64,
    /// `|<C, X> + c_f^T w - b^T y|`
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub primal_obj: f64,
    pub dual_obj: f64,
    /// Complementarity `<X, S>`.
    pub complementarity: f64,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: BlockMatrix,
    pub s: BlockMatrix,
    pub y: Vec<f64>,
    /// Values of the free variables.
    pub w: Vec<f64>,
    pub status: SdpStatus,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub trace: Vec<IterationLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Relative target for infeasibilities and gap.
    pub tol: f64,
    /// When the target is out of reach, the best iterate is still reported
    /// `Optimal` if its absolute residuals, relative gap and eigenvalues meet this.
    pub acceptable_tol: f64,
    /// Stop after this many iterations without a tenfold improvement of the best iterate.
    pub stall_iters: usize,
    pub verbosity: u8,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 120,
            tol: 1e-9,
            acceptable_tol: 1e-7,
            stall_iters: 12,
            verbosity: 0,
        }
    }
}

/// Newton systems whose condition estimate exceeds this are ill-conditioned.
pub const MAX_CONDITION: f64 = 1e14;

/// Iterations allowed after the first ill-conditioned Newton system before giving up.
pub const ILL_CONDITIONED_BUDGET: usize = 10;

impl SdpProblem {
    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.block_dims.contains(&0) {
            return Err(SdpError::Malformed("zero-sized block".into()));
        }
        if self.constraints.len() != self.rhs.len() {
            return Err(SdpError::Malformed(format!(
                "{} constraint matrices but {} right-hand sides",
                self.constraints.len(),
                self.rhs.len()
            )));
        }
        if self.free_objective.len() != self.free_vars {
            return Err(SdpError::Malformed(
                "free objective length differs from free variable count".into(),
            ));
        }
        let check = |e: &SymEntry| -> Result<(), SdpError> {
            let dim = *self.block_dims.get(e.block).ok_or_else(|| {
                SdpError::Malformed(format!("block index {} out of range", e.block))
            })?;
            if e.row > e.col || e.col >= dim || !e.value.is_finite() {
                return Err(SdpError::Malformed(format!(
                    "bad entry ({}, {}) in block {} of size {dim}",
                    e.row, e.col, e.block
                )));
            }
            Ok(())
        };
        for c in &self.constraints {
            c.entries.iter().try_for_each(check)?;
            if c.free
                .iter()
                .any(|&(i, v)| i >= self.free_vars || !v.is_finite())
            {
                return Err(SdpError::Malformed("bad free-variable coefficient".into()));
            }
        }
        self.objective.iter().try_for_each(check)?;
        if self.rhs.iter().any(|b| !b.is_finite()) {
            return Err(SdpError::Malformed("non-finite right-hand side".into()));
        }
        Ok(())
    }

    fn zero_blocks(&self) -> BlockMatrix {
        self.block_dims
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect()
    }

    fn dense(&self, entries: &[SymEntry], scale: f64, out: &mut BlockMatrix) {
        for e in entries {
            out[e.block][(e.row, e.col)] += scale * e.value;
            if e.row != e.col {
                out[e.block][(e.col, e.row)] += scale * e.value;
            }
        }
    }

    /// Dense copy of the objective matrix `C`.
    pub fn objective_matrix(&self) -> BlockMatrix {
        let mut c = self.zero_blocks();
        self.dense(&self.objective, 1.0, &mut c);
        c
    }

    /// `(<A_k, X> + F_k w)_k`
    pub fn apply(&self, x: &BlockMatrix, w: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                let sx: f64 = c
                    .entries
                    .iter()
                    .map(|e| e.weight() * x[e.block][(e.row, e.col)])
                    .sum();
                let sw: f64 = c.free.iter().map(|&(i, v)| v * w[i]).sum();
                sx + sw
            })
            .collect()
    }

    /// `sum_k y_k A_k`
    pub fn adjoint(&self, y: &[f64]) -> BlockMatrix {
        let mut out = self.zero_blocks();
        for (c, &yk) in self.constraints.iter().zip(y) {
            if yk != 0.0 {
                self.dense(&c.entries, yk, &mut out);
            }
        }
        out
    }

    /// `F^T y`
    pub fn free_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.free_vars];
        for (c, &yk) in self.constraints.iter().zip(y) {
            for &(i, v) in &c.free {
                out[i] += v * yk;
            }
        }
        out
    }

    pub fn primal_objective(&self, x: &BlockMatrix, w: &[f64]) -> f64 {
        let sx: f64 = self
            .objective
            .iter()
            .map(|e| e.weight() * x[e.block][(e.row, e.col)])
            .sum();
        sx + dot(&self.free_objective, w)
    }

    /// Sparse SDPA text. The problem maps onto SDPA's dual side (`F_0 = -C`,
    /// `F_k = A_k`, `c_k = b_k`); each free variable becomes a pair of entries
    /// in a trailing diagonal (LP) block. Numbers carry 17 significant digits.
    pub fn to_sdpa(&self) -> String {
        let mut s = String::new();
        let has_free = self.free_vars > 0;
        let nblocks = self.block_dims.len() + usize::from(has_free);
        let _ = writeln!(s, "{}", self.constraints.len());
        let _ = writeln!(s, "{nblocks}");
        let mut dims: Vec<String> = self.block_dims.iter().map(|d| d.to_string()).collect();
        if has_free {
            dims.push(format!("-{}", 2 * self.free_vars));
        }
        let _ = writeln!(s, "{}", dims.join(" "));
        let rhs: Vec<String> = self.rhs.iter().map(|b| fmt17(*b)).collect();
        let _ = writeln!(s, "{}", rhs.join(" "));
        let lp_block = self.block_dims.len() + 1;
        let mut emit = |mat: usize, entries: &[SymEntry], free: &[(usize, f64)], sign: f64| {
            for e in entries {
                let _ = writeln!(
                    s,
                    "{mat} {} {} {} {}",
                    e.block + 1,
                    e.row + 1,
                    e.col + 1,
                    fmt17(sign * e.value)
                );
            }
            for &(i, v) in free {
                let _ = writeln!(
                    s,
                    "{mat} {lp_block} {0} {0} {1}",
                    2 * i + 1,
                    fmt17(sign * v)
                );
                let _ = writeln!(
                    s,
                    "{mat} {lp_block} {0} {0} {1}",
                    2 * i + 2,
                    fmt17(-sign * v)
                );
            }
        };
        let free_obj: Vec<(usize, f64)> = self
            .free_objective
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect();
        emit(0, &self.objective, &free_obj, -1.0);
        for (k, c) in self.constraints.iter().enumerate() {
            emit(k + 1, &c.entries, &c.free, 1.0);
        }
        s
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn block_inner(a: &BlockMatrix, b: &BlockMatrix) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn block_max_abs(a: &BlockMatrix) -> f64 {
    a.iter().fold(0.0, |m, b| m.max(b.amax()))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of each block.
pub fn block_min_eigenvalues(x: &BlockMatrix) -> Vec<f64> {
    x.iter()
        .map(|b| {
            SymmetricEigen::new(b.clone())
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min(v))
        })
        .collect()
}

/// Residuals of a candidate primal-dual point, measured in absolute terms.
pub fn residuals(problem: &SdpProblem, sol: &SdpSolution) -> Residuals {
    let ax = problem.apply(&sol.x, &sol.w);
    let primal = ax
        .iter()
        .zip(&problem.rhs)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let mut rd = problem.objective_matrix();
    let aty = problem.adjoint(&sol.y);
    for ((r, a), s) in rd.iter_mut().zip(&aty).zip(&sol.s) {
        *r -= a;
        *r -= s;
    }
    let fy = problem.free_adjoint(&sol.y);
    let free_res = fy
        .iter()
        .zip(&problem.free_objective)
        .fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
    let dual = block_max_abs(&rd).max(free_res);
    let gap = (problem.primal_objective(&sol.x, &sol.w) - dot(&problem.rhs, &sol.y)).abs();
    Residuals { primal, dual, gap }
}

/// Per-block Nesterov-Todd scaling data: `W = G G^T`, `G^T S G = G^-1 X G^-T = diag(lambda)`.
struct NtScaling {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.l())
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<NtScaling> {
    let lx = cholesky_lower(x)?;
    let ls = cholesky_lower(s)?;
    let prod = ls.transpose() * &lx;
    let svd = prod.svd(true, true);
    let v = svd.v_t?.transpose();
    let sigma = svd.singular_values;
    if sigma.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let n = x.nrows();
    let inv_sqrt = DMatrix::from_diagonal(&sigma.map(|v| 1.0 / v.sqrt()));
    let sqrt = DMatrix::from_diagonal(&sigma.map(f64::sqrt));
    let g = &lx * &v * inv_sqrt;
    let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(n, n))?;
    let g_inv = sqrt * v.transpose() * lx_inv;
    let mut w = &g * g.transpose();
    symmetrize(&mut w);
    Some(NtScaling {
        g,
        g_inv,
        w,
        lambda: sigma,
    })
}

/// Largest `alpha` with `X + alpha dX >= 0` (may be infinite).
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(l) = cholesky_lower(x) else {
        return 0.0;
    };
    let Some(linv_dx) = l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(t) = l.solve_lower_triangular(&linv_dx.transpose()) else {
        return 0.0;
    };
    let mut t = t.transpose();
    symmetrize(&mut t);
    let min_eig = SymmetricEigen::new(t)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    if min_eig >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min_eig
    }
}

fn step_length(x: &BlockMatrix, dx: &BlockMatrix, gamma: f64) -> f64 {
    let amax = x
        .iter()
        .zip(dx)
        .map(|(xb, db)| max_step(xb, db))
        .fold(f64::INFINITY, f64::min);
    (gamma * amax).min(1.0)
}

/// Elimination of the free variables: `F = U_1 diag(sigma) V_1^T`, with `Q_2`
/// an orthonormal basis of the complement of `range(F)`.
struct Reduction {
    u1: DMatrix<f64>,
    sigma: DVector<f64>,
    v1: DMatrix<f64>,
    q2: DMatrix<f64>,
    /// Least-norm solution of `F^T y = c_f`.
    y0: DVector<f64>,
    /// `F^T y0 = c_f` holds (otherwise the objective is unbounded along ker F).
    consistent: bool,
}

impl Reduction {
    fn new(problem: &SdpProblem) -> Reduction {
        let m = problem.num_constraints();
        let nf = problem.free_vars;
        let mut f = DMatrix::zeros(m, nf);
        for (k, c) in problem.constraints.iter().enumerate() {
            for &(i, v) in &c.free {
                f[(k, i)] += v;
            }
        }
        let cf = DVector::from_column_slice(&problem.free_objective);
        if m == 0 || nf == 0 {
            return Reduction {
                u1: DMatrix::zeros(m, 0),
                sigma: DVector::zeros(0),
                v1: DMatrix::zeros(nf, 0),
                q2: DMatrix::identity(m, m),
                y0: DVector::zeros(m),
                consistent: cf.amax() == 0.0,
            };
        }
        let svd = f.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested V^T");
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-12 * smax.max(1e-300))
            .collect();
        let r = keep.len();
        let u1 = DMatrix::from_fn(m, r, |i, j| u[(i, keep[j])]);
        let v1 = DMatrix::from_fn(nf, r, |i, j| vt[(keep[j], i)]);
        let sigma = DVector::from_fn(r, |i, _| svd.singular_values[keep[i]]);
        // Full orthogonal completion of U_1 from a Householder QR.
        let mut qt = DMatrix::identity(m, m);
        if r > 0 {
            u1.clone().qr().q_tr_mul(&mut qt);
        }
        let q2 = qt.rows(r, m - r).transpose();
        let y0 = &u1 * DVector::from_fn(r, |i, _| (v1.column(i).dot(&cf)) / sigma[i]);
        let consistent = (f.transpose() * &y0 - &cf).amax() <= 1e-9 * (1.0 + cf.amax());
        Reduction {
            u1,
            sigma,
            v1,
            q2,
            y0,
            consistent,
        }
    }

    /// `w = F^+ (b - A x)`.
    fn recover_w(&self, residual: &DVector<f64>) -> Vec<f64> {
        let t = self.u1.transpose() * residual;
        let scaled = DVector::from_fn(t.len(), |i, _| t[i] / self.sigma[i]);
        (&self.v1 * scaled).iter().copied().collect()
    }
}

/// Pure PSD-cone problem the interior-point loop runs on: dense per-block
/// constraint matrices, each row scaled to unit Frobenius norm.
struct Core {
    dims: Vec<usize>,
    by_block: Vec<Vec<(usize, DMatrix<f64>)>>,
    b: Vec<f64>,
    c: BlockMatrix,
    /// Multiply a core dual vector by this to get multipliers of the reduced rows.
    row_scale: Vec<f64>,
    /// Reduced row index of each core row.
    rows: Vec<usize>,
}

enum CoreBuild {
    Ready(Core),
    /// A zero row with nonzero right-hand side.
    Infeasible,
}

impl Core {
    fn build(problem: &SdpProblem, red: &Reduction) -> CoreBuild {
        let m = problem.num_constraints();
        let mr = red.q2.ncols();
        let dims = problem.block_dims.clone();
        let mut a_full: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; dims.len()]; mr];
        let identity = red.q2.nrows() == mr && mr == m && red.u1.ncols() == 0;
        for (j, con) in problem.constraints.iter().enumerate() {
            for e in &con.entries {
                let dim = dims[e.block];
                let targets: Vec<(usize, f64)> = if identity {
                    vec![(j, 1.0)]
                } else {
                    (0..mr)
                        .map(|k| (k, red.q2[(j, k)]))
                        .filter(|(_, v)| *v != 0.0)
                        .collect()
                };
                for (k, coef) in targets {
                    let blk = a_full[k][e.block].get_or_insert_with(|| DMatrix::zeros(dim, dim));
                    blk[(e.row, e.col)] += coef * e.value;
                    if e.row != e.col {
                        blk[(e.col, e.row)] += coef * e.value;
                    }
                }
            }
        }
        let b_full = red.q2.transpose() * DVector::from_column_slice(&problem.rhs);
        let mut c = problem.objective_matrix();
        for (con, &yk) in problem.constraints.iter().zip(red.y0.iter()) {
            if yk != 0.0 {
                problem.dense(&con.entries, -yk, &mut c);
            }
        }
        let b_scale = b_full.amax().max(1.0);
        let mut by_block: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); dims.len()];
        let mut b = Vec::new();
        let mut row_scale = Vec::new();
        let mut rows = Vec::new();
        for (k, blocks) in a_full.into_iter().enumerate() {
            let norm = blocks
                .iter()
                .flatten()
                .map(|blk| blk.norm_squared())
                .sum::<f64>()
                .sqrt();
            if norm <= 1e-13 {
                if b_full[k].abs() > 1e-10 * b_scale {
                    return CoreBuild::Infeasible;
                }
                continue;
            }
            let idx = b.len();
            for (blk_idx, blk) in blocks.into_iter().enumerate() {
                if let Some(blk) = blk {
                    by_block[blk_idx].push((idx, blk / norm));
                }
            }
            b.push(b_full[k] / norm);
            row_scale.push(1.0 / norm);
            rows.push(k);
        }
        CoreBuild::Ready(Core {
            dims,
            by_block,
            b,
            c,
            row_scale,
            rows,
        })
    }

    fn m(&self) -> usize {
        self.b.len()
    }

    fn apply(&self, x: &BlockMatrix) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        for (blk, list) in self.by_block.iter().enumerate() {
            for (k, a) in list {
                out[*k] += a.dot(&x[blk]);
            }
        }
        out
    }

    fn adjoint(&self, y: &[f64]) -> BlockMatrix {
        let mut out: BlockMatrix = self.dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (blk, list) in self.by_block.iter().enumerate() {
            for (k, a) in list {
                if y[*k] != 0.0 {
                    out[blk] += a * y[*k];
                }
            }
        }
        out
    }

    /// Schur complement `M_ij = <A_i, W A_j W>`.
    fn schur(&self, scalings: &[NtScaling]) -> DMatrix<f64> {
        let m = self.m();
        let mut schur = DMatrix::zeros(m, m);
        for (blk, list) in self.by_block.iter().enumerate() {
            let w = &scalings[blk].w;
            for (jj, (j, aj)) in list.iter().enumerate() {
                let p = w * aj * w;
                for (i, ai) in list.iter().take(jj + 1) {
                    let v = ai.dot(&p);
                    schur[(*i, *j)] += v;
                    if i != j {
                        schur[(*j, *i)] += v;
                    }
                }
            }
        }
        schur
    }

    /// Violation of the normalized dual ray `z = y / b^T y`: `lambda_max(sum z_k A_k)^+`.
    fn ray_violation(&self, y: &[f64], by: f64) -> f64 {
        let z: Vec<f64> = y.iter().map(|v| v / by).collect();
        self.adjoint(&z)
            .into_iter()
            .map(|b| {
                SymmetricEigen::new(b)
                    .eigenvalues
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            })
            .fold(0.0f64, f64::max)
    }
}

/// Jacobi-equilibrated Cholesky factorization of the Schur complement.
struct NewtonSystem {
    m: DMatrix<f64>,
    scale: DVector<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    condition: f64,
}

impl NewtonSystem {
    fn build(m: DMatrix<f64>) -> Option<NewtonSystem> {
        let n = m.nrows();
        if n == 0 {
            return Some(NewtonSystem {
                m,
                scale: DVector::zeros(0),
                chol: None,
                condition: 1.0,
            });
        }
        let scale = DVector::from_fn(n, |i, _| {
            let d = m[(i, i)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        });
        let mut ms = m.clone();
        for j in 0..n {
            for i in 0..n {
                ms[(i, j)] *= scale[i] * scale[j];
            }
        }
        let mut shift = 0.0;
        for _ in 0..8 {
            let mut trial = ms.clone();
            for i in 0..n {
                trial[(i, i)] += shift;
            }
            if let Some(chol) = nalgebra::Cholesky::new(trial) {
                let diag = chol.l_dirty().diagonal();
                let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
                if !(min > 0.0) || !max.is_finite() {
                    return None;
                }
                return Some(NewtonSystem {
                    m,
                    scale,
                    chol: Some(chol),
                    condition: (max / min).powi(2),
                });
            }
            shift = if shift == 0.0 { 1e-14 } else { shift * 100.0 };
        }
        None
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let n = rhs.len();
        let Some(chol) = &self.chol else {
            return Some(Vec::new());
        };
        let rhs = DVector::from_column_slice(rhs);
        let mut sol = DVector::zeros(n);
        let mut resid = rhs.clone();
        for _ in 0..3 {
            let z = chol.solve(&resid.component_mul(&self.scale));
            sol += z.component_mul(&self.scale);
            resid = &rhs - &self.m * &sol;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(sol.iter().copied().collect())
    }
}

struct CoreResult {
    x: BlockMatrix,
    s: BlockMatrix,
    y: Vec<f64>,
    status: SdpStatus,
    iterations: usize,
    trace: Vec<IterationLog>,
}

/// Solve the SDP. Never panics on numerical trouble; the status says what happened.
pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let red = Reduction::new(problem);
    if settings.verbosity > 0 && !red.sigma.is_empty() {
        eprintln!(
            "free-variable elimination: rank {} of {}, sigma range [{:.2e}, {:.2e}]",
            red.sigma.len(),
            problem.free_vars,
            red.sigma.min(),
            red.sigma.max()
        );
    }
    let result = if !red.consistent {
        None
    } else {
        match Core::build(problem, &red) {
            CoreBuild::Ready(core) => Some((
                run(
                    &core,
                    red.y0.dot(&DVector::from_column_slice(&problem.rhs)),
                    settings,
                ),
                core,
            )),
            CoreBuild::Infeasible => None,
        }
    };

    let m = problem.num_constraints();
    let (x, s, y, status, iterations, trace) = match result {
        Some((res, core)) => {
            // y = y0 + Q2 (row_scale * y_core)
            let mut yr = DVector::zeros(red.q2.ncols());
            for (k, &v) in res.y.iter().enumerate() {
                yr[core.rows[k]] = v * core.row_scale[k];
            }
            let y = &red.y0 + &red.q2 * yr;
            (
                res.x,
                res.s,
                y.iter().copied().collect(),
                res.status,
                res.iterations,
                res.trace,
            )
        }
        None => {
            let status = if red.consistent {
                SdpStatus::Infeasible
            } else {
                SdpStatus::Unbounded
            };
            let zeros = problem.zero_blocks();
            (zeros.clone(), zeros, vec![0.0; m], status, 0, Vec::new())
        }
    };
    let ax = problem.apply(&x, &vec![0.0; problem.free_vars]);
    let resid = DVector::from_iterator(m, problem.rhs.iter().zip(&ax).map(|(b, a)| b - a));
    let w = if problem.free_vars > 0 && m > 0 {
        red.recover_w(&resid)
    } else {
        vec![0.0; problem.free_vars]
    };
    let mut sol = SdpSolution {
        primal_obj: problem.primal_objective(&x, &w),
        dual_obj: dot(&problem.rhs, &y),
        x,
        s,
        y,
        w,
        status,
        residuals: Residuals::default(),
        iterations,
        trace,
    };
    sol.residuals = residuals(problem, &sol);
    sol.status = match sol.status {
        SdpStatus::Optimal | SdpStatus::MaxIter | SdpStatus::NumericalFailure => {
            if meets_optimality(&sol, settings.acceptable_tol) {
                SdpStatus::Optimal
            } else if sol.status == SdpStatus::Optimal {
                SdpStatus::NumericalFailure
            } else {
                sol.status
            }
        }
        other => other,
    };
    Ok(sol)
}

/// The guarantees attached to [`SdpStatus::Optimal`].
fn meets_optimality(sol: &SdpSolution, tol: f64) -> bool {
    let r = &sol.residuals;
    r.primal <= tol
        && r.dual <= tol
        && r.gap <= tol * (1.0 + sol.primal_obj.abs())
        && block_min_eigenvalues(&sol.x).iter().all(|&v| v >= -tol)
        && block_min_eigenvalues(&sol.s).iter().all(|&v| v >= -tol)
}

fn run(core: &Core, offset: f64, settings: &SolverSettings) -> CoreResult {
    let m = core.m();
    let n_total: usize = core.dims.iter().sum();
    let tol = settings.tol;

    // Starting point in the spirit of SDPT3's default (rows have unit norm).
    let sqrt_n = (n_total as f64).sqrt();
    let xi = core.b.iter().fold(10.0f64.max(sqrt_n), |a, b| {
        a.max(sqrt_n * (1.0 + b.abs()) / 2.0)
    });
    let c_norm = core.c.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
    let eta = 10.0f64.max(sqrt_n).max(c_norm);
    let mut x: BlockMatrix = core
        .dims
        .iter()
        .map(|&d| DMatrix::identity(d, d) * xi)
        .collect();
    let mut s: BlockMatrix = core
        .dims
        .iter()
        .map(|&d| DMatrix::identity(d, d) * eta)
        .collect();
    let mut y = vec![0.0; m];

    let b_norm = core.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let c_inf = block_max_abs(&core.c);
    let mut trace = Vec::new();
    let mut status = SdpStatus::MaxIter;
    let mut iterations = 0;
    let mut ill_conditioned = 0usize;
    let mut best: Option<(f64, usize, BlockMatrix, BlockMatrix, Vec<f64>)> = None;
    let mut last_progress = 0usize;
    let mut progress_ref = f64::INFINITY;
    let fail = |why: &str| {
        if settings.verbosity > 0 {
            eprintln!("numerical failure: {why}");
        }
        SdpStatus::NumericalFailure
    };

    for iter in 0..=settings.max_iter {
        iterations = iter;
        let ax = core.apply(&x);
        let rp: Vec<f64> = core.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let aty = core.adjoint(&y);
        let rd: BlockMatrix = core
            .c
            .iter()
            .zip(&aty)
            .zip(&s)
            .map(|((c, a), s)| c - a - s)
            .collect();

        let pobj_core = block_inner(&core.c, &x);
        let dobj_core = dot(&core.b, &y);
        let pobj = pobj_core + offset;
        let dobj = dobj_core + offset;
        let compl = block_inner(&x, &s);
        let pinf = rp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dinf = block_max_abs(&rd);
        let rel_pinf = pinf / (1.0 + b_norm);
        let rel_dinf = dinf / (1.0 + c_inf);
        let rel_gap = (pobj - dobj).abs().max(compl) / (1.0 + pobj.abs() + dobj.abs());

        trace.push(IterationLog {
            iter,
            primal_obj: pobj,
            dual_obj: dobj,
            complementarity: compl,
            primal_infeas: pinf,
            dual_infeas: dinf,
            step_primal: 0.0,
            step_dual: 0.0,
        });
        if settings.verbosity > 0 {
            eprintln!(
                "{iter:3} pobj {pobj:+.8e} dobj {dobj:+.8e} gap {compl:.2e} pinf {pinf:.2e} dinf {dinf:.2e}"
            );
        }

        if rel_pinf <= tol && rel_dinf <= tol && rel_gap <= tol {
            status = SdpStatus::Optimal;
            break;
        }
        let merit = rel_pinf.max(rel_dinf).max(rel_gap);
        if merit < 0.1 * progress_ref {
            progress_ref = merit;
            last_progress = iter;
        }
        if best.as_ref().is_none_or(|(m, ..)| merit < *m) {
            best = Some((merit, iter, x.clone(), s.clone(), y.clone()));
        }
        if iter - last_progress >= settings.stall_iters {
            if settings.verbosity > 0 {
                eprintln!(
                    "stalled at merit {:.2e}",
                    best.as_ref().map_or(merit, |b| b.0)
                );
            }
            status = SdpStatus::MaxIter;
            break;
        }
        // Primal infeasibility: y / b^T y approaches an improving dual ray.
        if dobj_core > 0.0
            && dobj_core > 1e3 * (1.0 + pobj_core.abs())
            && core.ray_violation(&y, dobj_core) <= 1e2 * tol
        {
            status = SdpStatus::Infeasible;
            break;
        }
        // Dual infeasibility: X / |<C,X>| approaches an improving primal ray.
        if pobj_core < 0.0 {
            let scale = -pobj_core;
            let ray = ax.iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale;
            if ray <= 1e2 * tol && scale > 1e3 * (1.0 + dobj_core.abs()) {
                status = SdpStatus::Unbounded;
                break;
            }
        }
        if iter == settings.max_iter {
            status = SdpStatus::MaxIter;
            break;
        }

        let Some(scalings) = x
            .iter()
            .zip(&s)
            .map(|(xb, sb)| nt_scaling(xb, sb))
            .collect::<Option<Vec<_>>>()
        else {
            status = fail("scaling");
            break;
        };
        let Some(newton) = NewtonSystem::build(core.schur(&scalings)) else {
            status = fail("factorization");
            break;
        };
        if settings.verbosity > 1 {
            eprintln!("    condition {:.2e}", newton.condition);
        }
        if newton.condition > MAX_CONDITION {
            // Degenerate SOS programs reach this close to the optimum; keep going briefly.
            ill_conditioned += 1;
            if ill_conditioned > ILL_CONDITIONED_BUDGET {
                status = fail("ill-conditioned budget");
                break;
            }
        }
        let mu = compl / n_total as f64;

        // A(W R_d W) does not change between predictor and corrector.
        let wrdw: BlockMatrix = scalings
            .iter()
            .zip(&rd)
            .map(|(sc, r)| &sc.w * r * &sc.w)
            .collect();
        let a_wrdw = core.apply(&wrdw);

        let compute = |rc: &[DMatrix<f64>]| -> Option<(BlockMatrix, BlockMatrix, Vec<f64>)> {
            // T solves  Lambda T + T Lambda = 2 R_c  in the scaled space.
            let gtg: BlockMatrix = scalings
                .iter()
                .zip(rc)
                .map(|(sc, r)| {
                    let n = sc.lambda.len();
                    let t = DMatrix::from_fn(n, n, |i, j| {
                        2.0 * r[(i, j)] / (sc.lambda[i] + sc.lambda[j])
                    });
                    &sc.g * t * sc.g.transpose()
                })
                .collect();
            let a_gtg = core.apply(&gtg);
            let rhs: Vec<f64> = (0..m).map(|k| rp[k] - a_gtg[k] + a_wrdw[k]).collect();
            let mut dy = newton.solve(&rhs)?;
            let atdy = core.adjoint(&dy);
            let mut ds: BlockMatrix = rd.iter().zip(&atdy).map(|(r, a)| r - a).collect();
            let mut dx: BlockMatrix = scalings
                .iter()
                .zip(&ds)
                .zip(&gtg)
                .map(|((sc, d), g)| {
                    let mut out = g - &sc.w * d * &sc.w;
                    symmetrize(&mut out);
                    out
                })
                .collect();
            // Refine against the operator itself so that A(dX) tracks rp.
            let rp_norm = rp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for _ in 0..3 {
                let adx = core.apply(&dx);
                let r: Vec<f64> = rp.iter().zip(&adx).map(|(p, a)| p - a).collect();
                let r_norm = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if r_norm <= 1e-15 * (1.0 + rp_norm + b_norm) {
                    break;
                }
                let delta = newton.solve(&r)?;
                let at_delta = core.adjoint(&delta);
                for ((dsb, dxb), (sc, a)) in ds
                    .iter_mut()
                    .zip(dx.iter_mut())
                    .zip(scalings.iter().zip(&at_delta))
                {
                    *dsb -= a;
                    *dxb += &sc.w * a * &sc.w;
                    symmetrize(dxb);
                }
                for (d, e) in dy.iter_mut().zip(&delta) {
                    *d += e;
                }
            }
            Some((dx, ds, dy))
        };

        // Predictor.
        let rc_aff: BlockMatrix = scalings
            .iter()
            .map(|sc| DMatrix::from_diagonal(&sc.lambda.map(|v| -v * v)))
            .collect();
        let Some((dx_aff, ds_aff, _)) = compute(&rc_aff) else {
            status = fail("predictor solve");
            break;
        };
        let ap_aff = step_length(&x, &dx_aff, 1.0);
        let ad_aff = step_length(&s, &ds_aff, 1.0);
        let compl_aff: f64 = x
            .iter()
            .zip(&dx_aff)
            .zip(s.iter().zip(&ds_aff))
            .map(|((xb, dxb), (sb, dsb))| (xb + dxb * ap_aff).dot(&(sb + dsb * ad_aff)))
            .sum();
        let expon = (3.0 * ap_aff.min(ad_aff).powi(2)).max(1.0);
        let sigma = (compl_aff / compl).max(0.0).powf(expon).min(1.0);

        // Corrector.
        let rc: BlockMatrix = scalings
            .iter()
            .zip(dx_aff.iter().zip(&ds_aff))
            .map(|(sc, (dx, ds))| {
                let dx_t = &sc.g_inv * dx * sc.g_inv.transpose();
                let ds_t = sc.g.transpose() * ds * &sc.g;
                let cross = &dx_t * &ds_t;
                let n = sc.lambda.len();
                DMatrix::from_fn(n, n, |i, j| {
                    let base = if i == j {
                        sigma * mu - sc.lambda[i] * sc.lambda[i]
                    } else {
                        0.0
                    };
                    base - 0.5 * (cross[(i, j)] + cross[(j, i)])
                })
            })
            .collect();
        let Some((dx, ds, dy)) = compute(&rc) else {
            status = fail("corrector solve");
            break;
        };
        let gamma = 0.9 + 0.09 * ap_aff.min(ad_aff);
        let ap = step_length(&x, &dx, gamma);
        let ad = step_length(&s, &ds, gamma);
        for (xb, dxb) in x.iter_mut().zip(&dx) {
            *xb += dxb * ap;
            symmetrize(xb);
        }
        for (sb, dsb) in s.iter_mut().zip(&ds) {
            *sb += dsb * ad;
            symmetrize(sb);
        }
        for (yi, dyi) in y.iter_mut().zip(&dy) {
            *yi += ad * dyi;
        }
        if let Some(last) = trace.last_mut() {
            last.step_primal = ap;
            last.step_dual = ad;
        }
        if ap.max(ad) < 1e-10 {
            status = fail("step too short");
            break;
        }
    }
    if matches!(status, SdpStatus::MaxIter | SdpStatus::NumericalFailure) {
        if let Some((_, at, bx, bs, by)) = best {
            if settings.verbosity > 0 {
                eprintln!("returning best iterate {at}");
            }
            x = bx;
            s = bs;
            y = by;
        }
    }
    CoreResult {
        x,
        s,
        y,
        status,
        iterations,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// minimize x  s.t. [[x, 1], [1, x]] >= 0, written in primal form:
    /// X 2x2 PSD, X_12 = 1, X_11 - X_22 = 0, objective 0.5 (X_11 + X_22).
    pub(crate) fn two_by_two_problem() -> SdpProblem {
        SdpProblem {
            block_dims: vec![2],
            constraints: vec![
                LinearConstraint {
                    entries: vec![SymEntry::new(0, 0, 1, 0.5)],
                    free: vec![],
                },
                LinearConstraint {
                    entries: vec![SymEntry::new(0, 0, 0, 1.0), SymEntry::new(0, 1, 1, -1.0)],
                    free: vec![],
                },
            ],
            rhs: vec![1.0, 0.0],
            objective: vec![SymEntry::new(0, 0, 0, 0.5), SymEntry::new(0, 1, 1, 0.5)],
            free_objective: vec![],
            free_vars: 0,
        }
    }

    #[test]
    fn scalar_in_matrix_inequality() {
        let p = two_by_two_problem();
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.primal_obj - 1.0).abs() < 1e-7, "{}", sol.primal_obj);
        assert!(sol.residuals.gap <= 1e-7 * (1.0 + sol.primal_obj.abs()));
        assert!(sol.residuals.primal <= 1e-7);
    }

    #[test]
    fn trace_one_forces_identity() {
        let p = SdpProblem {
            block_dims: vec![1],
            constraints: vec![LinearConstraint {
                entries: vec![SymEntry::new(0, 0, 0, 1.0)],
                free: vec![],
            }],
            rhs: vec![1.0],
            objective: vec![],
            free_objective: vec![],
            free_vars: 0,
        };
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.x[0][(0, 0)] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn free_variable_objective() {
        // minimize w  s.t.  X_11 - w = -3,  X 1x1 PSD  ->  w = 3
        let p = SdpProblem {
            block_dims: vec![1],
            constraints: vec![LinearConstraint {
                entries: vec![SymEntry::new(0, 0, 0, 1.0)],
                free: vec![(0, -1.0)],
            }],
            rhs: vec![-3.0],
            objective: vec![],
            free_objective: vec![1.0],
            free_vars: 1,
        };
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.w[0] - 3.0).abs() < 1e-7, "{}", sol.w[0]);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // X 1x1 PSD with X = -1.
        let p = SdpProblem {
            block_dims: vec![1],
            constraints: vec![LinearConstraint {
                entries: vec![SymEntry::new(0, 0, 0, 1.0)],
                free: vec![],
            }],
            rhs: vec![-1.0],
            objective: vec![],
            free_objective: vec![],
            free_vars: 0,
        };
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn detects_unboundedness() {
        // minimize X_11 - X_22  s.t.  X_12 = 0.
        let p = SdpProblem {
            block_dims: vec![2],
            constraints: vec![LinearConstraint {
                entries: vec![SymEntry::new(0, 0, 1, 1.0)],
                free: vec![],
            }],
            rhs: vec![0.0],
            objective: vec![SymEntry::new(0, 0, 0, 1.0), SymEntry::new(0, 1, 1, -1.0)],
            free_objective: vec![],
            free_vars: 0,
        };
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Unbounded);
    }

    #[test]
    fn residuals_of_exact_and_perturbed_points() {
        let p = two_by_two_problem();
        // Analytic optimum: X = [[1,1],[1,1]], y = (1, 0), S = C - A_1 = [[.5,-.5],[-.5,.5]].
        let mut sol = SdpSolution {
            x: vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])],
            s: vec![DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5])],
            y: vec![1.0, 0.0],
            w: vec![],
            status: SdpStatus::Optimal,
            primal_obj: 1.0,
            dual_obj: 1.0,
            residuals: Residuals::default(),
            iterations: 0,
            trace: vec![],
        };
        let r = residuals(&p, &sol);
        assert!(r.primal <= 1e-7 && r.dual <= 1e-7 && r.gap <= 1e-7, "{r:?}");
        sol.x[0][(0, 0)] += 1e-3;
        let r = residuals(&p, &sol);
        assert!((r.primal - 1e-3).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn zero_problem_has_zero_residuals() {
        let p = SdpProblem {
            block_dims: vec![2],
            constraints: vec![LinearConstraint {
                entries: vec![SymEntry::new(0, 0, 0, 1.0)],
                free: vec![],
            }],
            rhs: vec![0.0],
            ..Default::default()
        };
        let sol = SdpSolution {
            x: vec![DMatrix::zeros(2, 2)],
            s: vec![DMatrix::zeros(2, 2)],
            y: vec![0.0],
            w: vec![],
            status: SdpStatus::Optimal,
            primal_obj: 0.0,
            dual_obj: 0.0,
            residuals: Residuals::default(),
            iterations: 0,
            trace: vec![],
        };
        assert_eq!(residuals(&p, &sol), Residuals::default());
    }

    #[test]
    fn malformed_problems_are_rejected() {
        let mut p = two_by_two_problem();
        p.rhs.pop();
        assert!(solve(&p, &SolverSettings::default()).is_err());
        let mut p = two_by_two_problem();
        p.constraints[0].entries[0].col = 5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn sdpa_export_layout() {
        let p = two_by_two_problem();
        let text = p.to_sdpa();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "2");
        assert_eq!(lines[1], "1");
        assert_eq!(lines[2], "2");
        assert_eq!(lines[3], "1.0000000000000000e0 0.0000000000000000e0");
        assert!(lines.contains(&"0 1 1 1 -5.0000000000000000e-1"));
        assert!(lines.contains(&"1 1 1 2 5.0000000000000000e-1"));
    }
}
