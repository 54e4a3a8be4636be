//! Sum-of-squares programs over polynomials that depend affinely on decision
//! variables, and their compilation to [`SdpProblem`]s.
//!
//! Decision variables are either free scalars (polynomial coefficients, the
//! error bound) or entries of PSD Gram blocks (SOS multipliers). Every SOS
//! constraint `p in S[x]` receives its own Gram block `Q` and one equality per
//! basis element matching `p = z^T Q z`. With [`Basis::Chebyshev`] the vector
//! `z` holds tensor Chebyshev polynomials and coefficients are matched in that
//! basis, which keeps high-degree programs on `[-1, 1]^n` well conditioned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{
    chebyshev_polynomial, chebyshev_product, monomial_basis, monomial_in_chebyshev, Monomial,
    PolyError, Polynomial,
};
use crate::sdp::{
    self, LinearConstraint, SdpProblem, SdpSolution, SdpStatus, SolverSettings, SymEntry,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("Gram parameterization needs an even degree, got {0}")]
    OddDegree(u32),
    #[error("SOS test needs an even-degree polynomial, got degree {0}")]
    OddPolynomial(u32),
    #[error("boundary operator needs at least one boundary factor")]
    EmptyBoundary,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("SDP solve failed with status {0:?}")]
    Solver(SdpStatus),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

/// A scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    Free(usize),
    /// Entry `(row, col)`, `row <= col`, of a Gram block.
    Gram {
        block: usize,
        row: usize,
        col: usize,
    },
}

/// `constant + sum coeff * var`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub terms: BTreeMap<Var, f64>,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: BTreeMap::new(),
        }
    }

    pub fn var(v: Var) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: Var, coeff: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(v, coeff);
        Self {
            constant: 0.0,
            terms,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn add_scaled(&mut self, other: &AffineExpr, s: f64) {
        self.constant += s * other.constant;
        for (v, c) in &other.terms {
            let e = self.terms.entry(*v).or_insert(0.0);
            *e += s * c;
            if *e == 0.0 {
                self.terms.remove(v);
            }
        }
    }

    pub fn scaled(&self, s: f64) -> AffineExpr {
        let mut out = AffineExpr::default();
        out.add_scaled(self, s);
        out
    }

    pub fn eval(&self, values: &Assignment) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|(v, c)| c * values.value(*v))
                .sum::<f64>()
    }
}

/// Values for every decision variable of a program.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub free: Vec<f64>,
    pub gram: Vec<DMatrix<f64>>,
}

impl Assignment {
    pub fn value(&self, v: Var) -> f64 {
        match v {
            Var::Free(i) => self.free[i],
            Var::Gram { block, row, col } => self.gram[block][(row, col)],
        }
    }
}

/// Polynomial whose coefficients are affine in the decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPolynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, AffineExpr>,
}

impl ParamPolynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_polynomial(p: &Polynomial) -> Self {
        let mut out = Self::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &AffineExpr::constant(c), 1.0);
        }
        out
    }

    /// `expr * x^m` summed into `self`.
    pub fn add_term(&mut self, m: Monomial, expr: &AffineExpr, s: f64) {
        let e = self.terms.entry(m.clone()).or_default();
        e.add_scaled(expr, s);
        if e.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffineExpr)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, m: &Monomial) -> Option<&AffineExpr> {
        self.terms.get(m)
    }

    /// Every decision variable this polynomial depends on.
    pub fn variables(&self) -> BTreeSet<Var> {
        self.terms
            .values()
            .flat_map(|e| e.terms.keys().copied())
            .collect()
    }

    pub fn add(&self, other: &ParamPolynomial) -> ParamPolynomial {
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_term(m.clone(), e, 1.0);
        }
        out
    }

    pub fn sub(&self, other: &ParamPolynomial) -> ParamPolynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn add_poly(&self, p: &Polynomial) -> ParamPolynomial {
        self.add(&ParamPolynomial::from_polynomial(p))
    }

    pub fn scale(&self, s: f64) -> ParamPolynomial {
        let mut out = ParamPolynomial::zero(self.nvars);
        for (m, e) in &self.terms {
            out.add_term(m.clone(), e, s);
        }
        out
    }

    /// Product with a fixed polynomial (stays affine).
    pub fn mul_poly(&self, p: &Polynomial) -> ParamPolynomial {
        assert_eq!(p.nvars(), self.nvars);
        let mut out = ParamPolynomial::zero(self.nvars);
        for (m, e) in &self.terms {
            for (pm, c) in p.terms() {
                out.add_term(m.mul(pm), e, c);
            }
        }
        out
    }

    pub fn differentiate(&self, var: usize) -> Result<ParamPolynomial, PolyError> {
        if var >= self.nvars {
            return Err(PolyError::IndexOutOfRange {
                index: var,
                nvars: self.nvars,
            });
        }
        let mut out = ParamPolynomial::zero(self.nvars);
        for (m, e) in &self.terms {
            let k = m.exponents()[var];
            if k == 0 {
                continue;
            }
            let mut exps = m.exponents().to_vec();
            exps[var] -= 1;
            out.add_term(Monomial::new(exps), e, k as f64);
        }
        Ok(out)
    }

    /// Value at a fixed state, as an affine expression in the decision variables.
    pub fn at_point(&self, point: &[f64]) -> AffineExpr {
        let mut out = AffineExpr::default();
        for (m, e) in &self.terms {
            out.add_scaled(e, m.eval(point));
        }
        out
    }

    pub fn resolve(&self, values: &Assignment) -> Polynomial {
        Polynomial::from_terms(
            self.nvars,
            self.terms.iter().map(|(m, e)| (m.clone(), e.eval(values))),
        )
    }

    fn describe(&self, labels: &dyn Fn(Var) -> String) -> String {
        let mut parts = Vec::new();
        for (m, e) in self.terms.iter().rev() {
            let mut coeff = Vec::new();
            if e.constant != 0.0 {
                coeff.push(format!("{}", e.constant));
            }
            for (v, c) in &e.terms {
                coeff.push(format!("{c}*{}", labels(*v)));
            }
            let mono: Vec<String> = m
                .exponents()
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(i, &k)| {
                    if k == 1 {
                        format!("x{}", i + 1)
                    } else {
                        format!("x{}^{k}", i + 1)
                    }
                })
                .collect();
            let mono = if mono.is_empty() {
                String::new()
            } else {
                format!(" * {}", mono.join("*"))
            };
            parts.push(format!("({}){mono}", coeff.join(" + ")));
        }
        if parts.is_empty() {
            "0".into()
        } else {
            parts.join(" + ")
        }
    }
}

/// Basic closed semialgebraic set `{x : g_i(x) >= 0}` with boundary
/// `{x : prod h_j(x) = 0}` and a bounding box used for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SemialgebraicDomain {
    pub generators: Vec<Polynomial>,
    pub boundary_factors: Vec<Polynomial>,
    pub bounds: Vec<(f64, f64)>,
}

impl SemialgebraicDomain {
    pub fn new(
        generators: Vec<Polynomial>,
        boundary_factors: Vec<Polynomial>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self, SosError> {
        let d = Self {
            generators,
            boundary_factors,
            bounds,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), SosError> {
        let Some(first) = self.generators.first() else {
            return Err(SosError::InvalidDomain(
                "at least one generator required".into(),
            ));
        };
        let n = first.nvars();
        if self
            .generators
            .iter()
            .chain(&self.boundary_factors)
            .any(|p| p.nvars() != n)
        {
            return Err(SosError::InvalidDomain(
                "generators disagree on nvars".into(),
            ));
        }
        if self.bounds.len() != n || self.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(SosError::InvalidDomain(
                "bounding box must give lo < hi for every variable".into(),
            ));
        }
        Ok(())
    }

    pub fn nvars(&self) -> usize {
        self.generators[0].nvars()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.generators.iter().all(|g| g.eval(x) >= -tol)
    }

    /// `n` points drawn uniformly from the domain by rejection from the bounding box.
    pub fn sample_uniform<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 1000 * n.max(1) {
            attempts += 1;
            let x: Vec<f64> = self
                .bounds
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect();
            if self.contains(&x, 0.0) {
                out.push(x);
            }
        }
        out
    }

    /// Tensor grid with `per_axis` nodes per coordinate, restricted to the domain.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let per_axis = per_axis.max(2);
        let n = self.nvars();
        let mut out = Vec::new();
        let mut idx = vec![0usize; n];
        loop {
            let x: Vec<f64> = idx
                .iter()
                .zip(&self.bounds)
                .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64)
                .collect();
            if self.contains(&x, 1e-12) {
                out.push(x);
            }
            let mut k = 0;
            loop {
                if k == n {
                    return out;
                }
                idx[k] += 1;
                if idx[k] < per_axis {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

/// Polynomial basis for Gram vectors, free polynomials and coefficient matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Basis {
    #[default]
    Monomial,
    Chebyshev,
}

impl Basis {
    /// Basis element indexed by `alpha`, in the power basis.
    pub fn element(self, alpha: &Monomial) -> Polynomial {
        match self {
            Basis::Monomial => Polynomial::from_terms(alpha.nvars(), [(alpha.clone(), 1.0)]),
            Basis::Chebyshev => chebyshev_polynomial(alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramBlock {
    pub label: String,
    pub basis: Vec<Monomial>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SosConstraint {
    pub label: String,
    pub poly: ParamPolynomial,
}

/// Decision layout, SOS constraints, linear equalities and a linear objective (minimized).
#[derive(Debug, Clone)]
pub struct SosProgram {
    nvars: usize,
    basis: Basis,
    free_labels: Vec<String>,
    gram_blocks: Vec<GramBlock>,
    constraints: Vec<SosConstraint>,
    equalities: Vec<(String, AffineExpr)>,
    objective: AffineExpr,
}

impl SosProgram {
    pub fn new(nvars: usize) -> Self {
        Self {
            nvars,
            basis: Basis::Monomial,
            free_labels: Vec::new(),
            gram_blocks: Vec::new(),
            constraints: Vec::new(),
            equalities: Vec::new(),
            objective: AffineExpr::default(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Set the basis; affects unknowns created afterwards and compilation.
    pub fn with_basis(mut self, basis: Basis) -> Self {
        self.basis = basis;
        self
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn num_free(&self) -> usize {
        self.free_labels.len()
    }

    pub fn gram_blocks(&self) -> &[GramBlock] {
        &self.gram_blocks
    }

    pub fn constraints(&self) -> &[SosConstraint] {
        &self.constraints
    }

    pub fn equalities(&self) -> &[(String, AffineExpr)] {
        &self.equalities
    }

    pub fn new_free(&mut self, label: impl Into<String>) -> Var {
        self.free_labels.push(label.into());
        Var::Free(self.free_labels.len() - 1)
    }

    /// Polynomial with a fresh free coefficient for every basis element of degree `<= max_degree`.
    pub fn new_free_polynomial(&mut self, max_degree: u32, label: &str) -> ParamPolynomial {
        let mut p = ParamPolynomial::zero(self.nvars);
        for alpha in monomial_basis(self.nvars, max_degree) {
            let v = self.new_free(format!("{label}[{}]", monomial_label(&alpha)));
            for (m, c) in self.basis.element(&alpha).terms() {
                p.add_term(m.clone(), &AffineExpr::var(v), c);
            }
        }
        p
    }

    /// `z^T Q z` for a fresh PSD block `Q` over the basis elements of degree `<= max_degree / 2`.
    /// Returns the polynomial and the block index.
    pub fn gram_parameterize(
        &mut self,
        max_degree: u32,
        label: &str,
    ) -> Result<(ParamPolynomial, usize), SosError> {
        if !max_degree.is_multiple_of(2) {
            return Err(SosError::OddDegree(max_degree));
        }
        let basis = monomial_basis(self.nvars, max_degree / 2);
        let block = self.gram_blocks.len();
        let p = gram_polynomial(self.nvars, self.basis, &basis, block);
        self.gram_blocks.push(GramBlock {
            label: label.to_string(),
            basis,
        });
        Ok((p, block))
    }

    pub fn add_sos(&mut self, label: impl Into<String>, poly: ParamPolynomial) {
        assert_eq!(poly.nvars(), self.nvars);
        self.constraints.push(SosConstraint {
            label: label.into(),
            poly,
        });
    }

    /// Constrain `expr = 0`.
    pub fn add_equality(&mut self, label: impl Into<String>, expr: AffineExpr) {
        self.equalities.push((label.into(), expr));
    }

    pub fn set_objective(&mut self, expr: AffineExpr) {
        self.objective = expr;
    }

    fn var_label(&self, v: Var) -> String {
        match v {
            Var::Free(i) => self.free_labels[i].clone(),
            Var::Gram { block, row, col } => {
                format!("{}.Q[{row},{col}]", self.gram_blocks[block].label)
            }
        }
    }

    /// Human-readable dump: decision layout, then every constraint.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "SOS program: {} variables, {} free decision variables, {} multiplier Gram blocks",
            self.nvars,
            self.free_labels.len(),
            self.gram_blocks.len()
        );
        for b in &self.gram_blocks {
            let _ = writeln!(
                s,
                "  multiplier {} : {}x{} PSD",
                b.label,
                b.basis.len(),
                b.basis.len()
            );
        }
        let labels = |v: Var| self.var_label(v);
        for c in &self.constraints {
            let _ = writeln!(
                s,
                "  [{}] degree {} in S[x]: {}",
                c.label,
                c.poly.degree(),
                c.poly.describe(&labels)
            );
        }
        for (label, e) in &self.equalities {
            let poly = ParamPolynomial {
                nvars: self.nvars,
                terms: [(Monomial::one(self.nvars), e.clone())].into(),
            };
            let _ = writeln!(s, "  [{label}] {} = 0", poly.describe(&labels));
        }
        s
    }

    pub fn compile(&self) -> Result<CompiledProgram, SosError> {
        let mut block_dims: Vec<usize> = self.gram_blocks.iter().map(|b| b.basis.len()).collect();
        let mut constraints = Vec::new();
        let mut rhs = Vec::new();
        let mut rows = Vec::new();
        let mut own_blocks = Vec::new();

        for (ci, c) in self.constraints.iter().enumerate() {
            let half = c.poly.degree().div_ceil(2);
            let basis = monomial_basis(self.nvars, half);
            let own = block_dims.len();
            block_dims.push(basis.len());
            own_blocks.push(own);
            let (gram, poly) = match self.basis {
                Basis::Monomial => (
                    gram_polynomial(self.nvars, Basis::Monomial, &basis, own),
                    c.poly.clone(),
                ),
                Basis::Chebyshev => (
                    chebyshev_gram_coefficients(self.nvars, &basis, own),
                    to_chebyshev(&c.poly),
                ),
            };
            let mut monos: BTreeSet<Monomial> = poly.terms().map(|(m, _)| m.clone()).collect();
            monos.extend(gram.terms().map(|(m, _)| m.clone()));
            for m in monos {
                // z^T Q z - p = 0 on this basis element.
                let mut expr = gram.coefficient(&m).cloned().unwrap_or_default();
                if let Some(pe) = poly.coefficient(&m) {
                    expr.add_scaled(pe, -1.0);
                }
                let (row, b) = expr_to_row(&expr);
                constraints.push(row);
                rhs.push(b);
                rows.push(RowOrigin::Coefficient {
                    constraint: ci,
                    monomial: m,
                });
            }
        }
        for (ei, (_, e)) in self.equalities.iter().enumerate() {
            let (row, b) = expr_to_row(e);
            constraints.push(row);
            rhs.push(b);
            rows.push(RowOrigin::Equality(ei));
        }

        let mut objective = Vec::new();
        let mut free_objective = vec![0.0; self.free_labels.len()];
        for (v, c) in &self.objective.terms {
            match *v {
                Var::Free(i) => free_objective[i] += c,
                Var::Gram { block, row, col } => {
                    let val = if row == col { *c } else { c / 2.0 };
                    objective.push(SymEntry::new(block, row, col, val));
                }
            }
        }
        let sdp = SdpProblem {
            block_dims,
            constraints,
            rhs,
            objective,
            free_objective,
            free_vars: self.free_labels.len(),
        };
        sdp.validate()?;
        Ok(CompiledProgram {
            sdp,
            basis: self.basis,
            rows,
            own_blocks,
            num_multiplier_blocks: self.gram_blocks.len(),
            objective_offset: self.objective.constant,
        })
    }
}

fn monomial_label(m: &Monomial) -> String {
    m.exponents()
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn gram_polynomial(nvars: usize, kind: Basis, basis: &[Monomial], block: usize) -> ParamPolynomial {
    let elements: Vec<Polynomial> = basis.iter().map(|a| kind.element(a)).collect();
    let mut p = ParamPolynomial::zero(nvars);
    for (r, zr) in elements.iter().enumerate() {
        for (c, zc) in elements.iter().enumerate().skip(r) {
            let coeff = if r == c { 1.0 } else { 2.0 };
            let var = AffineExpr::term(
                Var::Gram {
                    block,
                    row: r,
                    col: c,
                },
                coeff,
            );
            for (m, v) in (zr * zc).terms() {
                p.add_term(m.clone(), &var, v);
            }
        }
    }
    p
}

/// `z^T Q z` for Chebyshev `z`, with coefficients keyed by Chebyshev order.
fn chebyshev_gram_coefficients(nvars: usize, basis: &[Monomial], block: usize) -> ParamPolynomial {
    let mut p = ParamPolynomial::zero(nvars);
    for (r, a) in basis.iter().enumerate() {
        for (c, b) in basis.iter().enumerate().skip(r) {
            let coeff = if r == c { 1.0 } else { 2.0 };
            let var = AffineExpr::term(
                Var::Gram {
                    block,
                    row: r,
                    col: c,
                },
                coeff,
            );
            for (g, v) in chebyshev_product(a, b) {
                p.add_term(g, &var, v);
            }
        }
    }
    p
}

/// Re-key the coefficients of `p` by Chebyshev order.
fn to_chebyshev(p: &ParamPolynomial) -> ParamPolynomial {
    let mut out = ParamPolynomial::zero(p.nvars());
    for (m, e) in p.terms() {
        for (g, v) in monomial_in_chebyshev(m) {
            out.add_term(g, e, v);
        }
    }
    out
}

/// Inverse of [`to_chebyshev`].
fn from_chebyshev(p: &ParamPolynomial) -> ParamPolynomial {
    let mut out = ParamPolynomial::zero(p.nvars());
    for (g, e) in p.terms() {
        for (m, v) in chebyshev_polynomial(g).terms() {
            out.add_term(m.clone(), e, v);
        }
    }
    out
}

/// `expr = 0` as `<A, X> + F w = b`.
fn expr_to_row(expr: &AffineExpr) -> (LinearConstraint, f64) {
    let mut row = LinearConstraint::default();
    for (v, &c) in &expr.terms {
        match *v {
            Var::Free(i) => row.free.push((i, c)),
            Var::Gram { block, row: r, col } => {
                let val = if r == col { c } else { c / 2.0 };
                row.entries.push(SymEntry::new(block, r, col, val));
            }
        }
    }
    (row, -expr.constant)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOrigin {
    /// Coefficient of a basis element; `monomial` is the Chebyshev order in that basis.
    Coefficient {
        constraint: usize,
        monomial: Monomial,
    },
    Equality(usize),
}

/// An SDP together with the index map back to the SOS program.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub sdp: SdpProblem,
    pub basis: Basis,
    pub rows: Vec<RowOrigin>,
    /// Gram block owned by each SOS constraint.
    pub own_blocks: Vec<usize>,
    pub num_multiplier_blocks: usize,
    pub objective_offset: f64,
}

impl CompiledProgram {
    /// Decision-variable values from an SDP solution.
    pub fn assignment(&self, sol: &SdpSolution) -> Assignment {
        Assignment {
            free: sol.w.clone(),
            gram: sol.x.clone(),
        }
    }

    /// Rebuild every SOS constraint polynomial from the equality rows alone.
    pub fn decompile_constraints(&self, nvars: usize) -> Vec<ParamPolynomial> {
        let mut out = vec![ParamPolynomial::zero(nvars); self.own_blocks.len()];
        for ((origin, row), b) in self
            .rows
            .iter()
            .zip(&self.sdp.constraints)
            .zip(&self.sdp.rhs)
        {
            let RowOrigin::Coefficient {
                constraint,
                monomial,
            } = origin
            else {
                continue;
            };
            let own = self.own_blocks[*constraint];
            // Row encodes own - p = 0, i.e. p = -(row without own entries) + b.
            let mut expr = AffineExpr::constant(*b);
            for e in row.entries.iter().filter(|e| e.block != own) {
                let coeff = if e.row == e.col {
                    e.value
                } else {
                    2.0 * e.value
                };
                expr.add_scaled(
                    &AffineExpr::term(
                        Var::Gram {
                            block: e.block,
                            row: e.row,
                            col: e.col,
                        },
                        coeff,
                    ),
                    -1.0,
                );
            }
            for &(i, c) in &row.free {
                expr.add_scaled(&AffineExpr::term(Var::Free(i), c), -1.0);
            }
            out[*constraint].add_term(monomial.clone(), &expr, 1.0);
        }
        match self.basis {
            Basis::Monomial => out,
            Basis::Chebyshev => out.iter().map(from_chebyshev).collect(),
        }
    }
}

/// `sum_{nu in {0,1}^k} s_nu * prod g_i^nu_i` with every `s_nu` a fresh Gram
/// SOS polynomial of degree `<= multiplier_degree`.
pub fn domain_operator(
    prog: &mut SosProgram,
    generators: &[Polynomial],
    multiplier_degree: u32,
    label: &str,
) -> Result<ParamPolynomial, SosError> {
    if !multiplier_degree.is_multiple_of(2) {
        return Err(SosError::OddDegree(multiplier_degree));
    }
    preordering(prog, generators, label, |_| Some(multiplier_degree))
}

/// Like [`domain_operator`], but each `s_nu` gets the largest even degree keeping
/// `deg(s_nu * prod g^nu) <= total_degree`; products already above the cap are skipped.
pub fn domain_operator_capped(
    prog: &mut SosProgram,
    generators: &[Polynomial],
    total_degree: u32,
    label: &str,
) -> Result<ParamPolynomial, SosError> {
    preordering(prog, generators, label, |product_degree| {
        (product_degree <= total_degree).then(|| {
            let room = total_degree - product_degree;
            room - room % 2
        })
    })
}

fn preordering(
    prog: &mut SosProgram,
    generators: &[Polynomial],
    label: &str,
    degree_for: impl Fn(u32) -> Option<u32>,
) -> Result<ParamPolynomial, SosError> {
    let n = prog.nvars();
    let k = generators.len();
    let mut acc = ParamPolynomial::zero(n);
    for mask in 0u32..(1 << k) {
        let mut product = Polynomial::constant(n, 1.0);
        for (i, g) in generators.iter().enumerate() {
            if mask & (1 << i) != 0 {
                product = product.try_mul(g)?;
            }
        }
        let Some(deg) = degree_for(product.degree()) else {
            continue;
        };
        let (s, _) =
            prog.gram_parameterize(deg, &format!("{label}.s{mask:0width$b}", width = k.max(1)))?;
        acc = acc.add(&s.mul_poly(&product));
    }
    Ok(acc)
}

/// `{p - t_i h_i}` with each `t_i` a fresh free polynomial of degree `<= multiplier_degree`.
pub fn boundary_operator(
    prog: &mut SosProgram,
    p: &ParamPolynomial,
    factors: &[Polynomial],
    multiplier_degree: u32,
    label: &str,
) -> Result<Vec<ParamPolynomial>, SosError> {
    if factors.is_empty() {
        return Err(SosError::EmptyBoundary);
    }
    let mut out = Vec::with_capacity(factors.len());
    for (i, h) in factors.iter().enumerate() {
        let t = prog.new_free_polynomial(multiplier_degree, &format!("{label}.t{i}"));
        out.push(p.sub(&t.mul_poly(h)));
    }
    Ok(out)
}

/// Result of an SOS membership test.
#[derive(Debug, Clone)]
pub enum SosCheck {
    /// `p = sum f_i^2`.
    Sos(Vec<Polynomial>),
    /// The SDP reported the Gram system infeasible.
    NotSos,
}

/// Decide whether `p` is a sum of squares and, if so, factor its Gram matrix.
pub fn check_sos(p: &Polynomial, settings: &SolverSettings) -> Result<SosCheck, SosError> {
    if !p.degree().is_multiple_of(2) {
        return Err(SosError::OddPolynomial(p.degree()));
    }
    let mut prog = SosProgram::new(p.nvars());
    prog.add_sos("p", ParamPolynomial::from_polynomial(p));
    let mut compiled = prog.compile()?;
    // Minimizing the trace keeps the optimal face strictly complementary.
    let own = compiled.own_blocks[0];
    compiled.sdp.objective = (0..compiled.sdp.block_dims[own])
        .map(|i| SymEntry::new(own, i, i, 1.0))
        .collect();
    let sol = sdp::solve(&compiled.sdp, settings)?;
    match sol.status {
        SdpStatus::Optimal => {}
        SdpStatus::Infeasible => return Ok(SosCheck::NotSos),
        other => return Err(SosError::Solver(other)),
    }
    let basis = monomial_basis(p.nvars(), p.degree() / 2);
    let q = &sol.x[compiled.own_blocks[0]];
    Ok(SosCheck::Sos(gram_factors(q, &basis, p.nvars())))
}

/// `Q = sum lambda_i v_i v_i^T` turned into squares `sqrt(lambda_i) v_i^T z`.
pub fn gram_factors(q: &DMatrix<f64>, basis: &[Monomial], nvars: usize) -> Vec<Polynomial> {
    let eig = SymmetricEigen::new(q.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let mut out: Vec<(f64, Polynomial)> = Vec::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 1e-9 * lmax.max(1e-300) {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        let mut f = Polynomial::from_terms(
            nvars,
            basis
                .iter()
                .zip(v.iter())
                .map(|(m, &c)| (m.clone(), c * lambda.sqrt())),
        );
        // Fix the sign so the leading coefficient is positive.
        let leading = f.terms().next_back().map(|(_, c)| c).unwrap_or(0.0);
        if leading < 0.0 {
            f = f.scale(-1.0);
        }
        out.push((lambda, f));
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out.into_iter().map(|(_, f)| f).collect()
}
