//! Sparse multivariate polynomials with `f64` coefficients.
//!
//! Terms are kept in a [`BTreeMap`] keyed by [`Monomial`], so iteration follows
//! the graded-lexicographic order used everywhere else in the crate (dense
//! coefficient vectors, Gram bases, report files).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients with magnitude below this are dropped after every operation.
pub const COEFF_EPS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("variable count mismatch: {left} vs {right}")]
    VarCountMismatch { left: usize, right: usize },
    #[error("variable index {index} out of range for {nvars} variables")]
    IndexOutOfRange { index: usize, nvars: usize },
    #[error("point has {got} coordinates, polynomial has {expected} variables")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degree {degree} exceeds basis degree {max_degree}")]
    DegreeOverflow { degree: u32, max_degree: u32 },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// Exponent vector of a monomial.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Monomial {
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Self { exps }
    }

    pub fn one(nvars: usize) -> Self {
        Self {
            exps: vec![0; nvars],
        }
    }

    pub fn var(nvars: usize, index: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[index] = 1;
        Self { exps }
    }

    pub fn nvars(&self) -> usize {
        self.exps.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exps
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.exps.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.nvars(), other.nvars());
        Monomial {
            exps: self
                .exps
                .iter()
                .zip(&other.exps)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Evaluate at `point` (length must match).
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: total degree first, then larger exponent in the
    /// earlier variable sorts first within a degree (`x1 < x2`, `x1^2 < x1*x2`).
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `nvars` variables of total degree `<= max_degree`, ascending.
pub fn monomial_basis(nvars: usize, max_degree: u32) -> Vec<Monomial> {
    fn rec(prefix: &mut Vec<u32>, nvars: usize, budget: u32, out: &mut Vec<Monomial>) {
        if prefix.len() == nvars {
            out.push(Monomial::new(prefix.clone()));
            return;
        }
        for e in 0..=budget {
            prefix.push(e);
            rec(prefix, nvars, budget - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(nvars), nvars, max_degree, &mut out);
    out.sort();
    out
}

/// Power coefficients of the Chebyshev polynomial `T_k`.
fn chebyshev_powers(k: u32) -> Vec<f64> {
    let (mut prev, mut cur) = (vec![1.0], vec![0.0, 1.0]);
    if k == 0 {
        return prev;
    }
    for _ in 1..k {
        let mut next = vec![0.0; cur.len() + 1];
        for (j, c) in cur.iter().enumerate() {
            next[j + 1] += 2.0 * c;
        }
        for (j, c) in prev.iter().enumerate() {
            next[j] -= c;
        }
        prev = std::mem::replace(&mut cur, next);
    }
    cur
}

/// Chebyshev coefficients of `x^k`, indexed by the order of `T_j`.
fn power_in_chebyshev(k: u32) -> Vec<f64> {
    let mut c = vec![1.0];
    for _ in 0..k {
        let mut next = vec![0.0; c.len() + 1];
        next[1] += c[0];
        for (j, &v) in c.iter().enumerate().skip(1) {
            next[j + 1] += 0.5 * v;
            next[j - 1] += 0.5 * v;
        }
        c = next;
    }
    c
}

fn tensor_expand(factors: Vec<Vec<(u32, f64)>>) -> Vec<(Monomial, f64)> {
    let mut acc: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    for f in factors {
        let mut next = Vec::with_capacity(acc.len() * f.len());
        for (exps, c) in &acc {
            for &(e, v) in &f {
                let mut exps = exps.clone();
                exps.push(e);
                next.push((exps, c * v));
            }
        }
        acc = next;
    }
    let mut merged: BTreeMap<Monomial, f64> = BTreeMap::new();
    for (exps, c) in acc {
        *merged.entry(Monomial::new(exps)).or_insert(0.0) += c;
    }
    merged.into_iter().filter(|(_, c)| *c != 0.0).collect()
}

/// The tensor Chebyshev polynomial `prod_i T_{alpha_i}(x_i)` in the power basis.
pub fn chebyshev_polynomial(alpha: &Monomial) -> Polynomial {
    let factors = alpha
        .exponents()
        .iter()
        .map(|&k| {
            chebyshev_powers(k)
                .into_iter()
                .enumerate()
                .filter(|(_, c)| *c != 0.0)
                .map(|(j, c)| (j as u32, c))
                .collect()
        })
        .collect();
    Polynomial::from_terms(alpha.nvars(), tensor_expand(factors))
}

/// Coefficients of the monomial `m` in the tensor Chebyshev basis; keys are Chebyshev orders.
pub fn monomial_in_chebyshev(m: &Monomial) -> Vec<(Monomial, f64)> {
    let factors = m
        .exponents()
        .iter()
        .map(|&k| {
            power_in_chebyshev(k)
                .into_iter()
                .enumerate()
                .filter(|(_, c)| *c != 0.0)
                .map(|(j, c)| (j as u32, c))
                .collect()
        })
        .collect();
    tensor_expand(factors)
}

/// `T_a T_b` in the tensor Chebyshev basis.
pub fn chebyshev_product(a: &Monomial, b: &Monomial) -> Vec<(Monomial, f64)> {
    let factors = a
        .exponents()
        .iter()
        .zip(b.exponents())
        .map(|(&i, &j)| vec![(i + j, 0.5), (i.abs_diff(j), 0.5)])
        .collect();
    tensor_expand(factors)
}

/// Sparse polynomial in canonical form (no stored coefficient below [`COEFF_EPS`]).
///
/// Serializes as `{"nvars": n, "terms": [{"exponents": [..], "coeff": c}, ..]}`
/// in graded-lexicographic order.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "PolynomialRepr", into = "PolynomialRepr")]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::from_terms(nvars, [(Monomial::one(nvars), c)])
    }

    /// The coordinate polynomial `x_index`.
    pub fn var(nvars: usize, index: usize) -> Self {
        Self::from_terms(nvars, [(Monomial::var(nvars, index), 1.0)])
    }

    /// Build from `(monomial, coefficient)` pairs; repeated monomials are summed.
    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (m, c) in terms {
            assert_eq!(m.nvars(), nvars, "monomial arity does not match nvars");
            *map.entry(m).or_insert(0.0) += c;
        }
        let mut p = Self { nvars, terms: map };
        p.canonicalize();
        p
    }

    fn canonicalize(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEFF_EPS);
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial reports 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Degree in a single variable.
    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms
            .keys()
            .map(|m| m.exponents()[var])
            .max()
            .unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coeff(&Monomial::one(self.nvars))
    }

    /// Terms in ascending graded-lex order.
    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn check_nvars(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars != other.nvars {
            return Err(PolyError::VarCountMismatch {
                left: self.nvars,
                right: other.nvars,
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_nvars(other)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        let mut p = Polynomial {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        Ok(p)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.try_add(&other.scale(-1.0))
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_nvars(other)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut p = Polynomial {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        Ok(p)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut p = Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        };
        p.canonicalize();
        p
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut acc = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            acc = &acc * self;
        }
        acc
    }

    /// `p(shift + scale * x)` with the product taken coordinate-wise.
    pub fn affine_substitute(&self, shift: &[f64], scale: &[f64]) -> Result<Polynomial, PolyError> {
        let n = self.nvars;
        for len in [shift.len(), scale.len()] {
            if len != n {
                return Err(PolyError::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        let images: Vec<Polynomial> = (0..n)
            .map(|i| &Polynomial::constant(n, shift[i]) + &Polynomial::var(n, i).scale(scale[i]))
            .collect();
        let mut powers: Vec<Vec<Polynomial>> = images.iter().map(|p| vec![p.clone()]).collect();
        let mut out = Polynomial::zero(n);
        for (m, c) in self.terms() {
            let mut term = Polynomial::constant(n, c);
            for (i, &e) in m.exponents().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while powers[i].len() < e as usize {
                    let next = &powers[i][powers[i].len() - 1] * &images[i];
                    powers[i].push(next);
                }
                term = &term * &powers[i][e as usize - 1];
            }
            out = &out + &term;
        }
        Ok(out)
    }

    /// Exact partial derivative with respect to `var`.
    pub fn differentiate(&self, var: usize) -> Result<Polynomial, PolyError> {
        if var >= self.nvars {
            return Err(PolyError::IndexOutOfRange {
                index: var,
                nvars: self.nvars,
            });
        }
        let terms = self.terms.iter().filter_map(|(m, &c)| {
            let e = m.exps[var];
            if e == 0 {
                return None;
            }
            let mut exps = m.exps.clone();
            exps[var] -= 1;
            Some((Monomial::new(exps), c * e as f64))
        });
        Ok(Polynomial::from_terms(self.nvars, terms))
    }

    /// Column vector of partial derivatives.
    pub fn gradient(&self) -> PolyMatrix {
        let entries = (0..self.nvars)
            .map(|i| self.differentiate(i).expect("index in range"))
            .collect();
        PolyMatrix {
            rows: self.nvars,
            cols: 1,
            nvars: self.nvars,
            entries,
        }
    }

    pub fn hessian(&self) -> PolyMatrix {
        let grad: Vec<Polynomial> = (0..self.nvars)
            .map(|i| self.differentiate(i).expect("index in range"))
            .collect();
        let n = self.nvars;
        let mut entries = vec![Polynomial::zero(n); n * n];
        for i in 0..n {
            for j in i..n {
                let d = grad[i].differentiate(j).expect("index in range");
                entries[j * n + i] = d.clone();
                entries[i * n + j] = d;
            }
        }
        PolyMatrix {
            rows: n,
            cols: n,
            nvars: n,
            entries,
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: point.len(),
            });
        }
        Ok(self.eval(point))
    }

    /// Unchecked evaluation for hot loops; `point.len()` must equal `nvars`.
    pub fn eval(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.nvars);
        if self.nvars == 1 {
            // Horner over the dense univariate coefficient list.
            let deg = self.degree() as usize;
            let mut dense = vec![0.0; deg + 1];
            for (m, &c) in &self.terms {
                dense[m.exps[0] as usize] = c;
            }
            return dense.iter().rev().fold(0.0, |acc, &c| acc * point[0] + c);
        }
        self.terms.iter().map(|(m, &c)| c * m.eval(point)).sum()
    }

    /// Dense coefficients over `monomial_basis(nvars, max_degree)`.
    pub fn coefficients_in_basis(&self, max_degree: u32) -> Result<Vec<f64>, PolyError> {
        if self.degree() > max_degree {
            return Err(PolyError::DegreeOverflow {
                degree: self.degree(),
                max_degree,
            });
        }
        Ok(monomial_basis(self.nvars, max_degree)
            .iter()
            .map(|m| self.coeff(m))
            .collect())
    }

    /// Inverse of [`Polynomial::coefficients_in_basis`].
    pub fn from_basis_coefficients(
        nvars: usize,
        max_degree: u32,
        coeffs: &[f64],
    ) -> Result<Polynomial, PolyError> {
        let basis = monomial_basis(nvars, max_degree);
        if basis.len() != coeffs.len() {
            return Err(PolyError::DimensionMismatch {
                expected: basis.len(),
                got: coeffs.len(),
            });
        }
        Ok(Polynomial::from_terms(
            nvars,
            basis.into_iter().zip(coeffs.iter().copied()),
        ))
    }

    /// Render with the given variable names (`c * x^2 * y + ...`, highest degree first).
    pub fn to_string_with(&self, names: &[&str]) -> String {
        assert_eq!(names.len(), self.nvars);
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (k, (m, &c)) in self.terms.iter().rev().enumerate() {
            let (sign, mag) = if c < 0.0 { ("-", -c) } else { ("+", c) };
            if k == 0 {
                if sign == "-" {
                    out.push('-');
                }
            } else {
                out.push(' ');
                out.push_str(sign);
                out.push(' ');
            }
            out.push_str(&format_coeff(mag));
            for (v, &e) in m.exps.iter().enumerate() {
                match e {
                    0 => {}
                    1 => {
                        out.push_str(" * ");
                        out.push_str(names[v]);
                    }
                    _ => {
                        out.push_str(&format!(" * {}^{}", names[v], e));
                    }
                }
            }
        }
        out
    }

    /// Parse using the given variable names. Accepts `+ - * ^`, division by a
    /// constant, parentheses, float literals and `exp`/`ln`/`sqrt` of constant
    /// sub-expressions.
    pub fn parse(src: &str, names: &[&str]) -> Result<Polynomial, PolyError> {
        let mut parser = Parser {
            src: src.as_bytes(),
            pos: 0,
            names,
        };
        let p = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.err("unexpected trailing input"));
        }
        Ok(p)
    }

    /// Parse with default names `x1..xn`.
    pub fn parse_default(src: &str, nvars: usize) -> Result<Polynomial, PolyError> {
        let names = default_names(nvars);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Self::parse(src, &refs)
    }
}

pub fn default_names(nvars: usize) -> Vec<String> {
    (1..=nvars).map(|i| format!("x{i}")).collect()
}

fn format_coeff(c: f64) -> String {
    // Debug formatting of f64 is the shortest string that round-trips.
    let s = format!("{c:?}");
    match s.strip_suffix(".0") {
        Some(t) => t.to_string(),
        None => s,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRepr {
    exponents: Vec<u32>,
    coeff: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolynomialRepr {
    nvars: usize,
    terms: Vec<TermRepr>,
}

impl From<Polynomial> for PolynomialRepr {
    fn from(p: Polynomial) -> Self {
        PolynomialRepr {
            nvars: p.nvars,
            terms: p
                .terms
                .into_iter()
                .map(|(m, coeff)| TermRepr {
                    exponents: m.exps,
                    coeff,
                })
                .collect(),
        }
    }
}

impl TryFrom<PolynomialRepr> for Polynomial {
    type Error = PolyError;

    fn try_from(r: PolynomialRepr) -> Result<Self, PolyError> {
        if let Some(t) = r.terms.iter().find(|t| t.exponents.len() != r.nvars) {
            return Err(PolyError::VarCountMismatch {
                left: r.nvars,
                right: t.exponents.len(),
            });
        }
        if r.terms.iter().any(|t| !t.coeff.is_finite()) {
            return Err(PolyError::Shape("non-finite coefficient".into()));
        }
        Ok(Polynomial::from_terms(
            r.nvars,
            r.terms
                .into_iter()
                .map(|t| (Monomial::new(t.exponents), t.coeff)),
        ))
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = default_names(self.nvars);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        f.write_str(&self.to_string_with(&refs))
    }
}

// Operator forms panic on a variable-count mismatch; use the `try_*` methods
// where the operands come from user input.
impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs).expect("polynomial add")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_sub(rhs).expect("polynomial sub")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs).expect("polynomial mul")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    names: &'a [&'a str],
}

impl Parser<'_> {
    fn nvars(&self) -> usize {
        self.names.len()
    }

    fn err(&self, msg: &str) -> PolyError {
        PolyError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = &acc * &self.unary()?;
                }
                Some(b'/') => {
                    self.pos += 1;
                    let at = self.pos;
                    let divisor = self.unary()?;
                    if divisor.degree() > 0 {
                        return Err(PolyError::Parse {
                            pos: at,
                            msg: "divisor must be a constant".to_string(),
                        });
                    }
                    let c = divisor.constant_term();
                    if c == 0.0 || !c.is_finite() {
                        return Err(PolyError::Parse {
                            pos: at,
                            msg: "division by zero".to_string(),
                        });
                    }
                    acc = acc.scale(1.0 / c);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-&self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected non-negative integer exponent"));
            }
            let k: u32 = std::str::from_utf8(&self.src[start..self.pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| self.err("exponent too large"))?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < s.len() && (s[look] == b'+' || s[look] == b'-') {
                look += 1;
            }
            if look < s.len() && s[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| PolyError::Parse {
            pos: start,
            msg: format!("invalid number '{text}'"),
        })?;
        Ok(Polynomial::constant(self.nvars(), value))
    }

    fn ident(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if let Some(i) = self.names.iter().position(|n| *n == name) {
            return Ok(Polynomial::var(self.nvars(), i));
        }
        let func: fn(f64) -> f64 = match name {
            "exp" => f64::exp,
            "ln" => f64::ln,
            "sqrt" => f64::sqrt,
            _ => {
                return Err(PolyError::Parse {
                    pos: start,
                    msg: format!("unknown identifier '{name}'"),
                })
            }
        };
        if self.peek() != Some(b'(') {
            return Err(self.err("expected '(' after function name"));
        }
        let arg = self.atom()?;
        if arg.degree() > 0 {
            return Err(PolyError::Parse {
                pos: start,
                msg: format!("{name}() needs a constant argument"),
            });
        }
        Ok(Polynomial::constant(
            self.nvars(),
            func(arg.constant_term()),
        ))
    }
}

/// Matrix with polynomial entries, row-major.
#[derive(Clone, PartialEq, Debug)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        entries: Vec<Polynomial>,
    ) -> Result<PolyMatrix, PolyError> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(PolyError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        let nvars = entries[0].nvars();
        if let Some(bad) = entries.iter().find(|p| p.nvars() != nvars) {
            return Err(PolyError::VarCountMismatch {
                left: nvars,
                right: bad.nvars(),
            });
        }
        Ok(PolyMatrix {
            rows,
            cols,
            nvars,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            nvars,
            entries: vec![Polynomial::zero(nvars); rows * cols],
        }
    }

    pub fn from_constant(m: &DMatrix<f64>, nvars: usize) -> Self {
        let mut entries = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                entries.push(Polynomial::constant(nvars, m[(i, j)]));
            }
        }
        PolyMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            nvars,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p;
    }

    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    pub fn transpose(&self) -> PolyMatrix {
        let mut entries = Vec::with_capacity(self.entries.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                entries.push(self.get(i, j).clone());
            }
        }
        PolyMatrix {
            rows: self.cols,
            cols: self.rows,
            nvars: self.nvars,
            entries,
        }
    }

    pub fn mul(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.cols != other.rows {
            return Err(PolyError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        if self.nvars != other.nvars {
            return Err(PolyError::VarCountMismatch {
                left: self.nvars,
                right: other.nvars,
            });
        }
        let mut out = PolyMatrix::zeros(self.rows, other.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Polynomial::zero(self.nvars);
                for k in 0..self.cols {
                    acc = &acc + &(self.get(i, k) * other.get(k, j));
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PolyError::Shape("subtraction of different shapes".into()));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.try_sub(b))
            .collect::<Result<Vec<_>, _>>()?;
        PolyMatrix::new(self.rows, self.cols, entries)
    }

    pub fn scale(&self, s: f64) -> PolyMatrix {
        PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: self.nvars,
            entries: self.entries.iter().map(|p| p.scale(s)).collect(),
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<DMatrix<f64>, PolyError> {
        if point.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: point.len(),
            });
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j).eval(point)
        }))
    }

    /// Largest coefficient magnitude over all entries.
    pub fn max_abs_coeff(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0, |a, p| a.max(p.max_abs_coeff()))
    }
}
